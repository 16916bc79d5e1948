"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradReport:
    """Per-input max relative error at the nominal step, plus kink re-checks.

    A coordinate whose error at step ``h`` exceeds ``kink_tol`` is re-examined
    at ``h/10`` and ``h/100``. If one of those agrees within ``kink_tol`` the
    nominal stencil straddled a non-differentiable point (ReLU, max) and the
    coordinate is listed in ``kinks`` instead of counting toward ``worst``.
    """

    worst: dict[str, float] = field(default_factory=dict)
    kinks: list[tuple[str, int, float, float]] = field(default_factory=list)  # name, coord, err@h, err@small

    def max_error(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0


def _central(fn, flat, c, h) -> float:
    orig = flat[c]
    flat[c] = orig + h
    up = float(fn().data)
    flat[c] = orig - h
    down = float(fn().data)
    flat[c] = orig
    return (up - down) / (2 * h)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[tuple[str, Tensor]],
                    n_coords: int = 10, h: float = 1e-5,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backprop against central differences at random coordinates.

    ``fn`` must rebuild the scalar loss from the current contents of the
    ``inputs`` tensors. Returns the max relative error per input name.
    """
    return gradient_report(fn, inputs, n_coords, h, rng, kink_tol=None).worst


def gradient_report(fn: Callable[[], Tensor], inputs: Sequence[tuple[str, Tensor]],
                    n_coords: int = 10, h: float = 1e-5, rng: np.random.Generator | None = None,
                    kink_tol: float | None = 1e-3) -> GradReport:
    rng = rng or np.random.default_rng(0)
    for _, t in inputs:
        t.grad = None
    fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in inputs}
    report = GradReport()
    with no_grad():
        for name, t in inputs:
            flat = t.data.reshape(-1)
            k = min(n_coords, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            err = 0.0
            for c in coords:
                a = float(analytic[name].reshape(-1)[c])
                e = relative_error(a, _central(fn, flat, c, h))
                if kink_tol is not None and e > kink_tol:
                    small = min(relative_error(a, _central(fn, flat, c, h * s)) for s in (0.1, 0.01))
                    if small < kink_tol:
                        report.kinks.append((name, int(c), e, small))
                        e = small
                err = max(err, e)
            report.worst[name] = err
    for _, t in inputs:
        t.grad = None
    return report
