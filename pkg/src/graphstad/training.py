"""Per-channel scaling, the training objective, Adam with a one-cycle schedule, and the fit loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError, NonFiniteError, ParamSet, Tensor, no_grad, ops
from .tensor.serialize import read_tensor, write_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalingStats:
    """Per-channel min/max of renormalized occupancy over the training maps."""

    vmin: np.ndarray
    vmax: np.ndarray
    clip_max: float = 1.5

    def __post_init__(self):
        if np.any(self.vmax < self.vmin):
            raise ContractError("scaling stats need max >= min")

    @classmethod
    def fit(cls, maps: np.ndarray, clip_max: float = 1.5) -> "ScalingStats":
        if maps.shape[0] < 1:
            raise ContractError("cannot fit scaling stats on an empty set")
        return cls(maps.min(axis=0).astype(np.float64), maps.max(axis=0).astype(np.float64), clip_max)

    @property
    def constant(self) -> np.ndarray:
        return self.vmax == self.vmin

    def scale(self, maps: np.ndarray) -> np.ndarray:
        """(v - min) / (max - min), clipped to [0, clip_max]; constant channels map to 0."""
        span = self.vmax - self.vmin
        safe = np.where(self.constant, 1.0, span)
        out = np.where(self.constant, 0.0, (maps - self.vmin) / safe)
        return np.clip(out, 0.0, self.clip_max).astype(np.float32)

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * (self.vmax - self.vmin) + self.vmin

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / "scale_min.gstn", self.vmin)
        write_tensor(directory / "scale_max.gstn", self.vmax)

    @classmethod
    def load(cls, directory: str | Path, clip_max: float = 1.5) -> "ScalingStats":
        directory = Path(directory)
        return cls(read_tensor(directory / "scale_min.gstn"), read_tensor(directory / "scale_max.gstn"), clip_max)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    depth_groups: tuple[tuple[int, ...], ...] = ((1,), (2, 3, 4, 5, 6, 7))
    group_weights: tuple[float, ...] = (0.4, 1.0)
    kl_weight: float = 0.003
    l2_weight: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "depth_groups", tuple(tuple(int(d) for d in g) for g in self.depth_groups))
        object.__setattr__(self, "group_weights", tuple(float(w) for w in self.group_weights))
        if len(self.depth_groups) != len(self.group_weights):
            raise ContractError("one weight per depth group is required")
        if any(w <= 0 for w in self.group_weights):
            raise ContractError("group weights must be positive")
        flat = [d for g in self.depth_groups for d in g]
        if len(flat) != len(set(flat)):
            raise ContractError("depth groups must not overlap")

    def to_dict(self) -> dict:
        return {"depth_groups": [list(g) for g in self.depth_groups],
                "group_weights": list(self.group_weights),
                "kl_weight": self.kl_weight, "l2_weight": self.l2_weight}


def channel_weights(mask: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Per-channel factor weight_j / M_j for active channels of group j, zero elsewhere."""
    n_depth = mask.shape[-1]
    weights = np.zeros(mask.shape, dtype=np.float64)
    covered = np.zeros(mask.shape, dtype=bool)
    for depths, wj in zip(cfg.depth_groups, cfg.group_weights):
        sel = np.zeros(mask.shape, dtype=bool)
        for d in depths:
            if 1 <= d <= n_depth:
                sel[..., d - 1] = True
        sel &= mask
        m = int(sel.sum())
        if m == 0:
            raise ContractError(f"depth group {depths} contains no active channel")
        weights[sel] = wj / m
        covered |= sel
    if np.any(mask & ~covered):
        raise ContractError("depth groups do not cover every active channel")
    return weights


def weighted_mse(x: Tensor, x_rec: Tensor, weights: np.ndarray) -> Tensor:
    """sum_j (w_j / M_j) sum_{i in C_j} (x_i - x_rec_i)^2, averaged over batch and time.

    ``x`` and ``x_rec`` are [B, T, D1, D2, D3]; ``weights`` comes from :func:`channel_weights`.
    """
    if x.shape != x_rec.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    n = x.shape[0] * x.shape[1]
    diff = ops.sub(x_rec, x)
    w = np.asarray(weights, dtype=x_rec.data.dtype) / n
    return ops.sum(ops.mul(ops.square(diff), w))


def kl_divergence(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL[N(mu, sigma) || N(0, I)]: summed over latent dims, averaged over rows."""
    if np.any(sigma.data <= 0):
        raise ContractError("kl_divergence needs sigma > 0")
    rows = mu.shape[0] if mu.ndim > 1 else 1
    var = ops.square(sigma)
    terms = ops.sub(ops.add(var, ops.square(mu)), ops.add(ops.log(var), 1.0))
    return ops.mul(ops.sum(terms), 0.5 / rows)


def l2_penalty(params: ParamSet) -> Tensor:
    weights = [t for _, t in params.weights()]
    total = ops.sum(ops.square(weights[0]))
    for t in weights[1:]:
        total = ops.add(total, ops.sum(ops.square(t)))
    return total


def total_loss(x: Tensor, x_rec: Tensor, mu: Tensor | None, sigma: Tensor | None, params: ParamSet,
               weights: np.ndarray, cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted MSE + kl_weight * KL + l2_weight * ||W||^2 (KL added as a penalty)."""
    rec = weighted_mse(x, x_rec, weights)
    loss = rec
    parts = {"mse": float(rec.data)}
    if mu is not None and cfg.kl_weight:
        kl = kl_divergence(mu, sigma)
        loss = ops.add(loss, ops.mul(kl, cfg.kl_weight))
        parts["kl"] = float(kl.data)
    if cfg.l2_weight:
        l2 = l2_penalty(params)
        loss = ops.add(loss, ops.mul(l2, cfg.l2_weight))
        parts["l2"] = float(l2.data)
    return loss, parts


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class OneCycleLR:
    """One-cycle policy: cosine warmup to ``max_lr`` then cosine anneal.

    lr(0) = max_lr / div_factor, lr(peak) = max_lr, lr(last) = lr(0) / final_div_factor.
    """

    def __init__(self, max_lr: float, total_steps: int, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4):
        if total_steps < 3:
            raise ValueError("one-cycle schedule needs at least 3 steps")
        self.max_lr = max_lr
        self.total_steps = total_steps
        self.initial_lr = max_lr / div_factor
        self.min_lr = self.initial_lr / final_div_factor
        self.peak = min(max(1, int(round(pct_start * (total_steps - 1)))), total_steps - 2)

    @staticmethod
    def _cos(start: float, end: float, frac: float) -> float:
        return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total_steps - 1)
        if step <= self.peak:
            return self._cos(self.initial_lr, self.max_lr, step / self.peak)
        return self._cos(self.max_lr, self.min_lr, (step - self.peak) / (self.total_steps - 1 - self.peak))


class Adam:
    def __init__(self, params: Sequence[tuple[str, Tensor]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

class WindowSet:
    """Sliding windows of ``window`` consecutive maps over per-run sequences."""

    def __init__(self, sequences: Sequence[np.ndarray], window: int, starts: Sequence[tuple[int, int]] | None = None):
        self.sequences = [np.asarray(s, dtype=np.float32) for s in sequences]
        self.window = window
        if starts is None:
            starts = [(r, s) for r, seq in enumerate(self.sequences) for s in range(len(seq) - window + 1)]
        self.starts = list(starts)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx: Sequence[int]) -> np.ndarray:
        T = self.window
        return np.stack([self.sequences[r][s:s + T] for r, s in (self.starts[i] for i in idx)])

    def split(self, val_fraction: float) -> tuple["WindowSet", "WindowSet"]:
        """Temporal split: the last ``val_fraction`` of each run's windows validate."""
        train, val = [], []
        for r in range(len(self.sequences)):
            mine = [st for st in self.starts if st[0] == r]
            n_val = int(round(len(mine) * val_fraction))
            cut = len(mine) - n_val
            train += mine[:cut]
            val += mine[cut:]
        return WindowSet(self.sequences, self.window, train), WindowSet(self.sequences, self.window, val)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    pct_start: float = 0.3
    batch_size: int = 8
    epochs: int = 200
    patience: int = 20
    min_delta: float = 0.0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1 or self.patience < 1 or self.epochs < 1:
            raise ContractError("batch_size, patience and epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            w.writerow([0, "nan", repr(self.initial_val_loss), "nan"])
            for row in self.history:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def _model_loss(model, xb: np.ndarray, weights, loss_cfg, training: bool, rng):
    x = Tensor(xb)
    x_rec, latent = model.forward(x, training=training, rng=rng if training else None)
    mu = latent.mu if model.arch.use_vae else None
    return total_loss(x, x_rec, mu, latent.sigma, model.params, weights, loss_cfg)


def evaluate_loss(model, windows: WindowSet, weights: np.ndarray, loss_cfg: LossConfig, batch_size: int) -> float:
    """Mean total loss in eval mode (running BN statistics, eps = 0)."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(windows), batch_size):
            idx = list(range(i, min(i + batch_size, len(windows))))
            loss, _ = _model_loss(model, windows.batch(idx), weights, loss_cfg, False, None)
            total += float(loss.data) * len(idx)
            count += len(idx)
    return total / max(count, 1)


def train(model, windows: WindowSet, weights: np.ndarray, loss_cfg: LossConfig, cfg: TrainConfig,
          val_windows: WindowSet | None = None) -> TrainResult:
    """Fit ``model`` on healthy windows; the best-validation parameters are restored at the end."""
    if val_windows is None:
        windows, val_windows = windows.split(cfg.val_fraction)
    if len(windows) == 0 or len(val_windows) == 0:
        raise TrainingError("need at least one training and one validation window")
    steps_per_epoch = math.ceil(len(windows) / cfg.batch_size)
    sched = OneCycleLR(cfg.max_lr, max(3, steps_per_epoch * cfg.epochs), cfg.pct_start)
    opt = Adam(model.params.trainable(), betas=cfg.betas)
    result = TrainResult()
    result.initial_val_loss = evaluate_loss(model, val_windows, weights, loss_cfg, cfg.batch_size)
    best_state = model.params.state()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))
        eps_rng = np.random.default_rng([cfg.seed, epoch, 1])
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = sched.lr(step)
            try:
                loss, _ = _model_loss(model, windows.batch(idx), weights, loss_cfg, True, eps_rng)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in op '{exc.op}' at epoch {epoch}, step {step}") from exc
            opt.step(lr)
            running += float(loss.data) * len(idx)
            step += 1
        train_loss = running / len(windows)
        try:
            val_loss = evaluate_loss(model, val_windows, weights, loss_cfg, cfg.batch_size)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value in op '{exc.op}' during validation, epoch {epoch}") from exc
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
        if val_loss < result.best_val_loss - cfg.min_delta:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = model.params.state()
        elif epoch - result.best_epoch >= cfg.patience:
            result.stopped_early = True
            break
    model.params.load_state(best_state)
    return result
