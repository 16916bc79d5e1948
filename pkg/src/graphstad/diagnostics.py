"""Finite-difference gradient suite over every differentiable op and a tiny end-to-end model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import GeometryConfig
from .model import ArchConfig, GraphSTAD
from .tensor import (NormalizedAdjacency, Tensor, batchnorm, bilstm_layer, conv3d, deconv3d, gcn_layer,
                     global_attention_pool, gru_layer, lstm_layer, maxpool3d, maxunpool3d, ops, verification_mode)
from .tensor.gradcheck import check_gradients, gradient_report
from .training import LossConfig, channel_weights, kl_divergence, total_loss, weighted_mse

OP_TOLERANCE = 1e-4
E2E_TOLERANCE = 1e-3


@dataclass(frozen=True)
class GradResult:
    name: str
    max_rel_error: float
    tolerance: float
    kinks: int = 0  # coordinates whose h-stencil straddled a ReLU/max kink and were re-checked at smaller h

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _t(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]]:
    cases = []

    def add(name, build, inputs):
        proj = np.random.default_rng(len(cases) + 100)
        probe = build()
        weights = proj.standard_normal(probe.shape)
        cases.append((name, lambda: ops.sum(ops.mul(build(), weights)), inputs))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    add("add", lambda: ops.add(a, b), [("a", a), ("b", b)])
    add("sub", lambda: ops.sub(a, b), [("a", a), ("b", b)])
    add("mul", lambda: ops.mul(a, b), [("a", a), ("b", b)])
    add("div", lambda: ops.div(a, pos), [("a", a), ("b", pos)])
    add("square", lambda: ops.square(a), [("x", a)])
    add("exp", lambda: ops.exp(a), [("x", a)])
    add("log", lambda: ops.log(pos), [("x", pos)])
    add("relu", lambda: ops.relu(a), [("x", a)])
    add("sigmoid", lambda: ops.sigmoid(a), [("x", a)])
    add("tanh", lambda: ops.tanh(a), [("x", a)])
    add("softplus", lambda: ops.softplus(a), [("x", a)])
    add("softmax", lambda: ops.softmax(a, axis=-1), [("x", a)])
    add("sum/mean", lambda: ops.add(ops.sum(a, axis=0), ops.mean(a, axis=0)), [("x", a)])
    add("reshape/transpose", lambda: ops.transpose(ops.reshape(a, (4, 3))), [("x", a)])
    add("getitem/take", lambda: ops.add(a[1:, ::2], ops.take(a, np.array([0, 2]), axis=0)[:, 1::2]), [("x", a)])
    add("concat/stack", lambda: ops.add(ops.concat([a, b], axis=0), ops.reshape(ops.stack([b, a], axis=0), (6, 4))),
        [("a", a), ("b", b)])
    w, bias = _t(rng, 5, 4), _t(rng, 5)
    add("matmul", lambda: ops.matmul(a, ops.transpose(w)), [("a", a), ("b", w)])
    add("fc", lambda: ops.fc(a, w, bias), [("x", a), ("W", w), ("b", bias)])

    x = _t(rng, 2, 2, 4, 5, 3)
    wc, bc = _t(rng, 3, 2, 3, 3, 3, scale=0.3), _t(rng, 3)
    add("conv3d", lambda: conv3d(x, wc, bc, padding=1), [("x", x), ("w", wc), ("b", bc)])
    wd, bd = _t(rng, 2, 3, 3, 3, 3, scale=0.3), _t(rng, 3)
    add("deconv3d", lambda: deconv3d(x, wd, bd, padding=1), [("x", x), ("w", wd), ("b", bd)])
    w1, b1 = _t(rng, 2, 1, 1, 1, 1), _t(rng, 1)
    add("deconv3d[k=1]", lambda: deconv3d(x, w1, b1, padding=0), [("x", x), ("w", w1), ("b", b1)])
    xp = Tensor(rng.permutation(2 * 2 * 5 * 7 * 3).reshape(2, 2, 5, 7, 3) * 0.01, requires_grad=True)
    add("maxpool3d", lambda: maxpool3d(xp)[0], [("x", xp)])
    _, idx = maxpool3d(Tensor(xp.data))
    up = _t(rng, *idx.output_shape)
    add("maxunpool3d", lambda: maxunpool3d(up, idx), [("x", up)])
    xb = _t(rng, 6, 3, 2, 2, 2)
    gam, bet = _t(rng, 3, offset=1.0), _t(rng, 3)
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    add("batchnorm[train]", lambda: batchnorm(xb, gam, bet, rm, rv, training=True),
        [("x", xb), ("gamma", gam), ("beta", bet)])
    rm2, rv2 = Tensor(rng.standard_normal(3)), Tensor(rng.uniform(0.5, 2, 3))
    add("batchnorm[eval]", lambda: batchnorm(xb, gam, bet, rm2, rv2, training=False),
        [("x", xb), ("gamma", gam), ("beta", bet)])

    groups = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3])
    A = (groups[:, None] == groups[None, :]).astype(float) - np.eye(10)
    adj = NormalizedAdjacency(A, groups=groups)
    h, wg, bg = _t(rng, 10, 3), _t(rng, 3, 4), _t(rng, 4)
    add("gcn_layer", lambda: gcn_layer(h, adj, wg, bg), [("H", h), ("W", wg), ("b", bg)])
    gate = _t(rng, 3)
    add("global_attention_pool", lambda: global_attention_pool(h, gate), [("H", h), ("w_gate", gate)])

    seq = _t(rng, 4, 2, 3)
    lp = {"w_ih": _t(rng, 20, 3, scale=0.5), "w_hh": _t(rng, 20, 5, scale=0.5), "b": _t(rng, 20)}
    add("lstm_layer", lambda: lstm_layer(seq, lp), [("seq", seq)] + list(lp.items()))
    gp = {"w_ih": _t(rng, 15, 3, scale=0.5), "w_hh": _t(rng, 15, 5, scale=0.5), "b": _t(rng, 15),
          "b_hh": _t(rng, 15)}
    add("gru_layer", lambda: gru_layer(seq, gp), [("seq", seq)] + list(gp.items()))
    bp = {"w_ih": _t(rng, 8, 3, scale=0.5), "w_hh": _t(rng, 8, 2, scale=0.5), "b": _t(rng, 8)}
    add("bilstm_layer", lambda: bilstm_layer(seq, lp, bp), [("seq", seq)] + [("bwd." + k, v) for k, v in bp.items()])

    mu, sig = _t(rng, 2, 4), Tensor(rng.uniform(0.5, 1.5, (2, 4)), requires_grad=True)
    cases.append(("kl_divergence", lambda: kl_divergence(mu, sig), [("mu", mu), ("sigma", sig)]))
    xm, xr = Tensor(rng.uniform(0, 1, (2, 3, 2, 2, 2))), _t(rng, 2, 3, 2, 2, 2)
    mask = np.ones((2, 2, 2), dtype=bool)
    wts = channel_weights(mask, LossConfig(depth_groups=((1,), (2,))))
    cases.append(("weighted_mse", lambda: weighted_mse(xm, xr, wts), [("x_rec", xr)]))
    return cases


def tiny_geometry() -> GeometryConfig:
    """4 x 6 x 2 grid, every channel active, 4 readout boxes."""
    return GeometryConfig(n_ieta=4, n_iphi=6, n_depth=2, active_ieta_min=1, active_ieta_max=2,
                          depth_profile=None, rbx_iphi_span=3)


def end_to_end_case(seed: int = 0, variant: str = "graphstad"):
    geom = tiny_geometry()
    arch = ArchConfig.variant(variant, cnn_features=(2, 3), gnn_features=(3, 2), lstm_sizes=(4, 3), latent=3,
                              window=3)
    model = GraphSTAD(arch, geom, seed=seed)
    rng = np.random.default_rng(seed)
    T = arch.window if arch.use_rnn else 1
    x = Tensor(rng.uniform(0, 1, (3, T) + geom.shape))
    mask = np.ones(geom.shape, dtype=bool)
    loss_cfg = LossConfig(depth_groups=((1,), (2,)), l2_weight=1e-3)
    wts = channel_weights(mask, loss_cfg)
    eps = rng.standard_normal((3, arch.latent))

    def fn():
        x_rec, lat = model.forward(x, training=True, eps=eps)
        return total_loss(x, x_rec, lat.mu, lat.sigma, model.params, wts, loss_cfg)[0]

    return model, fn


def gradient_suite(seed: int = 0, n_coords: int = 10, h: float = 1e-5, end_to_end: bool = True) -> list[GradResult]:
    """Max relative error per op (64-bit), then the end-to-end autoencoder loss."""
    results = []
    with verification_mode():
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _cases(rng):
            errs = check_gradients(fn, inputs, n_coords=n_coords, h=h, rng=np.random.default_rng(seed + 1))
            results.append(GradResult(name, max(errs.values()), OP_TOLERANCE))
        if end_to_end:
            model, fn = end_to_end_case(seed)
            rep = gradient_report(fn, model.params.trainable(), n_coords=n_coords, h=h,
                                  rng=np.random.default_rng(seed + 2), kink_tol=E2E_TOLERANCE)
            results.append(GradResult("autoencoder[4x6x2]", rep.max_error(), E2E_TOLERANCE, len(rep.kinks)))
    return results
