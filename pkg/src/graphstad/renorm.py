"""Luminosity/event-count driven renormalization of occupancy maps.

A small regressor maps (events, luminosity) to the expected per-depth total
occupancy; each channel is then divided by its depth's prediction and scaled
by a constant K so maps from different run conditions become comparable.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DigiOccupancyMap, LumisectionMeta, MapDataset
from .tensor import ContractError, ParamSet, Tensor, no_grad, ops
from .tensor.params import he_normal, zeros
from .tensor.serialize import load_manifest, load_param_state, save_params
from .training import Adam

log = logging.getLogger(__name__)

RENORM_FLOOR = 1e-6
HIDDEN = (64, 64)


class RenormError(ValueError):
    pass


def depth_totals(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-depth sums over active channels; ``values`` is [..., D1, D2, D3]."""
    v = np.where(mask, values, 0.0)
    return v.sum(axis=(-3, -2)).astype(np.float64)


def global_totals(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return depth_totals(values, mask).sum(axis=-1)


def meta_inputs(metas: list[LumisectionMeta]) -> np.ndarray:
    return np.array([[m.events, m.lumi] for m in metas], dtype=np.float64)


@dataclass
class RenormModel:
    """FC(2->64)->ReLU->FC(64->64)->ReLU->FC(64->n_depth)->ReLU on standardized inputs.

    The network predicts totals divided by ``target_scale`` so its outputs stay O(1).
    """

    params: ParamSet
    input_mean: np.ndarray
    input_std: np.ndarray
    target_scale: np.ndarray
    K: float
    active_depths: np.ndarray  # bool per depth: depth has at least one active channel

    @property
    def n_depth(self) -> int:
        return len(self.target_scale)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """[N, 2] raw (events, lumi) -> [N, n_depth] predicted depth totals."""
        x = (np.asarray(inputs, dtype=np.float64) - self.input_mean) / self.input_std
        with no_grad():
            y = _forward(self.params, Tensor(x.astype(self.params["fc.0.weight"].data.dtype)))
        return y.data.astype(np.float64) * self.target_scale

    def predict_meta(self, metas: list[LumisectionMeta]) -> np.ndarray:
        return self.predict(meta_inputs(metas))

    def save(self, directory: str | Path) -> None:
        manifest = {
            "format": "graphstad-renorm/1",
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_scale": self.target_scale.tolist(),
            "K": self.K,
            "active_depths": self.active_depths.astype(int).tolist(),
        }
        save_params(self.params, directory, manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "RenormModel":
        m = load_manifest(directory)
        if m.get("format") != "graphstad-renorm/1":
            raise RenormError(f"{directory} is not a renorm checkpoint")
        state = load_param_state(directory)
        n_depth = len(m["target_scale"])
        params = _build_params(np.random.default_rng(0), n_depth)
        params.load_state(state)
        return cls(params, np.array(m["input_mean"]), np.array(m["input_std"]),
                   np.array(m["target_scale"]), float(m["K"]), np.array(m["active_depths"], dtype=bool))


def _build_params(rng: np.random.Generator, n_out: int) -> ParamSet:
    p = ParamSet()
    sizes = (2,) + HIDDEN + (n_out,)
    for l, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        p.add(f"fc.{l}.weight", he_normal(rng, (fout, fin), fin))
        p.add(f"fc.{l}.bias", zeros(fout))
    # targets are scaled to unit mean; a unit output bias keeps the final ReLU alive at init
    p[f"fc.{len(HIDDEN)}.bias"].data[...] = 1.0
    return p


def _forward(params: ParamSet, x: Tensor) -> Tensor:
    n_layers = len(HIDDEN) + 1
    for l in range(n_layers):
        x = ops.relu(ops.fc(x, params[f"fc.{l}.weight"], params[f"fc.{l}.bias"]))
    return x


def _mse(params: ParamSet, x: np.ndarray, y: np.ndarray) -> Tensor:
    pred = _forward(params, Tensor(x))
    diff = ops.sub(pred, y)
    return ops.mul(ops.sum(ops.square(diff)), 1.0 / x.shape[0])


def train_renorm(inputs: np.ndarray, totals: np.ndarray, active_depths: np.ndarray | None = None,
                 K: float | None = None, channels_per_depth: np.ndarray | None = None, seed: int = 0,
                 lr: float = 3e-3, max_iters: int = 3000, patience: int = 200, val_fraction: float = 0.2,
                 batch_size: int = 64) -> RenormModel:
    """Fit the regressor on (events, lumi) -> per-depth totals by MSE with Adam.

    Early stopping watches a random ``val_fraction`` hold-out, checked once per
    pass over the training rows. ``K`` defaults to the mean active-channel
    count over populated depths.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    totals = np.asarray(totals, dtype=np.float64)
    n, n_depth = totals.shape
    if inputs.shape != (n, 2):
        raise ContractError(f"inputs must be [N, 2], got {inputs.shape}")
    if active_depths is None:
        active_depths = totals.max(axis=0) > 0
    if K is None:
        if channels_per_depth is None:
            raise ContractError("either K or channels_per_depth is required")
        cpd = np.asarray(channels_per_depth, dtype=np.float64)
        K = float(cpd[cpd > 0].mean())
    if K <= 0:
        raise ContractError("K must be positive")

    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    scale = np.where(totals.mean(axis=0) > 0, totals.mean(axis=0), 1.0)
    rng = np.random.default_rng(seed)
    params = _build_params(rng, n_depth)
    degenerate = len(np.unique(inputs, axis=0)) < 2
    if degenerate:
        warnings.warn("renorm inputs are constant; fitting a constant model", RuntimeWarning, stacklevel=2)
        for name, t in params.items():
            t.data[...] = 0.0
        params[f"fc.{len(HIDDEN)}.bias"].data[...] = (totals.mean(axis=0) / scale).astype(params["fc.0.bias"].data.dtype)
        return RenormModel(params, mean, np.ones(2), scale, K, np.asarray(active_depths, bool))
    std = np.where(std > 0, std, 1.0)

    x = ((inputs - mean) / std).astype(params["fc.0.weight"].data.dtype)
    y = (totals / scale).astype(x.dtype)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n >= 5 else 0
    val, tr = order[:n_val], order[n_val:]
    if n_val == 0:
        val = tr
    opt = Adam(params.trainable())
    best, best_state, best_it, it = np.inf, params.state(), 0, 0
    while it < max_iters:
        perm = rng.permutation(tr)
        for b in range(0, len(perm), batch_size):
            idx = perm[b:b + batch_size]
            loss = _mse(params, x[idx], y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            it += 1
        with no_grad():
            v = float(_mse(params, x[val], y[val]).data)
        if v < best:
            best, best_state, best_it = v, params.state(), it
        elif it - best_it >= patience:
            break
    params.load_state(best_state)
    log.info("renorm fit: %d iterations, best validation mse %.3g", it, best)
    return RenormModel(params, mean, std, scale, K, np.asarray(active_depths, bool))


def train_renorm_dataset(ds: MapDataset, split: str = "train", **kwargs) -> RenormModel:
    mask = ds.segmentation.active_mask
    rows = ds.split_indices(split)
    metas = [ds.metas[i] for i in rows]
    totals = depth_totals(ds.values[rows], mask)
    return train_renorm(meta_inputs(metas), totals, active_depths=mask.sum(axis=(0, 1)) > 0,
                        channels_per_depth=mask.sum(axis=(0, 1)), **kwargs)


def renormalize_values(values: np.ndarray, normalizers: np.ndarray, K: float, mask: np.ndarray,
                       active_depths: np.ndarray | None = None) -> np.ndarray:
    """K * gamma / gamma_bar[depth] for maps [N, D1, D2, D3] with normalizers [N, D3]."""
    values = np.asarray(values, dtype=np.float64)
    normalizers = np.atleast_2d(np.asarray(normalizers, dtype=np.float64))
    if active_depths is None:
        active_depths = mask.any(axis=(0, 1))
    low = (normalizers <= RENORM_FLOOR) & active_depths
    if np.any(low):
        row, d = np.argwhere(low)[0]
        raise RenormError(f"predicted normalizer {normalizers[row, d]:.3g} below {RENORM_FLOOR} at depth {d + 1}")
    safe = np.where(active_depths, normalizers, 1.0)
    out = K * values / safe[..., None, None, :]
    return np.where(mask, out, 0.0)


def renormalize(m: DigiOccupancyMap, model: RenormModel, mask: np.ndarray) -> DigiOccupancyMap:
    norm = model.predict_meta([m.meta])
    vals = renormalize_values(m.values[None], norm, model.K, mask, model.active_depths)[0]
    return DigiOccupancyMap(vals.astype(np.float32), m.meta)


def renormalize_dataset(ds: MapDataset, model: RenormModel) -> np.ndarray:
    """All maps of ``ds`` renormalized, [N, D1, D2, D3] float64."""
    mask = ds.segmentation.active_mask
    norm = model.predict_meta(ds.metas)
    return renormalize_values(ds.values, norm, model.K, mask, model.active_depths)


def coefficient_of_variation(totals: np.ndarray, active_depths: np.ndarray) -> np.ndarray:
    """Per-depth std/mean of [N, D] totals for populated depths."""
    t = totals[:, active_depths]
    return t.std(axis=0) / t.mean(axis=0)


def renorm_summary(raw_totals: np.ndarray, norm_totals: np.ndarray, active_depths: np.ndarray) -> dict:
    cv_raw = coefficient_of_variation(raw_totals, active_depths)
    cv_norm = coefficient_of_variation(norm_totals, active_depths)
    return {"cv_raw": cv_raw.tolist(), "cv_norm": cv_norm.tolist(),
            "mean_cv_raw": float(cv_raw.mean()), "mean_cv_norm": float(cv_norm.mean()),
            "reduction": float(1.0 - cv_norm.mean() / cv_raw.mean())}


def save_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
