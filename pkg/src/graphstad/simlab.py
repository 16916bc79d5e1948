"""Synthetic healthy data, fault injection, and recall-anchored evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import LumisectionMeta, MapDataset
from .geometry import GeometryConfig, SegmentationMap, all_coords, ieta_values

log = logging.getLogger(__name__)

ANCHORS = (0.90, 0.95, 0.99)
ANOMALY_FACTORS = {"dead": 0.0, "hot": 2.0}
DEGRADED_FACTORS = (0.8, 0.6, 0.4, 0.2, 0.0)


class InjectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic occupancy stream.

    Expected counts are ``baseline_i * gain_rbx(t) * f(events, lumi)`` with
    ``f = (lumi / lumi_ref)**lumi_exp * (events / events_ref)**events_exp``.
    """

    n_runs: int = 4
    train_ls: int = 154
    test_ls: int = 100
    lumi_max: float = 0.4
    lumi_spread: float = 3.5          # ratio between brightest and dimmest run start
    lumi_decay_ls: float = 2000.0     # e-folding length of the intra-run decay
    n_steps: int = 2                  # step changes per run
    step_range: tuple[float, float] = (0.88, 0.97)
    events_max: float = 2250.0
    lumi_ref: float = 0.25
    events_ref: float = 1800.0
    lumi_exp: float = 0.8
    events_exp: float = 0.2
    count_min: float = 1000.0
    count_max: float = 10000.0
    depth1_scale: float = 2.0         # depth-1 intensity relative to deeper layers
    rbx_gain_sigma: float = 0.15
    rbx_gain_corr: float = 0.5
    ls_gain_sigma: float = 0.1        # per-LS global gain not explained by (events, lumi)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "step_range", tuple(self.step_range))
        if self.n_runs < 1 or self.train_ls < 1 or self.test_ls < 0:
            raise ValueError("n_runs, train_ls must be >= 1 and test_ls >= 0")
        if not 0 < self.lumi_max or self.lumi_spread < 1:
            raise ValueError("lumi_max must be positive and lumi_spread >= 1")

    @property
    def ls_per_run(self) -> int:
        return self.train_ls + self.test_ls

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_range"] = list(self.step_range)
        return d


class SyntheticWorld:
    """Baseline intensity field, per-run (events, lumi) schedules, and the noise law."""

    def __init__(self, geometry: GeometryConfig, cfg: WorldConfig):
        self.geometry = geometry
        self.cfg = cfg
        self.seg = SegmentationMap.synthetic(geometry)
        self.mask = self.seg.active_mask
        self.baseline = self._baseline(np.random.default_rng([cfg.seed, 0]))

    def _baseline(self, rng: np.random.Generator) -> np.ndarray:
        g, c = self.geometry, self.cfg
        ieta = np.abs(np.array(ieta_values(g.n_ieta), dtype=np.float64))
        iphi = np.arange(1, g.n_iphi + 1, dtype=np.float64)
        lo, hi = g.active_ieta_min, g.active_ieta_max
        u = (ieta - lo) / max(hi - lo, 1)
        eta_shape = 0.55 + 0.45 * np.cos(np.pi * np.clip(u, 0, 1)) ** 2
        ph = rng.uniform(0, 2 * np.pi, size=2)
        phi_shape = 1.0 + 0.08 * np.sin(2 * np.pi * iphi / g.n_iphi + ph[0]) \
            + 0.04 * np.sin(6 * np.pi * iphi / g.n_iphi + ph[1])
        depth = np.arange(1, g.n_depth + 1, dtype=np.float64)
        depth_shape = np.where(depth == 1, c.depth1_scale, 1.0 / (1.0 + 0.15 * (depth - 2)))
        field_ = eta_shape[:, None, None] * phi_shape[None, :, None] * depth_shape[None, None, :]
        field_ = field_ * rng.lognormal(0.0, 0.1, size=field_.shape)
        active = field_[self.mask]
        lo_v, hi_v = active.min(), active.max()
        logs = np.log(c.count_min) + (np.log(field_) - np.log(lo_v)) / max(np.log(hi_v / lo_v), 1e-12) \
            * (np.log(c.count_max) - np.log(c.count_min))
        return np.where(self.mask, np.exp(logs), 0.0)

    def response(self, events: np.ndarray, lumi: np.ndarray) -> np.ndarray:
        c = self.cfg
        return (np.asarray(lumi) / c.lumi_ref) ** c.lumi_exp * (np.asarray(events) / c.events_ref) ** c.events_exp

    def schedule(self, run: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(events, lumi) per LS for one run: exponential decay with step drops."""
        c = self.cfg
        n = c.ls_per_run
        frac = run / max(c.n_runs - 1, 1)
        start = c.lumi_max * (1.0 - (1.0 - 1.0 / c.lumi_spread) * frac)
        t = np.arange(n, dtype=np.float64)
        lumi = start * np.exp(-t / c.lumi_decay_ls)
        for s in np.sort(rng.integers(1, n, size=c.n_steps)):
            lumi[s:] *= rng.uniform(*c.step_range)
        lumi *= rng.uniform(0.97, 1.0, size=n)
        events = c.events_max * np.sqrt(lumi / c.lumi_max) * rng.uniform(0.9, 1.0, size=n)
        return np.minimum(events, c.events_max), np.minimum(lumi, c.lumi_max)

    def rbx_gains(self, n_ls: int, rng: np.random.Generator) -> np.ndarray:
        """AR(1) log-gain per readout box over time, mapped onto channels [n_ls, D1, D2, D3]."""
        c = self.cfg
        ids = self.seg.rbx_ids()
        x = np.zeros((n_ls, len(ids)))
        x[0] = rng.normal(0, c.rbx_gain_sigma, len(ids))
        innov = c.rbx_gain_sigma * math.sqrt(1 - c.rbx_gain_corr ** 2)
        for t in range(1, n_ls):
            x[t] = c.rbx_gain_corr * x[t - 1] + rng.normal(0, innov, len(ids))
        col = np.zeros(int(np.prod(self.geometry.shape)), dtype=np.int64)
        pos = {r: k for k, r in enumerate(ids)}
        for i, r in self.seg.rbx.items():
            col[i] = pos[r]
        return np.exp(x[:, col]).reshape((n_ls,) + self.geometry.shape)

    def expected(self, events: np.ndarray, lumi: np.ndarray, gains: np.ndarray | None = None) -> np.ndarray:
        f = self.response(events, lumi)[:, None, None, None]
        lam = self.baseline[None] * f
        return lam if gains is None else lam * gains


def generate_dataset(world: SyntheticWorld) -> MapDataset:
    """Poisson maps for every run; deterministic in ``world.cfg.seed``."""
    c = world.cfg
    values, metas = [], []
    for run in range(c.n_runs):
        rng = np.random.default_rng([c.seed, 1, run])
        events, lumi = world.schedule(run, rng)
        gains = world.rbx_gains(c.ls_per_run, rng)
        gains = gains * rng.lognormal(0.0, c.ls_gain_sigma, size=c.ls_per_run)[:, None, None, None]
        lam = world.expected(events, lumi, gains)
        values.append(rng.poisson(lam).astype(np.float32) * world.mask)
        run_id = 1000 + run
        metas += [LumisectionMeta(run_id, ls + 1, float(events[ls]), float(lumi[ls])) for ls in range(c.ls_per_run)]
    info = {"world": c.to_dict(), "kind": "synthetic"}
    return MapDataset(np.concatenate(values), metas, world.geometry, c.train_ls, info)


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InjectionSpec:
    """Fault of factor ``factor`` on channels ``channels`` at LS ``targets``.

    ``targets`` holds (run, ls) pairs. With ``persistence='window'`` each
    target starts a fault lasting ``window`` consecutive LS.
    """

    kind: str
    factor: float
    targets: tuple[tuple[int, int], ...]
    channels: tuple[int, ...]  # flat channel indices
    persistence: str = "window"
    window: int = 5

    def __post_init__(self):
        if self.kind not in ("dead", "hot", "degraded"):
            raise InjectionError(f"unknown anomaly kind {self.kind!r}")
        if self.factor < 0:
            raise InjectionError("factor must be non-negative")
        if self.persistence not in ("isolated", "window"):
            raise InjectionError("persistence must be 'isolated' or 'window'")
        object.__setattr__(self, "targets", tuple((int(r), int(s)) for r, s in self.targets))
        object.__setattr__(self, "channels", tuple(sorted(int(c) for c in self.channels)))

    @property
    def span(self) -> int:
        return self.window if self.persistence == "window" else 1

    def with_factor(self, kind: str, factor: float) -> "InjectionSpec":
        return InjectionSpec(kind, factor, self.targets, self.channels, self.persistence, self.window)

    def cells(self) -> list[tuple[int, int]]:
        """(run, ls) pairs affected."""
        return sorted({(r, s + k) for r, s in self.targets for k in range(self.span)})


def draw_targets(ds: MapDataset, window: int = 5, ls_fraction: float = 0.5, channel_fraction: float = 0.02,
                 seed: int = 0) -> tuple[tuple[tuple[int, int], ...], tuple[int, ...]]:
    """Random test windows (aligned to the scoring tiling) and a random active channel set."""
    rng = np.random.default_rng([seed, 2])
    starts = []
    for run in ds.runs():
        n_test = len(ds.run_indices(run, "test"))
        starts += [(run, ds.train_ls + 1 + k * window) for k in range(n_test // window)]
    n_win = max(1, int(round(len(starts) * ls_fraction)))
    pick = rng.choice(len(starts), size=n_win, replace=False)
    targets = tuple(sorted(starts[i] for i in pick))
    active = ds.segmentation.active_indices()
    n_ch = max(1, int(round(len(active) * channel_fraction)))
    channels = tuple(sorted(int(c) for c in rng.choice(active, size=n_ch, replace=False)))
    return targets, channels


@dataclass
class GroundTruth:
    """Injected anomaly cells as (run, ls, flat channel, factor)."""

    geometry: GeometryConfig
    rows: list[tuple[int, int, int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def cell_set(self) -> set[tuple[int, int, int]]:
        return {(r, s, c) for r, s, c, _ in self.rows}

    def write_csv(self, path: str | Path) -> None:
        ie, ip, dp = all_coords(self.geometry.shape)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "ls", "ieta", "iphi", "depth", "R_D"])
            for r, s, c, f in self.rows:
                w.writerow([r, s, int(ie[c]), int(ip[c]), int(dp[c]), repr(float(f))])

    @classmethod
    def read_csv(cls, path: str | Path, geometry: GeometryConfig) -> "GroundTruth":
        from .geometry import ChannelCoordinate, coord_to_index
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                c = coord_to_index(ChannelCoordinate(int(row["ieta"]), int(row["iphi"]), int(row["depth"])),
                                   geometry.shape)
                rows.append((int(row["run"]), int(row["ls"]), c, float(row["R_D"])))
        return cls(geometry, rows)


def inject(ds: MapDataset, spec: InjectionSpec) -> tuple[MapDataset, GroundTruth]:
    """gamma_a = R_D * gamma_h on the targeted cells; every other cell is left untouched."""
    mask = ds.segmentation.active_mask.ravel()
    bad = [c for c in spec.channels if not mask[c]]
    if bad:
        raise InjectionError(f"target channel {bad[0]} is not active")
    row_of = {(m.run_id, m.ls): i for i, m in enumerate(ds.metas)}
    out = ds.copy()
    flat = out.values.reshape(len(out), -1)
    ch = np.array(spec.channels, dtype=np.int64)
    truth = GroundTruth(ds.geometry)
    for run, ls in spec.cells():
        i = row_of.get((run, ls))
        if i is None or ls <= ds.train_ls:
            raise InjectionError(f"target (run {run}, ls {ls}) outside the test range")
        flat[i, ch] = (spec.factor * flat[i, ch].astype(np.float64)).astype(flat.dtype)
        truth.rows += [(run, ls, int(c), spec.factor) for c in ch]
    out.info = dict(out.info, injection={"kind": spec.kind, "factor": spec.factor,
                                         "persistence": spec.persistence, "n_cells": len(truth)})
    return out, truth


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    anchor: float
    reachable: bool
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else float("nan")

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else float("nan")

    def to_dict(self) -> dict:
        return {"anchor": self.anchor, "reachable": self.reachable, "threshold": self.threshold,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1, "fpr": self.fpr}


@dataclass
class EvalResult:
    points: list[OperatingPoint]
    n_cells: int
    n_anomalous: int

    def point(self, anchor: float) -> OperatingPoint:
        for p in self.points:
            if math.isclose(p.anchor, anchor):
                return p
        raise KeyError(anchor)

    def table(self) -> str:
        lines = [f"{'anchor':>6} {'precision':>10} {'recall':>8} {'f1':>8} {'fpr':>11} "
                 f"{'tp':>7} {'fp':>7} {'tn':>9} {'fn':>7}"]
        for p in self.points:
            if not p.reachable:
                lines.append(f"{p.anchor:>6.2f} unreachable (max recall {p.recall:.4f})")
                continue
            lines.append(f"{p.anchor:>6.2f} {p.precision:>10.4f} {p.recall:>8.4f} {p.f1:>8.4f} {p.fpr:>11.4e} "
                         f"{p.tp:>7d} {p.fp:>7d} {p.tn:>9d} {p.fn:>7d}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            keys = ["anchor", "reachable", "threshold", "precision", "recall", "f1", "fpr", "tp", "fp", "tn", "fn"]
            w.writerow(keys)
            for p in self.points:
                d = p.to_dict()
                w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in keys])


def confusion_at(scores: np.ndarray, labels: np.ndarray, threshold: float) -> tuple[int, int, int, int]:
    flag = scores >= threshold
    tp = int(np.sum(flag & labels))
    fp = int(np.sum(flag & ~labels))
    return tp, fp, int(np.sum(~flag & ~labels)), int(np.sum(~flag & labels))


def evaluate(scores: np.ndarray, labels: np.ndarray, anchors: Sequence[float] = ANCHORS) -> EvalResult:
    """Recall-anchored operating points over all cells.

    Cells are ranked by score, descending. For each anchor the threshold is the
    highest distinct score whose flagged set (score >= threshold) reaches the
    anchored recall. NaN scores mark unscored cells, which are never flagged;
    an anchor beyond the recall they allow is reported with ``reachable=False``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same number of cells")
    n, n_pos = len(scores), int(labels.sum())
    n_neg = n - n_pos
    scored = ~np.isnan(scores)
    order = np.flatnonzero(scored)[np.argsort(-scores[scored], kind="stable")]
    s_sorted = scores[order]
    cum_tp = np.cumsum(labels[order])
    # last position of each run of tied scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True]) if len(order) else np.array([], int)
    points = []
    for a in anchors:
        need = math.ceil(a * n_pos - 1e-9)
        ok = np.flatnonzero(cum_tp[ends] >= need) if n_pos else np.array([], int)
        if len(ok) == 0:
            tp = int(cum_tp[-1]) if len(order) else 0
            fp = len(order) - tp
            points.append(OperatingPoint(a, False, float("nan"), tp, fp, n_neg - fp, n_pos - tp))
            continue
        e = ends[ok[0]]
        tp = int(cum_tp[e])
        fp = int(e + 1 - tp)
        points.append(OperatingPoint(a, True, float(s_sorted[e]), tp, fp, n_neg - fp, n_pos - tp))
    return EvalResult(points, n, n_pos)


# ---------------------------------------------------------------------------
# ablation table
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    config: str
    seed: int
    kind: str
    factor: float
    anchor: float
    fpr: float
    reachable: bool


def ablation_rows(config: str, seed: int, kind: str, factor: float, result: EvalResult) -> list[SweepRow]:
    return [SweepRow(config, seed, kind, factor, p.anchor, p.fpr, p.reachable) for p in result.points]


def median_fpr(rows: Iterable[SweepRow], config: str, factor: float, anchor: float) -> float:
    vals = [r.fpr for r in rows if r.config == config and math.isclose(r.factor, factor)
            and math.isclose(r.anchor, anchor) and r.reachable]
    return float(np.median(vals)) if vals else float("nan")


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path, reference: str = "graphstad") -> None:
    """One row per (config, seed, R_D, anchor); ``ratio`` is FPR relative to the reference config."""
    ref = {(r.seed, r.kind, r.factor, r.anchor): r.fpr for r in rows if r.config == reference}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "kind", "R_D", "anchor", "fpr", "reachable", "ratio_to_" + reference])
        for r in rows:
            base = ref.get((r.seed, r.kind, r.factor, r.anchor))
            ratio = r.fpr / base if base else float("nan")
            w.writerow([r.config, r.seed, r.kind, repr(r.factor), repr(r.anchor), repr(r.fpr), int(r.reachable),
                        repr(ratio)])


def write_median_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    """One row per (config, R_D, anchor): median FPR over seeds and the seed count behind it."""
    keys = sorted({(r.config, r.kind, r.factor, r.anchor) for r in rows}, key=lambda k: (k[0], -k[2], k[3]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "kind", "R_D", "anchor", "median_fpr", "n_seeds"])
        for config, kind, factor, anchor in keys:
            n = sum(1 for r in rows if r.config == config and r.factor == factor and r.anchor == anchor
                    and r.reachable)
            w.writerow([config, kind, repr(factor), repr(anchor), repr(median_fpr(rows, config, factor, anchor)), n])
