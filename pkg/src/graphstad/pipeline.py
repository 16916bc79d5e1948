"""Stage functions shared by the command line and the tests.

Data flow: raw maps -> renormalized (per-depth regressor) -> per-channel
scaled -> autoencoder -> errors -> standardized scores -> evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .anomaly import AnomalyReport, ScoreCalibration, calibrate, score_runs
from .config import PipelineConfig
from .data import MapDataset
from .model import ArchConfig, GraphSTAD
from .renorm import RenormModel, renormalize_dataset, train_renorm_dataset
from .simlab import EvalResult, GroundTruth, InjectionSpec, draw_targets, evaluate
from .training import ScalingStats, TrainResult, WindowSet, channel_weights, train

log = logging.getLogger(__name__)


@dataclass
class Preprocessor:
    renorm: RenormModel
    scaling: ScalingStats

    def apply(self, ds: MapDataset) -> np.ndarray:
        return self.scaling.scale(renormalize_dataset(ds, self.renorm))


def fit_preprocessor(ds: MapDataset, cfg: PipelineConfig) -> Preprocessor:
    r = cfg.renorm
    renorm = train_renorm_dataset(ds, "train", K=r.K, seed=cfg.seed, lr=r.lr, max_iters=r.max_iters,
                                  patience=r.patience, val_fraction=r.val_fraction, batch_size=r.batch_size)
    rows = ds.split_indices("train")
    stats = ScalingStats.fit(renormalize_dataset(ds, renorm)[rows])
    return Preprocessor(renorm, stats)


def run_sequences(ds: MapDataset, scaled: np.ndarray, split: str) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """run id -> (LS numbers, scaled maps) for one split, in LS order."""
    out = {}
    for run in ds.runs():
        rows = ds.run_indices(run, split)
        if len(rows):
            out[run] = (np.array([ds.metas[i].ls for i in rows]), scaled[rows])
    return out


def variant_arch(cfg: PipelineConfig, variant: str) -> ArchConfig:
    base = {k: v for k, v in cfg.arch.to_dict().items()
            if k not in ("use_gnn", "use_rnn", "use_vae", "rnn_kind", "window")}
    base["window"] = cfg.arch.window
    return ArchConfig.variant(variant, **base)


def train_autoencoder(ds: MapDataset, scaled: np.ndarray, cfg: PipelineConfig,
                      variant: str = "graphstad") -> tuple[GraphSTAD, TrainResult]:
    arch = variant_arch(cfg, variant)
    model = GraphSTAD(arch, ds.geometry, seed=cfg.seed)
    seqs = [seq for _, seq in run_sequences(ds, scaled, "train").values()]
    windows = WindowSet(seqs, arch.window if arch.use_rnn else 1)
    weights = channel_weights(ds.segmentation.active_mask, cfg.loss)
    log.info("training %s on %d windows", variant, len(windows))
    result = train(model, windows, weights, cfg.loss, cfg.train)
    return model, result


def score_mode(cfg: PipelineConfig, model: GraphSTAD) -> str:
    if cfg.evaluation.score_mode != "auto":
        return cfg.evaluation.score_mode
    return "windowed" if model.arch.use_rnn else "isolated"


def calibrate_model(model: GraphSTAD, ds: MapDataset, scaled: np.ndarray, cfg: PipelineConfig) -> ScoreCalibration:
    seqs = [seq for _, seq in run_sequences(ds, scaled, "train").values()]
    return calibrate(model, seqs, score_mode(cfg, model), window=cfg.arch.window,
                     stride=cfg.evaluation.calibration_stride, batch_size=cfg.evaluation.batch_size)


def score_dataset(model: GraphSTAD, ds: MapDataset, scaled: np.ndarray, calibration: ScoreCalibration,
                  cfg: PipelineConfig) -> AnomalyReport:
    return score_runs(model, run_sequences(ds, scaled, "test"), calibration, cfg.evaluation.alpha,
                      ds.segmentation.active_mask, window=cfg.arch.window, batch_size=cfg.evaluation.batch_size)


def make_spec(ds: MapDataset, cfg: PipelineConfig, kind: str | None = None, factor: float | None = None) -> InjectionSpec:
    inj = cfg.injection
    kind = kind or inj.kind
    if factor is None:
        factor = inj.resolved_factor() if kind == inj.kind else {"dead": 0.0, "hot": 2.0, "degraded": 0.4}[kind]
    targets, channels = draw_targets(ds, cfg.arch.window, inj.ls_fraction, inj.channel_fraction, inj.seed)
    return InjectionSpec(kind, factor, targets, channels, inj.persistence, cfg.arch.window)


def evaluate_report(report: AnomalyReport, truth: GroundTruth, anchors) -> EvalResult:
    return evaluate(report.s, report.labels(truth.cell_set()), anchors)
