"""Reconstruction errors, standardized scores, and flags."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import GeometryConfig, all_coords
from .tensor import ContractError, Tensor, no_grad
from .tensor.serialize import read_tensor, write_tensor

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
MODES = ("isolated", "windowed")


def channel_errors(x: np.ndarray, x_rec: np.ndarray) -> np.ndarray:
    """|x - x_rec| per channel."""
    x, x_rec = np.asarray(x), np.asarray(x_rec)
    if x.shape != x_rec.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    return np.abs(x.astype(np.float64) - x_rec.astype(np.float64))


def windowed_mae(e: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean of per-step errors over the window axis."""
    if e.shape[axis] < 1:
        raise ContractError("window must hold at least one step")
    return np.mean(e, axis=axis)


@dataclass
class ScoreCalibration:
    sigma: np.ndarray  # [D1, D2, D3]
    mode: str
    floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), self.floor)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / "sigma.gstn", self.sigma)
        (directory / "calibration.json").write_text(json.dumps({"mode": self.mode, "floor": self.floor},
                                                               sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ScoreCalibration":
        directory = Path(directory)
        meta = json.loads((directory / "calibration.json").read_text())
        return cls(read_tensor(directory / "sigma.gstn"), meta["mode"], meta["floor"])


def calibrate_errors(samples: np.ndarray, mode: str, floor: float = SIGMA_FLOOR) -> ScoreCalibration:
    """Population std over axis 0 of healthy error samples, floored."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ContractError("calibration needs at least 2 samples")
    return ScoreCalibration(samples.std(axis=0), mode, floor)


def reconstruct(model, windows: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode reconstruction of [N, T, ...] windows with eps = 0."""
    outs = []
    with no_grad():
        for i in range(0, len(windows), batch_size):
            x_rec, _ = model.forward(Tensor(windows[i:i + batch_size]), training=False)
            outs.append(x_rec.data)
    return np.concatenate(outs) if outs else np.zeros_like(windows)


def window_errors(model, seq: np.ndarray, starts: Sequence[int], window: int, batch_size: int = 8) -> np.ndarray:
    """Per-step errors [len(starts), window, ...] for windows of ``seq`` beginning at ``starts``.

    A temporal model reconstructs each window jointly; a single-map model
    (model window 1) reconstructs every LS once and the errors are sliced.
    """
    starts = list(starts)
    if model.arch.use_rnn and model.arch.window != window:
        raise ContractError(f"model window {model.arch.window} != scoring window {window}")
    if model.arch.use_rnn:
        wins = np.stack([seq[s:s + window] for s in starts])
        return channel_errors(wins, reconstruct(model, wins, batch_size))
    lo, hi = min(starts), max(starts) + window
    maps = seq[lo:hi, None]
    e = channel_errors(maps, reconstruct(model, maps, batch_size))[:, 0]
    return np.stack([e[s - lo:s - lo + window] for s in starts])


def calibrate(model, sequences: Sequence[np.ndarray], mode: str, window: int = 5, stride: int = 1,
              batch_size: int = 8) -> ScoreCalibration:
    """sigma_i over sliding windows of the healthy training sequences.

    ``windowed`` uses one windowed MAE per window; ``isolated`` uses every
    per-LS error inside those windows.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    samples = []
    for seq in sequences:
        starts = range(0, len(seq) - window + 1, stride)
        e = window_errors(model, seq, starts, window, batch_size)
        samples.append(windowed_mae(e, axis=1) if mode == "windowed" else e.reshape((-1,) + e.shape[2:]))
    return calibrate_errors(np.concatenate(samples), mode)


@dataclass
class AnomalyReport:
    """Cell-level results for a set of scored LS over active channels.

    ``e``, ``e_mae``, ``s`` and ``flag`` are [n_ls, n_active]; ``channels`` are
    the flat indices of the active channels (masked channels are absent).
    """

    runs: np.ndarray
    ls: np.ndarray
    channels: np.ndarray
    e: np.ndarray
    e_mae: np.ndarray
    s: np.ndarray
    flag: np.ndarray
    alpha: float
    mode: str
    info: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"alpha": self.alpha, "mode": self.mode, "n_ls": int(len(self.ls)),
                "n_channels": int(len(self.channels)), "n_cells": int(self.s.size),
                "n_flagged": int(self.flag.sum()), "max_score": float(self.s.max()) if self.s.size else 0.0,
                **self.info}

    def labels(self, truth_cells: set[tuple[int, int, int]]) -> np.ndarray:
        row = {(int(r), int(l)): k for k, (r, l) in enumerate(zip(self.runs, self.ls))}
        col = {int(c): k for k, c in enumerate(self.channels)}
        lab = np.zeros(self.s.shape, dtype=bool)
        for r, l, c in truth_cells:
            if (r, l) not in row or c not in col:
                raise ContractError(f"labelled cell (run {r}, ls {l}, channel {c}) not covered by the report")
            lab[row[(r, l)], col[c]] = True
        return lab

    def write_csv(self, path: str | Path, geometry: GeometryConfig) -> None:
        ie, ip, dp = all_coords(geometry.shape)
        ie, ip, dp = ie[self.channels], ip[self.channels], dp[self.channels]
        with open(path, "w", newline="") as fh:
            fh.write("run,ls,ieta,iphi,depth,e,e_mae,s,flag\n")
            for k in range(len(self.ls)):
                lines = [f"{self.runs[k]},{self.ls[k]},{ie[j]},{ip[j]},{dp[j]},{self.e[k, j]!r},"
                         f"{self.e_mae[k, j]!r},{self.s[k, j]!r},{int(self.flag[k, j])}"
                         for j in range(len(self.channels))]
                fh.write("\n".join(lines) + "\n")

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    def save_arrays(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("runs", "ls", "channels", "e", "e_mae", "s"):
            write_tensor(directory / f"{name}.gstn", np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def load_arrays(cls, directory: str | Path, alpha: float, mode: str) -> "AnomalyReport":
        directory = Path(directory)
        a = {n: read_tensor(directory / f"{n}.gstn") for n in ("runs", "ls", "channels", "e", "e_mae", "s")}
        return cls(a["runs"].astype(np.int64), a["ls"].astype(np.int64), a["channels"].astype(np.int64),
                   a["e"], a["e_mae"], a["s"], a["s"] > alpha, alpha, mode)


def standardize(err: np.ndarray, calibration: ScoreCalibration, channels: np.ndarray | None = None) -> np.ndarray:
    """s_i = err_i / sigma_i; ``channels`` selects flat sigma entries when ``err`` is [..., n_active]."""
    sig = calibration.sigma if channels is None else calibration.sigma.ravel()[channels]
    return np.asarray(err, dtype=np.float64) / sig


def flags(s: np.ndarray, alpha: float) -> np.ndarray:
    """a_i = s_i > alpha (strict)."""
    return np.asarray(s) > alpha


def score_and_flag(e: np.ndarray, e_mae: np.ndarray, calibration: ScoreCalibration, alpha: float,
                   runs: np.ndarray, ls: np.ndarray, channels: np.ndarray) -> AnomalyReport:
    """Standardize the mode's error (per-LS or windowed) and flag above ``alpha``."""
    s = standardize(e_mae if calibration.mode == "windowed" else e, calibration, channels)
    return AnomalyReport(np.asarray(runs), np.asarray(ls), np.asarray(channels), e, e_mae, s, flags(s, alpha),
                         alpha, calibration.mode)


def score_runs(model, sequences: dict[int, tuple[np.ndarray, np.ndarray]], calibration: ScoreCalibration,
               alpha: float, mask: np.ndarray, window: int = 5, batch_size: int = 8) -> AnomalyReport:
    """Score non-overlapping windows tiling each run's test sequence.

    ``sequences`` maps run id -> (ls numbers, scaled maps [n, D1, D2, D3]).
    LS past the last complete window are not scored.
    """
    channels = np.flatnonzero(mask.ravel())
    runs, ls, es, maes = [], [], [], []
    for run in sorted(sequences):
        ls_run, seq = sequences[run]
        n_win = len(seq) // window
        if n_win == 0:
            continue
        e = window_errors(model, seq, [k * window for k in range(n_win)], window, batch_size)
        mae = np.repeat(windowed_mae(e, axis=1)[:, None], window, axis=1)
        es.append(e.reshape((n_win * window, -1))[:, channels])
        maes.append(mae.reshape((n_win * window, -1))[:, channels])
        runs.append(np.full(n_win * window, run))
        ls.append(np.asarray(ls_run[:n_win * window]))
    if not es:
        raise ContractError(f"no run holds a complete window of {window} LS")
    return score_and_flag(np.concatenate(es), np.concatenate(maes), calibration, alpha,
                          np.concatenate(runs), np.concatenate(ls), channels)
