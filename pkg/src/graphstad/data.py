"""Occupancy maps, lumisection metadata, and the on-disk dataset layout.

A dataset directory holds ``manifest.json`` (geometry, run list, split,
seeds), ``metas.csv`` (one row per map) and ``maps/NNNNNN.gstn`` blobs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GeometryConfig, SegmentationMap
from .tensor.serialize import read_tensor, write_tensor


@dataclass(frozen=True)
class LumisectionMeta:
    run_id: int
    ls: int
    events: float
    lumi: float

    def __post_init__(self):
        if self.ls < 1:
            raise ValueError(f"lumisection number must be >= 1, got {self.ls}")
        if self.events < 0 or self.lumi < 0:
            raise ValueError("events and luminosity must be non-negative")


@dataclass
class DigiOccupancyMap:
    values: np.ndarray  # [n_ieta, n_iphi, n_depth]
    meta: LumisectionMeta


@dataclass
class MapDataset:
    """Stacked maps in (run, ls) order with their metadata."""

    values: np.ndarray  # [N, n_ieta, n_iphi, n_depth]
    metas: list[LumisectionMeta]
    geometry: GeometryConfig
    train_ls: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.metas) != self.values.shape[0]:
            raise ValueError("one meta record per map is required")
        keys = [(m.run_id, m.ls) for m in self.metas]
        if len(set(keys)) != len(keys):
            raise ValueError("(run_id, ls) pairs must be unique")

    def __len__(self) -> int:
        return len(self.metas)

    def __getitem__(self, i: int) -> DigiOccupancyMap:
        return DigiOccupancyMap(self.values[i], self.metas[i])

    @property
    def segmentation(self) -> SegmentationMap:
        return SegmentationMap.synthetic(self.geometry)

    def runs(self) -> list[int]:
        return sorted({m.run_id for m in self.metas})

    def run_indices(self, run_id: int, split: str = "all") -> np.ndarray:
        """Row indices of one run in LS order; ``split`` is 'train', 'test' or 'all'."""
        rows = [i for i, m in enumerate(self.metas) if m.run_id == run_id
                and (split == "all" or (split == "train") == (m.ls <= self.train_ls))]
        return np.array(sorted(rows, key=lambda i: self.metas[i].ls), dtype=np.int64)

    def split_indices(self, split: str) -> np.ndarray:
        return np.concatenate([self.run_indices(r, split) for r in self.runs()])

    def lumi(self) -> np.ndarray:
        return np.array([m.lumi for m in self.metas])

    def events(self) -> np.ndarray:
        return np.array([m.events for m in self.metas])

    def copy(self) -> "MapDataset":
        return MapDataset(self.values.copy(), list(self.metas), self.geometry, self.train_ls, dict(self.info))


def save_dataset(ds: MapDataset, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "maps").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "graphstad-dataset/1",
        "geometry": ds.geometry.to_dict(),
        "runs": ds.runs(),
        "n_maps": len(ds),
        "train_ls": ds.train_ls,
        "info": ds.info,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(directory / "metas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "run", "ls", "events", "lumi", "file"])
        for i, m in enumerate(ds.metas):
            fname = f"maps/{i:06d}.gstn"
            w.writerow([i, m.run_id, m.ls, repr(float(m.events)), repr(float(m.lumi)), fname])
            write_tensor(directory / fname, ds.values[i].astype(np.float32))


def load_dataset(directory: str | Path) -> MapDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    geometry = GeometryConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in manifest["geometry"].items()})
    metas, maps = [], []
    with open(directory / "metas.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            metas.append(LumisectionMeta(int(row["run"]), int(row["ls"]), float(row["events"]), float(row["lumi"])))
            maps.append(read_tensor(directory / row["file"]))
    values = np.stack(maps).astype(np.float32) if maps else np.zeros((0,) + geometry.shape, np.float32)
    return MapDataset(values, metas, geometry, int(manifest["train_ls"]), manifest.get("info", {}))
