"""Channel geometry, readout-box segmentation, and the channel connectivity graph."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .tensor import NormalizedAdjacency, Tensor, ops


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    """Grid extents plus the rule that decides which channels exist and their readout box.

    Channels are active for ``active_ieta_min <= |ieta| <= active_ieta_max``.
    ``depth_profile`` lists the number of active depths (counted from depth 1)
    for each |ieta| in that band; ``None`` activates every depth. Readout boxes
    split each ieta side into blocks of ``rbx_iphi_span`` consecutive iphi.
    """

    n_ieta: int = 64
    n_iphi: int = 72
    n_depth: int = 7
    active_ieta_min: int = 16
    active_ieta_max: int = 29
    depth_profile: tuple[int, ...] | None = (2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 5, 6, 7)
    rbx_iphi_span: int = 4
    disabled_rbx: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_ieta % 2 or self.n_ieta < 2:
            raise GeometryError("n_ieta must be a positive even number (ieta = 0 is excluded)")
        if not 1 <= self.active_ieta_min <= self.active_ieta_max <= self.n_ieta // 2:
            raise GeometryError("active ieta band outside the grid")
        if self.depth_profile is not None:
            object.__setattr__(self, "depth_profile", tuple(int(d) for d in self.depth_profile))
            if len(self.depth_profile) != self.active_ieta_max - self.active_ieta_min + 1:
                raise GeometryError("depth_profile needs one entry per |ieta| in the active band")
            if any(not 1 <= d <= self.n_depth for d in self.depth_profile):
                raise GeometryError("depth_profile entries must lie in [1, n_depth]")
        if self.n_iphi % self.rbx_iphi_span:
            raise GeometryError("rbx_iphi_span must divide n_iphi")
        object.__setattr__(self, "disabled_rbx", tuple(self.disabled_rbx))

    @classmethod
    def full(cls, **overrides) -> "GeometryConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "GeometryConfig":
        base = dict(n_ieta=16, n_iphi=24, n_depth=3, active_ieta_min=3, active_ieta_max=8,
                    depth_profile=None, rbx_iphi_span=12)
        base.update(overrides)
        return cls(**base)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_ieta, self.n_iphi, self.n_depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_profile"] = None if self.depth_profile is None else list(self.depth_profile)
        d["disabled_rbx"] = list(self.disabled_rbx)
        return d


class ChannelCoordinate(NamedTuple):
    ieta: int
    iphi: int
    depth: int


def ieta_values(n_ieta: int) -> list[int]:
    half = n_ieta // 2
    return list(range(-half, 0)) + list(range(1, half + 1))


def coord_to_index(c: ChannelCoordinate, shape: tuple[int, int, int]) -> int:
    n_ieta, n_iphi, n_depth = shape
    half = n_ieta // 2
    if c.ieta == 0 or abs(c.ieta) > half or not 1 <= c.iphi <= n_iphi or not 1 <= c.depth <= n_depth:
        raise GeometryError(f"coordinate {tuple(c)} outside geometry bounds {shape}")
    e = c.ieta + half if c.ieta < 0 else c.ieta + half - 1
    return (e * n_iphi + (c.iphi - 1)) * n_depth + (c.depth - 1)


def index_to_coord(index: int, shape: tuple[int, int, int]) -> ChannelCoordinate:
    n_ieta, n_iphi, n_depth = shape
    if not 0 <= index < n_ieta * n_iphi * n_depth:
        raise GeometryError(f"flat index {index} outside geometry {shape}")
    e, rem = divmod(int(index), n_iphi * n_depth)
    p, d = divmod(rem, n_depth)
    half = n_ieta // 2
    ieta = e - half if e < half else e - half + 1
    return ChannelCoordinate(ieta, p + 1, d + 1)


def all_coords(shape: tuple[int, int, int]):
    """(ieta, iphi, depth) arrays for every flat index, in index order."""
    n_ieta, n_iphi, n_depth = shape
    e, p, d = np.meshgrid(np.arange(n_ieta), np.arange(n_iphi), np.arange(n_depth), indexing="ij")
    half = n_ieta // 2
    ieta = np.where(e < half, e - half, e - half + 1)
    return ieta.ravel(), (p + 1).ravel(), (d + 1).ravel()


@dataclass
class SegmentationMap:
    """Channel -> readout box assignment for every active channel."""

    shape: tuple[int, int, int]
    rbx: dict[int, str]

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        size = int(np.prod(self.shape))
        if any(not 0 <= i < size for i in self.rbx):
            raise GeometryError("segmentation entry outside geometry")

    @property
    def active_mask(self) -> np.ndarray:
        mask = np.zeros(int(np.prod(self.shape)), dtype=bool)
        mask[list(self.rbx)] = True
        return mask.reshape(self.shape)

    def active_indices(self) -> np.ndarray:
        return np.array(sorted(self.rbx), dtype=np.int64)

    def rbx_of(self, coord: ChannelCoordinate) -> str | None:
        return self.rbx.get(coord_to_index(coord, self.shape))

    def rbx_ids(self) -> list[str]:
        return sorted(set(self.rbx.values()))

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.shape).encode())
        for i in sorted(self.rbx):
            h.update(f"{i}:{self.rbx[i]};".encode())
        return h.hexdigest()[:16]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ieta", "iphi", "depth", "rbx"])
            for i in sorted(self.rbx):
                c = index_to_coord(i, self.shape)
                w.writerow([c.ieta, c.iphi, c.depth, self.rbx[i]])

    @classmethod
    def synthetic(cls, cfg: GeometryConfig) -> "SegmentationMap":
        """Readout boxes named RBX00.. ordered by (ieta side, iphi block)."""
        per_side = cfg.n_iphi // cfg.rbx_iphi_span
        rbx: dict[int, str] = {}
        for ieta in ieta_values(cfg.n_ieta):
            a = abs(ieta)
            if not cfg.active_ieta_min <= a <= cfg.active_ieta_max:
                continue
            n_d = cfg.n_depth if cfg.depth_profile is None else cfg.depth_profile[a - cfg.active_ieta_min]
            side = 0 if ieta < 0 else 1
            for iphi in range(1, cfg.n_iphi + 1):
                name = f"RBX{side * per_side + (iphi - 1) // cfg.rbx_iphi_span:02d}"
                if name in cfg.disabled_rbx:
                    continue
                for depth in range(1, n_d + 1):
                    rbx[coord_to_index(ChannelCoordinate(ieta, iphi, depth), cfg.shape)] = name
        return cls(cfg.shape, rbx)


def load_segmentation(path: str | Path, shape: tuple[int, int, int] = (64, 72, 7)) -> SegmentationMap:
    """Read a ``ieta,iphi,depth,rbx`` CSV; duplicates and out-of-bounds rows are errors."""
    rbx: dict[int, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["ieta", "iphi", "depth", "rbx"]:
            raise GeometryError(f"{path}: expected header ieta,iphi,depth,rbx, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise GeometryError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                coord = ChannelCoordinate(int(row[0]), int(row[1]), int(row[2]))
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: {exc}") from None
            idx = coord_to_index(coord, shape)
            if idx in rbx:
                raise GeometryError(f"{path}:{lineno}: duplicate channel {tuple(coord)}")
            name = row[3].strip()
            if not name:
                raise GeometryError(f"{path}:{lineno}: empty rbx id")
            rbx[idx] = name
    return SegmentationMap(shape, rbx)


class ChannelGraph:
    """Active channels as nodes; edges join channels that share a readout box."""

    def __init__(self, seg: SegmentationMap):
        if not seg.rbx:
            raise GeometryError("cannot build a graph from an empty segmentation")
        self.shape = seg.shape
        self.nodes = seg.active_indices()
        self.node_of = {int(c): n for n, c in enumerate(self.nodes)}
        labels = np.array([seg.rbx[int(c)] for c in self.nodes])
        self.rbx = labels
        _, group = np.unique(labels, return_inverse=True)
        order = np.argsort(group, kind="stable")
        sorted_groups = group[order]
        rows, cols = [], []
        for g in np.unique(sorted_groups):
            members = order[sorted_groups == g]
            r, c = np.meshgrid(members, members, indexing="ij")
            off = r != c
            rows.append(r[off])
            cols.append(c[off])
        m = len(self.nodes)
        row = np.concatenate(rows)
        col = np.concatenate(cols)
        self.A = sp.csr_matrix((np.ones(row.size, dtype=np.float64), (row, col)), shape=(m, m))
        self.adj = NormalizedAdjacency(self.A, groups=group)
        self.digest = seg.digest()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def gather(self, values: np.ndarray) -> np.ndarray:
        """[..., D1, D2, D3] grid values -> [..., M] node values."""
        if tuple(values.shape[-3:]) != self.shape:
            raise GeometryError(f"map shape {values.shape[-3:]} != geometry {self.shape}")
        return values.reshape(values.shape[:-3] + (-1,))[..., self.nodes]

    def scatter(self, nodes: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`gather`; inactive channels are zero."""
        out = np.zeros(nodes.shape[:-1] + (int(np.prod(self.shape)),), dtype=nodes.dtype)
        out[..., self.nodes] = nodes
        return out.reshape(nodes.shape[:-1] + self.shape)

    def gather_tensor(self, x: Tensor) -> Tensor:
        flat = ops.reshape(x, x.shape[:-3] + (-1,))
        return ops.take(flat, self.nodes, axis=flat.ndim - 1)


def build_graph(seg: SegmentationMap) -> ChannelGraph:
    return ChannelGraph(seg)


def map_to_node_features(values, graph: ChannelGraph) -> Tensor:
    """Active-channel values of one map (array or occupancy map) as node features [M, 1]."""
    return Tensor(graph.gather(np.asarray(getattr(values, "values", values)))[:, None])
