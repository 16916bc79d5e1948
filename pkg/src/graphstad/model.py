"""The spatio-temporal reconstruction autoencoder and its ablation variants.

Encoder: per-step CNN (conv3d -> BN -> ReLU -> max pool, pooling indices
kept) and GNN (GCN + ReLU layers, attention pool) branches, concatenated and
summarized over time by a 2-layer recurrent net, then a variational head.
Decoder: the latent repeated over the window, a 2-layer recurrent net, a
per-step projection back to the CNN bottleneck, and max-unpool -> deconv3d
-> BN -> ReLU blocks that consume the encoder's pooling indices in reverse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import ChannelGraph, GeometryConfig, SegmentationMap, build_graph
from .tensor import (ContractError, ParamSet, PoolIndices, Tensor, batchnorm, bilstm_layer, conv3d,
                     deconv3d, even_partition, gcn_layer, global_attention_pool, gru_layer, lstm_layer,
                     maxpool3d_partition, maxunpool3d, ops, tail_partition)
from .tensor.params import he_normal, ones, uniform, zeros
from .tensor.serialize import load_manifest, load_param_state, save_params

RNN_KINDS = ("lstm", "gru", "bilstm")
VARIANTS = ("graphstad", "no-gnn", "nontemporal", "gru", "bilstm")


@dataclass(frozen=True)
class ArchConfig:
    cnn_features: tuple[int, ...] = (16, 32, 64, 128)
    gnn_features: tuple[int, ...] = (32, 64, 128, 128)
    lstm_sizes: tuple[int, ...] = (64, 32)
    latent: int = 32
    window: int = 5
    use_gnn: bool = True
    use_rnn: bool = True
    use_vae: bool = True
    rnn_kind: str = "lstm"
    output_bias: float = 0.5

    def __post_init__(self):
        for name in ("cnn_features", "gnn_features", "lstm_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.cnn_features or not self.lstm_sizes:
            raise ContractError("cnn_features and lstm_sizes must be non-empty")
        if self.use_gnn and not self.gnn_features:
            raise ContractError("gnn_features must be non-empty when use_gnn is set")
        if self.lstm_sizes[-1] != self.latent:
            raise ContractError(f"last recurrent size {self.lstm_sizes[-1]} must equal latent size {self.latent}")
        if self.rnn_kind not in RNN_KINDS:
            raise ContractError(f"rnn_kind must be one of {RNN_KINDS}")
        if self.window < 1:
            raise ContractError("window must be >= 1")

    @classmethod
    def variant(cls, name: str, **overrides) -> "ArchConfig":
        presets = {
            "graphstad": {},
            "no-gnn": {"use_gnn": False},
            "nontemporal": {"use_gnn": False, "use_rnn": False, "window": 1},
            "gru": {"rnn_kind": "gru"},
            "bilstm": {"rnn_kind": "bilstm"},
        }
        if name not in presets:
            raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
        return replace(cls(**overrides), **presets[name])

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("cnn_features", "gnn_features", "lstm_sizes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass
class LatentSample:
    mu: Tensor
    sigma: Tensor
    eps: np.ndarray
    z: Tensor


@dataclass
class PoolPlan:
    """Per-block pooling boundaries and the resulting extents."""

    blocks: list[list[list[int]]]
    extents: list[tuple[int, int, int]]  # input extent of each block, then the output extent
    align: list[list[int]] | None
    bottleneck: tuple[int, int, int]


def plan_pooling(shape: tuple[int, int, int], n_blocks: int) -> PoolPlan:
    """Stride-2 tail-window pools, then one alignment pool down to ``max(1, extent // 2**n_blocks)``."""
    if any(e < 1 for e in shape):
        raise ContractError(f"geometry {shape} too small to pool")
    ext = tuple(shape)
    extents = [ext]
    blocks = []
    for _ in range(n_blocks):
        bounds = [tail_partition(e, 2) for e in ext]
        blocks.append(bounds)
        ext = tuple(len(b) - 1 for b in bounds)
        extents.append(ext)
    target = tuple(max(1, e // 2 ** n_blocks) for e in shape)
    align = None
    if ext != target:
        align = [even_partition(e, t) for e, t in zip(ext, target)]
        ext = target
    return PoolPlan(blocks, extents, align, ext)


class GraphSTAD:
    """Autoencoder over windows X[B, T, n_ieta, n_iphi, n_depth] of scaled occupancy."""

    def __init__(self, arch: ArchConfig, geometry: GeometryConfig, seed: int = 0,
                 graph: ChannelGraph | None = None):
        self.arch = arch
        self.geometry = geometry
        self.seed = seed
        self.graph = graph if graph is not None else build_graph(SegmentationMap.synthetic(geometry))
        if self.graph.shape != geometry.shape:
            raise ContractError(f"graph geometry {self.graph.shape} != {geometry.shape}")
        self.plan = plan_pooling(geometry.shape, len(arch.cnn_features))
        self.cnn_flat = arch.cnn_features[-1] * int(np.prod(self.plan.bottleneck))
        self.params = ParamSet()
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------
    def _bn(self, prefix: str, c: int) -> None:
        p = self.params
        p.add(f"{prefix}.gamma", ones(c))
        p.add(f"{prefix}.beta", zeros(c))
        p.add(f"{prefix}.running_mean", zeros(c))
        p.add(f"{prefix}.running_var", ones(c))

    def _linear(self, rng, prefix: str, fin: int, fout: int, gain: float = 2.0) -> None:
        self.params.add(f"{prefix}.weight", he_normal(rng, (fout, fin), fin) * np.sqrt(gain / 2.0))
        self.params.add(f"{prefix}.bias", zeros(fout))

    def _rnn(self, rng, prefix: str, fin: int, h: int) -> int:
        kind = self.arch.rnn_kind
        gates = 3 if kind == "gru" else 4
        bound = 1.0 / np.sqrt(h)
        dirs = ("fwd", "bwd") if kind == "bilstm" else ("",)
        for d in dirs:
            pre = f"{prefix}.{d}" if d else prefix
            self.params.add(f"{pre}.w_ih", uniform(rng, (gates * h, fin), bound))
            self.params.add(f"{pre}.w_hh", uniform(rng, (gates * h, h), bound))
            b = zeros(gates * h)
            if kind != "gru":
                b[h:2 * h] = 1.0  # forget-gate bias
            self.params.add(f"{pre}.b", b)
            if kind == "gru":
                self.params.add(f"{pre}.b_hh", zeros(gates * h))
        return h * len(dirs)

    def _build(self, rng: np.random.Generator) -> None:
        a, p = self.arch, self.params
        cin = 1
        for l, c in enumerate(a.cnn_features):
            p.add(f"enc.cnn.{l}.conv.weight", he_normal(rng, (c, cin, 3, 3, 3), cin * 27))
            self._bn(f"enc.cnn.{l}.bn", c)
            cin = c
        feat = self.cnn_flat
        if a.use_gnn:
            fin = 1
            for l, f in enumerate(a.gnn_features):
                p.add(f"enc.gnn.{l}.weight", he_normal(rng, (fin, f), fin))
                # positive start keeps units alive on the non-negative, RBX-averaged inputs
                p.add(f"enc.gnn.{l}.bias", zeros(f) + 0.1)
                fin = f
            p.add("enc.gnn.attn.weight", uniform(rng, (fin,), 1.0 / np.sqrt(fin)))
            feat += fin
        fin = feat
        for l, h in enumerate(a.lstm_sizes):
            if a.use_rnn:
                fin = self._rnn(rng, f"enc.rnn.{l}", fin, h)
            else:
                self._linear(rng, f"enc.fc.{l}", fin, h)
                fin = h
        self.zeta_dim = fin
        if a.use_vae:
            self._linear(rng, "enc.mu", fin, a.latent, gain=1.0)
            self._linear(rng, "enc.sigma", fin, a.latent, gain=1.0)
            zdim = a.latent
        else:
            zdim = fin
        fin = zdim
        for l, h in enumerate(reversed(a.lstm_sizes)):
            if a.use_rnn:
                fin = self._rnn(rng, f"dec.rnn.{l}", fin, h)
            else:
                self._linear(rng, f"dec.fc.{l}", fin, h)
                fin = h
        self._linear(rng, "dec.proj", fin, self.cnn_flat)
        feats = a.cnn_features
        for l in reversed(range(len(feats))):
            cout = feats[l - 1] if l > 0 else feats[0]
            p.add(f"dec.cnn.{l}.deconv.weight", he_normal(rng, (feats[l], cout, 3, 3, 3), feats[l] * 27))
            self._bn(f"dec.cnn.{l}.bn", cout)
        p.add("dec.out.weight", he_normal(rng, (feats[0], 1, 1, 1, 1), feats[0]) * 0.1)
        out_b = zeros(1)
        out_b[0] = a.output_bias
        p.add("dec.out.bias", out_b)

    # -- helpers --------------------------------------------------------------
    def _bn_apply(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        p = self.params
        return batchnorm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], p[f"{prefix}.running_mean"],
                         p[f"{prefix}.running_var"], training=training)

    def _rnn_apply(self, seq: Tensor, prefix: str) -> Tensor:
        p = self.params
        kind = self.arch.rnn_kind

        def group(pre):
            keys = ("w_ih", "w_hh", "b", "b_hh") if kind == "gru" else ("w_ih", "w_hh", "b")
            return {k: p[f"{pre}.{k}"] for k in keys}

        if kind == "lstm":
            return lstm_layer(seq, group(prefix))
        if kind == "gru":
            return gru_layer(seq, group(prefix))
        return bilstm_layer(seq, group(f"{prefix}.fwd"), group(f"{prefix}.bwd"))

    def _check_window(self, x: Tensor) -> tuple[int, int]:
        if x.ndim != 5 or tuple(x.shape[2:]) != self.geometry.shape:
            raise ContractError(f"expected window [B, T, {self.geometry.shape}], got {x.shape}")
        return x.shape[0], x.shape[1]

    # -- encoder --------------------------------------------------------------
    def encode_cnn(self, maps: Tensor, training: bool = False) -> tuple[Tensor, list[PoolIndices]]:
        """[N, D1, D2, D3] maps -> ([N, cnn_flat] features, pooling indices per pool)."""
        n = maps.shape[0]
        h = ops.reshape(maps, (n, 1) + tuple(maps.shape[1:]))
        indices = []
        for l, bounds in enumerate(self.plan.blocks):
            h = conv3d(h, self.params[f"enc.cnn.{l}.conv.weight"], None, padding=1)
            h = ops.relu(self._bn_apply(h, f"enc.cnn.{l}.bn", training))
            h, idx = maxpool3d_partition(h, bounds)
            indices.append(idx)
        if self.plan.align is not None:
            h, idx = maxpool3d_partition(h, self.plan.align)
            indices.append(idx)
        return ops.reshape(h, (n, -1)), indices

    def encode_gnn(self, maps: Tensor) -> Tensor:
        """[N, D1, D2, D3] maps -> [N, F] graph-level features."""
        h = self.graph.gather_tensor(maps)
        h = ops.reshape(h, h.shape + (1,))
        for l in range(len(self.arch.gnn_features)):
            h = ops.relu(gcn_layer(h, self.graph.adj, self.params[f"enc.gnn.{l}.weight"],
                                   self.params[f"enc.gnn.{l}.bias"]))
        return global_attention_pool(h, self.params["enc.gnn.attn.weight"])

    def encode(self, x: Tensor, training: bool = False, eps: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> tuple[LatentSample, list[PoolIndices]]:
        """Window [B, T, ...] -> latent sample and the CNN pooling indices.

        ``eps`` defaults to draws from ``rng`` when given, else zeros (z = mu).
        """
        B, T = self._check_window(x)
        a = self.arch
        maps = ops.reshape(x, (B * T,) + self.geometry.shape)
        feats, indices = self.encode_cnn(maps, training)
        if a.use_gnn:
            feats = ops.concat([feats, self.encode_gnn(maps)], axis=-1)
        if a.use_rnn:
            seq = ops.transpose(ops.reshape(feats, (B, T, -1)), (1, 0, 2))
            for l in range(len(a.lstm_sizes)):
                seq = self._rnn_apply(seq, f"enc.rnn.{l}")
            if a.rnn_kind == "bilstm":
                half = seq.shape[-1] // 2
                zeta = ops.concat([seq[T - 1][:, :half], seq[0][:, half:]], axis=-1)
            else:
                zeta = seq[T - 1]
        else:
            zeta = feats
            n_fc = len(a.lstm_sizes)
            for l in range(n_fc):
                zeta = ops.fc(zeta, self.params[f"enc.fc.{l}.weight"], self.params[f"enc.fc.{l}.bias"])
                if l < n_fc - 1:
                    zeta = ops.relu(zeta)
        if not a.use_vae:
            zero = np.zeros(zeta.shape, dtype=zeta.data.dtype)
            return LatentSample(zeta, Tensor(np.ones_like(zero)), zero, zeta), indices
        mu = ops.fc(zeta, self.params["enc.mu.weight"], self.params["enc.mu.bias"])
        sigma = ops.add(ops.softplus(ops.fc(zeta, self.params["enc.sigma.weight"],
                                            self.params["enc.sigma.bias"])), 1e-6)
        if eps is None:
            eps = (rng.standard_normal(mu.shape) if rng is not None else np.zeros(mu.shape))
        eps = np.asarray(eps, dtype=mu.data.dtype)
        z = ops.add(mu, ops.mul(sigma, eps))
        return LatentSample(mu, sigma, eps, z), indices

    # -- decoder --------------------------------------------------------------
    def decode(self, z: Tensor, indices: list[PoolIndices], batch: int, window: int,
               training: bool = False) -> Tensor:
        a = self.arch
        expected = len(self.plan.blocks) + (self.plan.align is not None)
        if len(indices) != expected:
            raise ContractError(f"decoder needs {expected} pooling index sets, got {len(indices)}")
        n = batch * window
        if a.use_rnn:
            seq = ops.stack([z] * window, axis=0)
            for l in range(len(a.lstm_sizes)):
                seq = self._rnn_apply(seq, f"dec.rnn.{l}")
            h = ops.reshape(ops.transpose(seq, (1, 0, 2)), (n, -1))
        else:
            h = z
            for l in range(len(a.lstm_sizes)):
                h = ops.relu(ops.fc(h, self.params[f"dec.fc.{l}.weight"], self.params[f"dec.fc.{l}.bias"]))
        h = ops.fc(h, self.params["dec.proj.weight"], self.params["dec.proj.bias"])
        h = ops.reshape(h, (n, a.cnn_features[-1]) + self.plan.bottleneck)
        pending = list(indices)
        if self.plan.align is not None:
            h = maxunpool3d(h, pending.pop())
        for l in reversed(range(len(a.cnn_features))):
            idx = pending.pop()
            if idx.output_shape != h.shape:
                raise ContractError(f"pooling indices {idx.output_shape} do not match decoder state {h.shape}")
            h = maxunpool3d(h, idx)
            h = deconv3d(h, self.params[f"dec.cnn.{l}.deconv.weight"], None, padding=1)
            h = ops.relu(self._bn_apply(h, f"dec.cnn.{l}.bn", training))
        h = deconv3d(h, self.params["dec.out.weight"], self.params["dec.out.bias"], padding=0)
        h = ops.relu(h)
        return ops.reshape(h, (batch, window) + self.geometry.shape)

    def forward(self, x: Tensor, training: bool = False, eps: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, LatentSample]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        B, T = self._check_window(x)
        if self.arch.use_rnn and T != self.arch.window:
            raise ContractError(f"model window is {self.arch.window}, got T={T}")
        latent, indices = self.encode(x, training, eps, rng)
        return self.decode(latent.z, indices, B, T, training), latent

    __call__ = forward

    # -- persistence ----------------------------------------------------------
    def save(self, directory: str | Path, metadata: dict | None = None) -> None:
        manifest = {
            "format": "graphstad-model/1",
            "arch": self.arch.to_dict(),
            "geometry": self.geometry.to_dict(),
            "geometry_hash": self.graph.digest,
            "seed": self.seed,
            "training": metadata or {},
        }
        save_params(self.params, directory, manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "GraphSTAD":
        manifest = load_manifest(directory)
        geometry = GeometryConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                     for k, v in manifest["geometry"].items()})
        model = cls(ArchConfig.from_dict(manifest["arch"]), geometry, seed=manifest.get("seed", 0))
        if model.graph.digest != manifest["geometry_hash"]:
            raise ContractError("checkpoint geometry hash does not match the rebuilt geometry")
        model.params.load_state(load_param_state(directory))
        return model
