"""3-D convolution, transposed convolution, pooling with indices, and batch norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, Tensor


# ---------------------------------------------------------------------------
# convolution kernels on raw arrays
# ---------------------------------------------------------------------------

def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _conv_raw(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    xp = _pad3(x, padding)
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv_grad_weight(x: np.ndarray, g: np.ndarray, kshape, padding: int) -> np.ndarray:
    win = sliding_window_view(_pad3(x, padding), kshape, axis=(2, 3, 4))
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    k = w.shape[2]
    full = _conv_raw(g, _flip_swap(w), k - 1)
    if padding == 0:
        return full
    p = padding
    return np.ascontiguousarray(full[:, :, p:-p, p:-p, p:-p])


def _flip_swap(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, cin_axis: int, cout_axis: int, padding: int, op: str):
    if x.ndim != 5 or w.ndim != 5:
        raise ContractError(f"{op}: expected 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ContractError(f"{op}: input channels {x.shape[1]} != weight channels {w.shape[cin_axis]}")
    k = w.shape[2:]
    if len(set(k)) != 1:
        raise ContractError(f"{op}: only cubic kernels are supported, got {k}")
    if b is not None and b.shape != (w.shape[cout_axis],):
        raise ContractError(f"{op}: bias shape {b.shape} != ({w.shape[cout_axis]},)")
    if padding < 0 or any(d + 2 * padding < k[0] for d in x.shape[2:]):
        raise ContractError(f"{op}: kernel {k} does not fit input {x.shape[2:]} with padding {padding}")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [B,C,D1,D2,D3] with ``w`` [Co,C,k,k,k]."""
    if stride != 1:
        raise ContractError("conv3d: only stride 1 is supported")
    _check_conv(x, w, b, 1, 0, padding, "conv3d")
    out = _conv_raw(x.data, w.data, padding)
    if b is not None:
        out += b.data[None, :, None, None, None]
    xd, wd = x.data, w.data

    def bw(g):
        gx = _conv_grad_input(g, wd, padding) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, wd.shape[2:], padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bw, "conv3d")


def deconv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1, stride: int = 1) -> Tensor:
    """Transposed convolution with ``w`` shaped [Ci,Co,k,k,k].

    Equals the input-gradient of ``conv3d`` with the same weight and padding,
    so ``<conv3d(x, w), y> == <x, deconv3d(y, w)>``.
    """
    if stride != 1:
        raise ContractError("deconv3d: only stride 1 is supported")
    k = w.shape[2] if w.ndim == 5 else 0
    if not 0 <= padding <= k - 1:
        raise ContractError(f"deconv3d: padding {padding} must lie in [0, kernel size - 1]")
    pad_eq = k - 1 - padding
    _check_conv(x, w, b, 0, 1, pad_eq, "deconv3d")
    wc = _flip_swap(w.data)
    out = _conv_raw(x.data, wc, pad_eq)
    if b is not None:
        out += b.data[None, :, None, None, None]
    xd = x.data

    def bw(g):
        gx = _conv_grad_input(g, wc, pad_eq) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = _flip_swap(_conv_grad_weight(xd, g, wc.shape[2:], pad_eq))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bw, "deconv3d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions of a max pool, as flat indices into the unpooled tensor."""

    input_shape: tuple[int, ...]
    argmax: np.ndarray

    @property
    def output_shape(self) -> tuple[int, ...]:
        return tuple(self.argmax.shape)


def tail_partition(extent: int, window: int = 2) -> list[int]:
    """Window boundaries of size ``window``; the last window takes the remainder."""
    if extent < 1:
        raise ContractError(f"cannot pool an axis of extent {extent}")
    bounds = list(range(0, extent, window))
    bounds.append(extent)
    return bounds


def even_partition(extent: int, bins: int) -> list[int]:
    """``bins`` contiguous non-empty windows covering ``extent``."""
    if not 1 <= bins <= extent:
        raise ContractError(f"cannot split extent {extent} into {bins} windows")
    return [(i * extent) // bins for i in range(bins + 1)]


def pooled_extent(extent: int, window: int = 2) -> int:
    return len(tail_partition(extent, window)) - 1


def maxpool3d_partition(x: Tensor, bounds: Sequence[Sequence[int]]) -> tuple[Tensor, PoolIndices]:
    """Max over the windows given by per-axis boundary lists; lowest flat index wins ties."""
    if x.ndim != 5 or len(bounds) != 3:
        raise ContractError(f"maxpool3d expects a 5-D input, got {x.shape}")
    B, C, D1, D2, D3 = x.shape
    gathers = []
    for extent, bnd in zip((D1, D2, D3), bounds):
        bnd = np.asarray(bnd)
        if bnd[0] != 0 or bnd[-1] != extent or np.any(np.diff(bnd) < 1):
            raise ContractError(f"invalid pooling boundaries {bnd.tolist()} for extent {extent}")
        starts, widths = bnd[:-1], np.diff(bnd)
        wmax = int(widths.max())
        idx = starts[:, None] + np.arange(wmax)[None, :]
        idx = np.where(np.arange(wmax)[None, :] < widths[:, None], idx, extent)
        gathers.append(idx)
    i1, i2, i3 = gathers
    n1, w1 = i1.shape
    n2, w2 = i2.shape
    n3, w3 = i3.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1), (0, 1)), constant_values=-np.inf)
    win = xp[:, :, i1[:, :, None, None, None, None], i2[None, None, :, :, None, None],
             i3[None, None, None, None, :, :]]
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, n1, n2, n3, w1 * w2 * w3)
    local = win.argmax(axis=-1)
    values = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    k1, rem = np.divmod(local, w2 * w3)
    k2, k3 = np.divmod(rem, w3)
    o1 = np.arange(n1)[:, None, None]
    o2 = np.arange(n2)[None, :, None]
    o3 = np.arange(n3)[None, None, :]
    c1, c2, c3 = i1[o1, k1], i2[o2, k2], i3[o3, k3]
    plane = (np.arange(B)[:, None, None, None, None] * C + np.arange(C)[None, :, None, None, None])
    flat = ((plane * D1 + c1) * D2 + c2) * D3 + c3
    indices = PoolIndices(tuple(x.shape), flat.astype(np.int64))
    size = x.size
    dtype = x.data.dtype

    def bw(g):
        out = np.zeros(size, dtype=dtype)
        out[flat.ravel()] = g.ravel()
        return (out.reshape(indices.input_shape),)

    return Tensor.from_op(np.ascontiguousarray(values), (x,), bw, "maxpool3d"), indices


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> tuple[Tensor, PoolIndices]:
    """Non-overlapping max pool; axes of extent 1 pass through, odd tails get a short window."""
    if window != stride:
        raise ContractError("maxpool3d: only window == stride is supported")
    if x.ndim != 5:
        raise ContractError(f"maxpool3d expects a 5-D input, got {x.shape}")
    return maxpool3d_partition(x, [tail_partition(d, window) for d in x.shape[2:]])


def maxunpool3d(x: Tensor, indices: PoolIndices) -> Tensor:
    """Scatter ``x`` back to the argmax positions recorded by a max pool; zeros elsewhere."""
    if x.shape != indices.output_shape:
        raise ContractError(f"maxunpool3d: input {x.shape} != pooled shape {indices.output_shape}")
    size = int(np.prod(indices.input_shape))
    flat = indices.argmax.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= size):
        raise ContractError("maxunpool3d: index out of range")
    out = np.zeros(size, dtype=x.data.dtype)
    out[flat] = x.data.ravel()
    shape = x.shape

    def bw(g):
        return (g.ravel()[flat].reshape(shape),)

    return Tensor.from_op(out.reshape(indices.input_shape), (x,), bw, "maxunpool3d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the batch statistics are used and the running statistics
    are updated in place (unbiased variance).
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ContractError(f"batchnorm: channel axis of {x.shape} does not match {gamma.shape}")
    if x.shape[0] == 0:
        raise ContractError("batchnorm: zero-size batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    n = x.size // x.shape[1]
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * (n / max(n - 1, 1))
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (dxhat - s1 / n - xhat * s2 / n) * inv_std.reshape(bshape)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), bw, "batchnorm")
