"""Slow reference implementations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np


def conv3d_ref(x, w, b, padding):
    """Cross-correlation by explicit loops over output cells, kernel offsets and channels."""
    B, C, D1, D2, D3 = x.shape
    Co, _, k, _, _ = w.shape
    xp = np.zeros((B, C, D1 + 2 * padding, D2 + 2 * padding, D3 + 2 * padding))
    xp[:, :, padding:padding + D1, padding:padding + D2, padding:padding + D3] = x
    O = [d + 2 * padding - k + 1 for d in (D1, D2, D3)]
    out = np.zeros((B, Co, *O))
    for n, o, i, j, l in itertools.product(range(B), range(Co), range(O[0]), range(O[1]), range(O[2])):
        acc = 0.0 if b is None else float(b[o])
        for c, a, bb, cc in itertools.product(range(C), range(k), range(k), range(k)):
            acc += xp[n, c, i + a, j + bb, l + cc] * w[o, c, a, bb, cc]
        out[n, o, i, j, l] = acc
    return out


def deconv3d_ref(x, w, b, padding):
    """Transposed convolution as a scatter of every input cell through the kernel, then a crop."""
    B, Ci, D1, D2, D3 = x.shape
    _, Co, k, _, _ = w.shape
    full = np.zeros((B, Co, D1 + k - 1, D2 + k - 1, D3 + k - 1))
    for n, c, i, j, l in itertools.product(range(B), range(Ci), range(D1), range(D2), range(D3)):
        for o, a, bb, cc in itertools.product(range(Co), range(k), range(k), range(k)):
            full[n, o, i + a, j + bb, l + cc] += x[n, c, i, j, l] * w[c, o, a, bb, cc]
    p = padding
    out = full[:, :, p:full.shape[2] - p, p:full.shape[3] - p, p:full.shape[4] - p]
    if b is not None:
        out = out + np.asarray(b)[None, :, None, None, None]
    return out


def _windows(extent, size=2):
    return [(s, min(s + size, extent)) for s in range(0, extent, size)]


def maxpool3d_ref(x):
    """Stride-2 max pool with short tail windows; ties go to the first cell in C order."""
    B, C, D1, D2, D3 = x.shape
    W = [_windows(d) for d in (D1, D2, D3)]
    vals = np.zeros((B, C, len(W[0]), len(W[1]), len(W[2])))
    arg = np.zeros(vals.shape, dtype=np.int64)
    for n, c in itertools.product(range(B), range(C)):
        for (p, w1), (q, w2), (r, w3) in itertools.product(enumerate(W[0]), enumerate(W[1]), enumerate(W[2])):
            best, where = -np.inf, None
            for i, j, l in itertools.product(range(*w1), range(*w2), range(*w3)):
                if x[n, c, i, j, l] > best:
                    best, where = x[n, c, i, j, l], (i, j, l)
            vals[n, c, p, q, r] = best
            arg[n, c, p, q, r] = np.ravel_multi_index((n, c) + where, x.shape)
    return vals, arg


def maxunpool3d_ref(v, arg, shape):
    out = np.zeros(int(np.prod(shape)))
    for val, a in zip(v.ravel(), arg.ravel()):
        out[a] = val
    return out.reshape(shape)


def gcn_ref(h, A, w, b):
    """Dense D^{-1/2} (A + I) D^{-1/2} H W + b."""
    a_hat = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    out = (d[:, None] * a_hat * d[None, :]) @ h @ w
    return out if b is None else out + b


def clique_adjacency(groups):
    groups = np.asarray(groups)
    return (groups[:, None] == groups[None, :]).astype(float) - np.eye(len(groups))
