"""Graph convolution with a symmetric-normalized adjacency, and attention pooling."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import ops
from .tensor import ContractError, Tensor


class NormalizedAdjacency:
    """Propagation matrix ``D^{-1/2} (A + I) D^{-1/2}`` for a binary adjacency ``A``.

    When ``groups`` is given the graph must be a disjoint union of cliques
    (one per group label); propagation then reduces to a per-group mean,
    which is what the normalized matrix computes on such graphs.
    """

    def __init__(self, adjacency, groups: np.ndarray | None = None):
        a = sp.csr_matrix(adjacency, dtype=np.float64)
        if a.shape[0] != a.shape[1]:
            raise ContractError(f"adjacency must be square, got {a.shape}")
        self.size = a.shape[0]
        a_hat = a + sp.identity(self.size, format="csr")
        deg = np.asarray(a_hat.sum(axis=1)).ravel()
        dinv = sp.diags(1.0 / np.sqrt(deg))
        self.matrix = (dinv @ a_hat @ dinv).tocsr()
        self._members = None
        self._inv_count = None
        if groups is not None:
            groups = np.asarray(groups)
            labels, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
            coo = a.tocoo()
            same = inverse[coo.row] == inverse[coo.col]
            if not same.all() or coo.nnz != int((counts * (counts - 1)).sum()):
                raise ContractError("adjacency is not a disjoint union of cliques over the given groups")
            s = sp.csr_matrix((np.ones(self.size), (inverse, np.arange(self.size))),
                              shape=(len(labels), self.size))
            self._members = s
            self._inv_count = 1.0 / counts

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Left-multiply along the node axis (second to last) of ``x``."""
        if x.shape[-2] != self.size:
            raise ContractError(f"node axis {x.shape[-2]} != adjacency size {self.size}")
        moved = np.moveaxis(x, -2, 0)
        flat = moved.reshape(self.size, -1)
        if self._members is not None:
            means = (self._members @ flat) * self._inv_count[:, None]
            res = self._members.T @ means
        else:
            res = self.matrix @ flat
        return np.moveaxis(res.astype(x.dtype).reshape(moved.shape), 0, -2)


def gcn_layer(h: Tensor, adj: NormalizedAdjacency, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Linear graph convolution ``adj · h · w + b``; the caller applies any activation.

    ``h`` is [..., M, F], ``w`` is [F, F'].
    """
    if w.ndim != 2 or h.shape[-1] != w.shape[0]:
        raise ContractError(f"gcn_layer: features {h.shape} incompatible with weight {w.shape}")
    if h.shape[-2] != adj.size:
        raise ContractError(f"gcn_layer: {h.shape[-2]} nodes but adjacency is {adj.size}x{adj.size}")
    hw = ops.matmul(h, w)
    prop = Tensor.from_op(adj.apply(hw.data), (hw,), lambda g: (adj.apply(g),), "gcn_propagate")
    return prop if b is None else ops.add(prop, b)


def global_attention_pool(h: Tensor, w_gate: Tensor) -> Tensor:
    """Softmax-over-nodes weighted sum of node features; [..., M, F] -> [..., F].

    The gate score of node m is ``h_m · w_gate``. A gate bias is omitted since
    the node-axis softmax is invariant to it.
    """
    if h.shape[-1] != w_gate.shape[0]:
        raise ContractError(f"attention gate {w_gate.shape} does not match features {h.shape}")
    scores = ops.matmul(h, ops.reshape(w_gate, (-1, 1)))
    gate = ops.softmax(scores, axis=-2)
    return ops.sum(ops.mul(h, gate), axis=-2)
