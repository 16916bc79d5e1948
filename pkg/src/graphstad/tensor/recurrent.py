"""LSTM and GRU layers composed from differentiable primitives.

Gate layout follows the usual convention: LSTM rows of ``w_ih``/``w_hh`` are
stacked as (input, forget, cell, output), GRU rows as (reset, update, new).
Initial states are zero.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ops
from .tensor import ContractError, Tensor


def _zeros(batch: int, hidden: int, like: Tensor) -> Tensor:
    return Tensor(np.zeros((batch, hidden), dtype=like.data.dtype), dtype=like.data.dtype)


def _check(seq: Tensor, w_ih: Tensor, gates: int) -> tuple[int, int, int, int]:
    if seq.ndim != 3:
        raise ContractError(f"recurrent layer expects [T,B,F], got {seq.shape}")
    T, B, F = seq.shape
    if T < 1:
        raise ContractError("recurrent layer needs T >= 1")
    if w_ih.shape[1] != F or w_ih.shape[0] % gates:
        raise ContractError(f"input weight {w_ih.shape} incompatible with features {F}")
    return T, B, F, w_ih.shape[0] // gates


def lstm_cell(x_proj: Tensor, h: Tensor, c: Tensor, w_hh: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    """One step given the precomputed input projection ``x W_ih^T + b``."""
    gates = ops.add(x_proj, ops.matmul(h, ops.transpose(w_hh)))
    i = ops.sigmoid(gates[:, :hidden])
    f = ops.sigmoid(gates[:, hidden:2 * hidden])
    g = ops.tanh(gates[:, 2 * hidden:3 * hidden])
    o = ops.sigmoid(gates[:, 3 * hidden:])
    c = ops.add(ops.mul(f, c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, c


def lstm_layer(seq: Tensor, params: Mapping[str, Tensor], reverse: bool = False) -> Tensor:
    """Run an LSTM over ``seq`` [T,B,F]; returns every hidden state [T,B,H]."""
    w_ih, w_hh, b = params["w_ih"], params["w_hh"], params["b"]
    T, B, _, H = _check(seq, w_ih, 4)
    proj = ops.add(ops.matmul(seq, ops.transpose(w_ih)), b)
    h, c = _zeros(B, H, seq), _zeros(B, H, seq)
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h, c = lstm_cell(proj[t], h, c, w_hh, H)
        outs[t] = h
    return ops.stack(outs, axis=0)


def gru_layer(seq: Tensor, params: Mapping[str, Tensor], reverse: bool = False) -> Tensor:
    """Run a GRU over ``seq`` [T,B,F]; returns every hidden state [T,B,H].

    ``params`` holds ``w_ih`` [3H,F], ``w_hh`` [3H,H], ``b`` [3H] (input side)
    and ``b_hh`` [3H] (hidden side, needed for the reset-gated candidate).
    """
    w_ih, w_hh, b, b_hh = params["w_ih"], params["w_hh"], params["b"], params["b_hh"]
    T, B, _, H = _check(seq, w_ih, 3)
    proj = ops.add(ops.matmul(seq, ops.transpose(w_ih)), b)
    h = _zeros(B, H, seq)
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        xp = proj[t]
        hp = ops.add(ops.matmul(h, ops.transpose(w_hh)), b_hh)
        r = ops.sigmoid(ops.add(xp[:, :H], hp[:, :H]))
        z = ops.sigmoid(ops.add(xp[:, H:2 * H], hp[:, H:2 * H]))
        n = ops.tanh(ops.add(xp[:, 2 * H:], ops.mul(r, hp[:, 2 * H:])))
        h = ops.add(n, ops.mul(z, ops.sub(h, n)))
        outs[t] = h
    return ops.stack(outs, axis=0)


def bilstm_layer(seq: Tensor, fwd: Mapping[str, Tensor], bwd: Mapping[str, Tensor]) -> Tensor:
    """Forward and time-reversed LSTMs concatenated on the feature axis: [T,B,2H]."""
    return ops.concat([lstm_layer(seq, fwd), lstm_layer(seq, bwd, reverse=True)], axis=-1)
