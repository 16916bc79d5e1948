"""Minimal dense tensor library with reverse-mode differentiation."""

from . import ops
from .graph import NormalizedAdjacency, gcn_layer, global_attention_pool
from .nn import (PoolIndices, batchnorm, conv3d, deconv3d, even_partition, maxpool3d,
                 maxpool3d_partition, maxunpool3d, pooled_extent, tail_partition)
from .ops import fc, relu, sigmoid, softmax, softplus, tanh
from .params import ParamSet
from .recurrent import bilstm_layer, gru_layer, lstm_cell, lstm_layer
from .tensor import (ContractError, NonFiniteError, Tensor, as_tensor, backward, default_dtype,
                     no_grad, set_default_dtype, verification_mode)

__all__ = [
    "ContractError", "NonFiniteError", "NormalizedAdjacency", "ParamSet", "PoolIndices", "Tensor",
    "as_tensor", "backward", "batchnorm", "bilstm_layer", "conv3d", "deconv3d", "default_dtype",
    "even_partition", "fc", "gcn_layer", "global_attention_pool", "gru_layer", "lstm_cell",
    "lstm_layer", "maxpool3d", "maxpool3d_partition", "maxunpool3d", "no_grad", "ops",
    "pooled_extent", "relu", "set_default_dtype", "sigmoid", "softmax", "softplus", "tail_partition",
    "tanh", "verification_mode",
]
