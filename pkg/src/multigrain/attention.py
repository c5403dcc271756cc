"""Scaled dot-product attention blocks and the position-wise feed-forward net.

These are the shared primitives both the encoder and the decoder build on:
multi-head cross/self attention with additive masking, the two-layer relu
feed-forward expansion, and the dropout + residual + layer-norm wrapper
applied after every sublayer.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ConfigError, MaskError
from .tensor import (
    MASK_FILL,
    ParamRegistry,
    Tensor,
    add,
    concat,
    const,
    dropout,
    layer_norm,
    layer_norm_core,
    matmul,
    mul,
    relu,
    scale,
    softmax_rows,
    transpose_last,
)


class ProbeLog:
    """Opt-in capture of intermediate arrays (attention weights, gates).

    Forward passes take ``probes=None`` by default and then retain
    nothing; passing a ProbeLog records named numpy snapshots.
    """

    def __init__(self):
        self.records: dict[str, list[np.ndarray]] = {}

    def add(self, key: str, value: np.ndarray) -> None:
        self.records.setdefault(key, []).append(np.array(value, copy=True))

    def get(self, key: str) -> list[np.ndarray]:
        return self.records.get(key, [])

    def keys(self):
        return self.records.keys()


def mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Turn a boolean visibility mask into an additive score bias.

    True means the key is visible. Every query row must keep at least
    one visible key, otherwise its softmax would be over an empty set.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise MaskError("attention mask blocks every key for some query row")
    bias = np.zeros(mask.shape, dtype=dtype)
    bias[~mask] = MASK_FILL
    return bias


def causal_bias(t: int, dtype) -> np.ndarray:
    """Additive bias hiding positions j > i from query i."""
    allowed = np.tril(np.ones((t, t), dtype=bool))
    return mask_bias(allowed, dtype)


class MultiHeadAttention:
    """Multi-head attention over separate query and key/value inputs.

    Each head projects queries and keys/values into a d/n_heads wide
    subspace, forms softmax(q k^T / sqrt(d_head)) v, and the concatenated
    head outputs pass through a final d x d projection. Projections carry
    no bias terms.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads != 0:
            raise ConfigError(f"model width {d} is not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.scale = 1.0 / math.sqrt(self.d_head)
        self.wq = [reg.glorot(f"{prefix}.wq{i}", d, self.d_head, rng) for i in range(n_heads)]
        self.wk = [reg.glorot(f"{prefix}.wk{i}", d, self.d_head, rng) for i in range(n_heads)]
        self.wv = [reg.glorot(f"{prefix}.wv{i}", d, self.d_head, rng) for i in range(n_heads)]
        self.wo = reg.glorot(f"{prefix}.wo", d, d, rng)

    def head(self, i: int, x: Tensor, y: Tensor, bias: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        """Single head forward; returns (context, attention weights)."""
        q = matmul(x, self.wq[i])
        k = matmul(y, self.wk[i])
        v = matmul(y, self.wv[i])
        scores = scale(matmul(q, transpose_last(k)), self.scale)
        if bias is not None:
            scores = add(scores, bias)
        weights = softmax_rows(scores)
        return matmul(weights, v), weights

    def __call__(self, x: Tensor, y: Tensor, mask: Optional[np.ndarray] = None,
                 probes: Optional[ProbeLog] = None, probe_key: str = "attn") -> Tensor:
        bias = None
        if mask is not None:
            if mask.dtype == bool:
                bias = const(mask_bias(mask, x.data.dtype), dtype=x.data.dtype)
            else:
                bias = const(np.asarray(mask, dtype=x.data.dtype), dtype=x.data.dtype)
        outs = []
        for i in range(self.n_heads):
            ctx, weights = self.head(i, x, y, bias)
            if probes is not None:
                probes.add(f"{probe_key}.h{i}", weights.data)
            outs.append(ctx)
        joined = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return matmul(joined, self.wo)


class FeedForward:
    """Position-wise feed-forward net: relu(x W + b) W' + b'.

    The hidden layer is four times the model width.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, rng: np.random.Generator):
        hidden = 4 * d
        self.w1 = reg.glorot(f"{prefix}.w1", d, hidden, rng)
        self.b1 = reg.zeros(f"{prefix}.b1", (hidden,))
        self.w2 = reg.glorot(f"{prefix}.w2", hidden, d, rng)
        self.b2 = reg.zeros(f"{prefix}.b2", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class Sublayer:
    """Residual wrapper: layer_norm(residual + dropout(sub_out)).

    The learned gain starts at one and the bias at zero, so a fresh
    wrapper is plain normalization of the residual sum.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int):
        self.gain = reg.ones(f"{prefix}.gain", (d,))
        self.bias = reg.zeros(f"{prefix}.bias", (d,))

    def __call__(self, residual: Tensor, sub_out: Tensor, keep_prob: float = 1.0,
                 train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = add(residual, dropout(sub_out, keep_prob, train, rng))
        return layer_norm(h, self.gain, self.bias)

    def normalize(self, x: Tensor) -> Tensor:
        """Affine layer norm without the residual/dropout part."""
        return layer_norm(x, self.gain, self.bias)
