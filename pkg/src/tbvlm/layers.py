"""Shared transformer building blocks over the tensor engine."""

from __future__ import annotations

import math
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def norm(x: Tensor, params: Mapping[str, Tensor], prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(xq: Tensor, xkv: Tensor, params: Mapping[str, Tensor], prefix: str,
              n_heads: int, mask: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention.

    xq: (B, Lq, d) queries source, xkv: (B, Lk, d_kv) keys/values source.
    mask: boolean, broadcastable to (B, heads, Lq, Lk); False blocks a key.
    Returns the projected output and the (B, heads, Lq, Lk) weights.
    """
    B, Lq, d = xq.shape
    q = _split_heads(linear(xq, params, f"{prefix}.q"), n_heads)
    k = _split_heads(linear(xkv, params, f"{prefix}.k"), n_heads)
    v = _split_heads(linear(xkv, params, f"{prefix}.v"), n_heads)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    probs = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, Lq, d))
    return linear(ctx, params, f"{prefix}.o"), probs.data


def feed_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{prefix}.up")), params, f"{prefix}.down")


def encoder_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, n_heads: int,
                  eps: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm self-attention block used by both encoders."""
    h = norm(x, params, f"{prefix}.ln1", eps)
    a, _ = attention(h, h, params, f"{prefix}.attn", n_heads, mask)
    x = T.add(x, a)
    return T.add(x, feed_forward(norm(x, params, f"{prefix}.ln2", eps), params, f"{prefix}.ffn"))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
