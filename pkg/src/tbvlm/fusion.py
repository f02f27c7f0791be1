"""Cross-modal fusion: the text stream queries visual patch embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import attention, feed_forward, norm
from .params import check_params
from .tensor import ShapeError, Tensor


@dataclass
class FusedEmbeddings:
    embeddings: Tensor  # (text_len, d_fused), or (B, text_len, d_fused) when batched
    text_mask: np.ndarray
    attention: list = field(default_factory=list)  # per layer: (heads, text_len, n_patches)


def fuse_batch(text: Tensor, vision: Tensor, text_mask: np.ndarray, params: Mapping[str, Tensor],
               cfg: ModelConfig) -> tuple[Tensor, list[np.ndarray]]:
    """(B, L, d) text x (B, N, d) vision -> fused (B, L, d) and per-layer maps (B, h, L, N)."""
    if text.shape[-1] != cfg.d_fused or vision.shape[-1] != cfg.d_fused:
        raise ShapeError(f"fusion needs width {cfg.d_fused} on both inputs, got text {text.shape} "
                         f"and vision {vision.shape} (no input projection exists)")
    keep = text_mask.astype(np.float64)[..., None]
    x = text
    maps = []
    for i in range(cfg.fusion_layers):
        p = f"fusion.blocks.{i}"
        a, probs = attention(norm(x, params, f"{p}.ln1", cfg.ln_eps), vision, params,
                             f"{p}.xattn", cfg.fusion_heads)
        x = T.add(x, T.mul(a, keep))
        f = feed_forward(norm(x, params, f"{p}.ln2", cfg.ln_eps), params, f"{p}.ffn")
        x = T.add(x, T.mul(f, keep))
        maps.append(probs)
    return norm(x, params, "fusion.ln_f", cfg.ln_eps), maps


def fuse(text: Tensor, vision: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
         text_mask: Optional[np.ndarray] = None) -> FusedEmbeddings:
    """Fuse one note's embeddings (L, d) with one image's embeddings (N, d).

    Padded text rows (mask 0) are carried through without attending.
    """
    check_params(params, cfg)
    if text_mask is None:
        text_mask = np.ones(text.shape[0], dtype=np.int64)
    out, maps = fuse_batch(T.reshape(text, (1, *text.shape)), T.reshape(vision, (1, *vision.shape)),
                           np.asarray(text_mask)[None], params, cfg)
    return FusedEmbeddings(T.reshape(out, out.shape[1:]), np.asarray(text_mask), [m[0] for m in maps])


def export_attention_csv(fused: FusedEmbeddings, path: str | Path) -> int:
    """Write (layer, head, text_pos, patch, weight) rows; returns the row count."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "text_pos", "patch", "weight"])
        for layer, m in enumerate(fused.attention):
            heads, L, N = m.shape
            for h in range(heads):
                for t in range(L):
                    for p in range(N):
                        w.writerow([layer, h, t, p, repr(float(m[h, t, p]))])
                        rows += 1
    return rows
