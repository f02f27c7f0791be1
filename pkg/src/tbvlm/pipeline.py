"""End-to-end inference helpers shared by the CLI and tests."""

from __future__ import annotations

import time
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import DecoderState, DiagnosticReport, decode_step, generate_report
from .fusion import FusedEmbeddings, fuse
from .params import LazyParams
from .tensor import Tensor
from .text import TokenSequence, Vocabulary, tokenize, encode_text
from .vision import ImageGrid, encode_image


def fuse_inputs(img: ImageGrid, note: str, params: Mapping[str, Tensor], cfg: ModelConfig,
                vocab: Vocabulary) -> FusedEmbeddings:
    """Encode image and note (trimmed to its real tokens) and fuse them."""
    seq = tokenize(note, vocab, cfg.max_text_len)
    n = seq.n_real
    seq = TokenSequence(seq.ids[:n], seq.mask[:n])
    with T.no_grad():
        vis = encode_image(img, params, cfg)
        txt = encode_text(seq, params, cfg)
        return fuse(txt, vis, params, cfg, seq.mask)


def describe(img: ImageGrid, note: str, params, cfg: ModelConfig, vocab: Vocabulary,
             mode: str = "greedy", beam_size: int = 1) -> tuple[DiagnosticReport, FusedEmbeddings]:
    fused = fuse_inputs(img, note, params, cfg, vocab)
    return generate_report(fused, params, cfg, mode, beam_size, vocab), fused


def paper_shape_forward(cfg: ModelConfig, seed: int = 0, text_len: int = 32) -> dict:
    """One untrained forward pass with lazily materialised parameters.

    Returns the shapes of every stage's output plus timing.
    """
    params = LazyParams(cfg, seed)
    rng = np.random.default_rng(seed)
    img = ImageGrid(rng.random((cfg.image_size, cfg.image_size)))
    ids = np.concatenate([[1], rng.integers(6, cfg.vocab_size, size=text_len - 2), [2]])
    seq = TokenSequence(ids, np.ones(text_len, dtype=np.int64))
    t0 = time.perf_counter()
    with T.no_grad():
        vis = encode_image(img, params, cfg)
        txt = encode_text(seq, params, cfg)
        fused = fuse(txt, vis, params, cfg)
        logits = decode_step(DecoderState(), fused, params, cfg)
    return {
        "visual": vis.shape, "text": txt.shape, "fused": fused.embeddings.shape,
        "decoder_logits": logits.shape, "decoder_hidden": cfg.d_decoder,
        "decoder_layers": cfg.decoder_layers, "finite": bool(np.isfinite(logits).all()
                                                             and np.isfinite(vis.data).all()),
        "seconds": time.perf_counter() - t0,
    }
