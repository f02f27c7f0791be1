"""Causal report decoder with cross-attention to fused embeddings, and generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .fusion import FusedEmbeddings
from .layers import attention, causal_mask, feed_forward, linear, norm
from .params import check_params, count_parameters  # noqa: F401  (re-exported)
from .tensor import ContractError, Tensor
from .text import BOS, EOS, Vocabulary, detokenize


def bridge(fused: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Project fused embeddings to decoder width (applied once per input)."""
    return linear(fused, params, "decoder.bridge")


def decoder_forward(ids: np.ndarray, memory: Tensor, memory_mask: np.ndarray,
                    params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Teacher-forced pass: (B, S) ids over bridged memory (B|1, L, d_dec) -> (B, S, V) logits."""
    S = ids.shape[-1]
    if S > cfg.max_report_len:
        raise ContractError(f"decoder input of length {S} exceeds max_report_len {cfg.max_report_len}")
    x = T.add(T.take(params["decoder.tok"], ids, axis=0), T.take(params["decoder.pos"], np.arange(S), axis=0))
    self_mask = causal_mask(S)
    mem_mask = memory_mask.astype(bool)[:, None, None, :]
    for i in range(cfg.decoder_layers):
        p = f"decoder.blocks.{i}"
        h = norm(x, params, f"{p}.ln1", cfg.ln_eps)
        a, _ = attention(h, h, params, f"{p}.attn", cfg.decoder_heads, self_mask)
        x = T.add(x, a)
        c, _ = attention(norm(x, params, f"{p}.ln2", cfg.ln_eps), memory, params, f"{p}.xattn",
                         cfg.decoder_heads, mem_mask)
        x = T.add(x, c)
        x = T.add(x, feed_forward(norm(x, params, f"{p}.ln3", cfg.ln_eps), params, f"{p}.ffn"))
    return linear(norm(x, params, "decoder.ln_f", cfg.ln_eps), params, "decoder.out")


@dataclass
class DecoderState:
    ids: list = field(default_factory=lambda: [BOS])
    step: int = 0
    cache: Optional[dict] = None  # unused; full prefix is recomputed each step


@dataclass
class DiagnosticReport:
    ids: list
    text: str
    logprobs: list

    @property
    def score(self) -> float:
        return float(sum(self.logprobs))

    def to_json(self) -> dict:
        return {"ids": [int(i) for i in self.ids], "text": self.text,
                "logprobs": [float(v) for v in self.logprobs]}


def _memory(fused: FusedEmbeddings, params) -> tuple[Tensor, np.ndarray]:
    emb = fused.embeddings
    mask = np.asarray(fused.text_mask)
    if emb.ndim == 2:
        emb = T.reshape(emb, (1, *emb.shape))
        mask = mask[None]
    with T.no_grad():
        return bridge(emb, params), mask


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def decode_step(state: DecoderState, fused: FusedEmbeddings, params: Mapping[str, Tensor],
                cfg: ModelConfig, _memory_cache=None) -> np.ndarray:
    """Logits (vocab_size,) for the token following ``state.ids``."""
    if not state.ids or state.ids[0] != BOS:
        raise ContractError("decoder state must start with BOS")
    if len(state.ids) > cfg.max_report_len:
        raise ContractError(f"decoder state of length {len(state.ids)} exceeds max_report_len "
                            f"{cfg.max_report_len}")
    memory, mask = _memory_cache if _memory_cache is not None else _memory(fused, params)
    with T.no_grad():
        logits = decoder_forward(np.asarray(state.ids)[None], memory, mask, params, cfg)
    return logits.data[0, -1]


def _greedy(memory, params, cfg) -> tuple[list, list]:
    ids, lps = [BOS], []
    while len(ids) < cfg.max_report_len:
        lp = _log_softmax(decode_step(DecoderState(ids), None, params, cfg, memory))
        nxt = int(np.argmax(lp))  # first maximum -> lowest id on ties
        ids.append(nxt)
        lps.append(float(lp[nxt]))
        if nxt == EOS:
            break
    return ids, lps


def _beam(memory, params, cfg, k: int) -> tuple[list, list]:
    beams = [(0.0, [BOS], [])]  # (score, ids, logprobs)
    done = []
    while beams:
        S = len(beams[0][1])
        if S >= cfg.max_report_len:
            done.extend(beams)
            break
        with T.no_grad():
            logits = decoder_forward(np.array([b[1] for b in beams]), memory[0], memory[1],
                                     params, cfg).data[:, -1]
        lp = _log_softmax(logits)
        cands = list(done)
        for (score, ids, lps), row in zip(beams, lp):
            order = np.lexsort((np.arange(len(row)), -row))[:k]
            for tok in order:
                tok = int(tok)
                cands.append((score + float(row[tok]), ids + [tok], lps + [float(row[tok])]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        kept = cands[:k]
        done = [c for c in kept if c[1][-1] == EOS]
        beams = [c for c in kept if c[1][-1] != EOS]
        if not beams:
            break
    pool = done if done else beams
    pool.sort(key=lambda c: (-c[0], c[1]))
    return pool[0][1], pool[0][2]


def generate_report(fused: FusedEmbeddings, params: Mapping[str, Tensor], cfg: ModelConfig,
                    mode: str = "greedy", beam_size: int = 1,
                    vocab: Optional[Vocabulary] = None) -> DiagnosticReport:
    """Decode a report greedily or with beam search.

    Beam search also scores the greedy hypothesis and returns whichever is
    better, so its result never scores below greedy.
    """
    if mode not in ("greedy", "beam"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "beam" and beam_size < 1:
        raise ValueError(f"beam size must be >= 1, got {beam_size}")
    check_params(params, cfg)
    memory = _memory(fused, params)
    ids, lps = _greedy(memory, params, cfg)
    if mode == "beam":
        b_ids, b_lps = _beam(memory, params, cfg, beam_size)
        if (-sum(b_lps), b_ids) < (-sum(lps), ids):
            ids, lps = b_ids, b_lps
    text = detokenize(ids, vocab) if vocab is not None else ""
    return DiagnosticReport(ids, text, lps)
