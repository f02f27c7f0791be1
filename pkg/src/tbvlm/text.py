"""Word-level clinical-note tokenizer and the bidirectional text encoder."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import encoder_block, norm
from .params import check_params
from .tensor import ContractError, Tensor

PAD, BOS, EOS, MASK, SEP, UNK = 0, 1, 2, 3, 4, 5
RESERVED = ("[pad]", "[bos]", "[eos]", "[mask]", "[sep]", "[unk]")
N_RESERVED = len(RESERVED)
SEP_TEXT = "[sep]"

_TOKEN_RE = re.compile(r"\[sep\]|\w+|[^\w\s]")


def words(text: str) -> list[str]:
    """Lowercased word and punctuation tokens; ``[sep]`` stays one token."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(words(text))


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(RESERVED) + list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique and distinct from reserved tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def save(self, path: str | Path) -> None:
        body = "".join(tok + "\n" for tok in self.tokens[N_RESERVED:])
        Path(path).write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    docs = list(corpus)
    if not docs:
        raise ValueError("build_vocab: corpus is empty")
    if max_size < N_RESERVED:
        raise ValueError(f"build_vocab: max_size {max_size} cannot hold {N_RESERVED} reserved tokens")
    counts = Counter(w for doc in docs for w in words(doc) if w not in RESERVED)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ranked[: max_size - N_RESERVED])


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray  # 1 = real token, 0 = padding

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def encode_words(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in words(text)]


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    body = encode_words(text, vocab)[: max_len - 2]
    return from_ids([BOS] + body + [EOS], max_len)


def from_ids(ids: Sequence[int], max_len: int) -> TokenSequence:
    n = len(ids)
    arr = np.full(max_len, PAD, dtype=np.int64)
    arr[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return TokenSequence(arr, mask)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        # ids past the vocabulary (model width > corpus size) read as unknown
        out.append(vocab.token(i) if i < len(vocab) else vocab.token(UNK))
    return " ".join(out)


def batch_sequences(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences, trimming shared trailing padding."""
    n = max(s.n_real for s in seqs)
    return (np.stack([s.ids[:n] for s in seqs]), np.stack([s.mask[:n] for s in seqs]))


def encode_tokens(ids: np.ndarray, mask: np.ndarray, params: Mapping[str, Tensor],
                  cfg: ModelConfig) -> Tensor:
    """(B, L) ids with (B, L) attention mask -> (B, L, d_text)."""
    L = ids.shape[-1]
    if L > cfg.max_text_len:
        raise ContractError(f"text of length {L} exceeds max_text_len {cfg.max_text_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id outside vocabulary of size {cfg.vocab_size}")
    x = T.add(T.take(params["text.tok"], ids, axis=0), T.take(params["text.pos"], np.arange(L), axis=0))
    key_mask = mask.astype(bool)[:, None, None, :]
    for i in range(cfg.text_layers):
        x = encoder_block(x, params, f"text.blocks.{i}", cfg.text_heads, cfg.ln_eps, key_mask)
    return norm(x, params, "text.ln_f", cfg.ln_eps)


def encode_text(seq: TokenSequence, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Contextual embeddings (seq_len, d_text); padded positions are never attended."""
    check_params(params, cfg)
    out = encode_tokens(np.asarray(seq.ids)[None], np.asarray(seq.mask)[None], params, cfg)
    return T.reshape(out, out.shape[1:])
