"""Pretraining (MIM, MLM) and fine-tuning (captioning, VQA, detection) objectives,
the Adam optimizer, and the deterministic stage trainer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .decoder import bridge, decoder_forward
from .fusion import fuse_batch
from .layers import linear
from .params import check_params, init_params
from .synth import PATHOLOGIES, AnnotationRecord, question_answer, template_corpus
from .tensor import ContractError, Tensor
from .text import (BOS, EOS, MASK, PAD, SEP, SEP_TEXT, TokenSequence, Vocabulary, batch_sequences,
                   build_vocab, encode_tokens, tokenize)
from .vision import ImageGrid, encode_patches, patchify_array

log = logging.getLogger(__name__)

IGNORE = -100


class TrainingDiverged(RuntimeError):
    pass


# -- mask plans ------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    indices: tuple
    total: int
    ratio: float
    seed: int

    def __len__(self) -> int:
        return len(self.indices)


def mask_count(total: int, ratio: float) -> int:
    if ratio <= 0 or total <= 0:
        return 0
    return min(total, max(1, int(math.floor(ratio * total + 0.5))))


def make_mask_plan(total: int, ratio: float, seed: int, candidates: Optional[Sequence[int]] = None) -> MaskPlan:
    """Sorted random subset of ``candidates`` (default: all of range(total))."""
    pool = np.arange(total) if candidates is None else np.asarray(candidates, dtype=np.int64)
    count = mask_count(len(pool), ratio)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=count, replace=False) if count else np.array([], dtype=np.int64)
    return MaskPlan(tuple(int(i) for i in np.sort(chosen)), total, ratio, seed)


def maskable_positions(seq: TokenSequence) -> list[int]:
    return [i for i, (t, m) in enumerate(zip(seq.ids, seq.mask))
            if m and int(t) not in (PAD, BOS, EOS, SEP)]


def mlm_plan(seq: TokenSequence, ratio: float, seed: int) -> MaskPlan:
    return make_mask_plan(len(seq.ids), ratio, seed, maskable_positions(seq))


# -- pretraining losses ----------------------------------------------------


def _mim_batch(patches: np.ndarray, plans: Sequence[MaskPlan], params, cfg: ModelConfig,
               target: Optional[Tensor] = None) -> Tensor:
    B, N, D = patches.shape
    if any(len(p) == 0 for p in plans):
        raise ContractError("MIM loss needs at least one masked patch per image")
    mask = np.zeros((B, N), dtype=bool)
    rows = []
    for b, plan in enumerate(plans):
        if max(plan.indices) >= N:
            raise ContractError(f"mask index {max(plan.indices)} outside a grid of {N} patches")
        mask[b, list(plan.indices)] = True
        rows += [b * N + i for i in plan.indices]
    enc = encode_patches(patches, params, cfg, mask)
    pred = linear(T.take(T.reshape(enc, (B * N, enc.shape[-1])), rows), params, "mim.head")
    tgt = T.as_tensor(patches) if target is None else target
    return T.mse(pred, T.take(T.reshape(tgt, (B * N, D)), rows))


def mim_loss(img: ImageGrid, plan: MaskPlan, params, cfg: ModelConfig,
             target: Optional[Tensor] = None) -> Tensor:
    """Mean squared pixel error of the reconstruction head over masked patches only.

    ``target`` overrides the (N, P*P) reconstruction target, which otherwise
    is the image's own patches.
    """
    patches = patchify_array(img.pixels, cfg.patch_size)[None]
    if target is not None:
        target = T.reshape(target, (1, *target.shape))
    return _mim_batch(patches, [plan], params, cfg, target)


def _mlm_batch(ids: np.ndarray, attn: np.ndarray, plans: Sequence[MaskPlan], params,
               cfg: ModelConfig) -> Tensor:
    B, L = ids.shape
    masked = ids.copy()
    rows, targets = [], []
    for b, plan in enumerate(plans):
        if len(plan) == 0:
            raise ContractError("MLM loss needs at least one maskable token per note")
        for i in plan.indices:
            if not attn[b, i] or ids[b, i] in (PAD, BOS, EOS):
                raise ContractError(f"position {i} is not a maskable real token")
            masked[b, i] = MASK
            rows.append(b * L + i)
            targets.append(int(ids[b, i]))
    enc = encode_tokens(masked, attn, params, cfg)
    h = T.take(T.reshape(enc, (B * L, enc.shape[-1])), rows)
    return T.cross_entropy(linear(h, params, "mlm.head"), targets)


def mlm_loss(seq: TokenSequence, plan: MaskPlan, params, cfg: ModelConfig) -> Tensor:
    return _mlm_batch(np.asarray(seq.ids)[None], np.asarray(seq.mask)[None], [plan], params, cfg)


# -- fine-tuning losses ----------------------------------------------------


@dataclass
class TrainBatch:
    images: np.ndarray                     # (B, H, W)
    notes: list
    vocab: Vocabulary
    reports: Optional[list] = None
    questions: Optional[list] = None
    answers: Optional[list] = None
    annotations: Optional[list] = None

    def __post_init__(self):
        n = len(self.images)
        if n < 1:
            raise ContractError("a batch needs at least one example")
        for name in ("notes", "reports", "questions", "answers", "annotations"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ContractError(f"batch field {name} has {len(v)} items for {n} images")


def conditioning_text(note: str, question: str = "") -> str:
    return f"{note} {SEP_TEXT} {question}" if question else note


def _seq2seq(vis: Tensor, texts: Sequence[TokenSequence], targets: Sequence[TokenSequence],
             params, cfg: ModelConfig) -> Tensor:
    """Teacher-forced decoder logits (B, S-1, V) conditioned on fused (text, image)."""
    ids, attn = batch_sequences(texts)
    tgt, _ = batch_sequences(targets)
    txt = encode_tokens(ids, attn, params, cfg)
    fused, _ = fuse_batch(txt, vis, attn, params, cfg)
    return decoder_forward(tgt[:, :-1], bridge(fused, params), attn, params, cfg)


def _shift_targets(targets: Sequence[TokenSequence]) -> np.ndarray:
    tgt, mask = batch_sequences(targets)
    out = np.where(mask[:, 1:] == 1, tgt[:, 1:], IGNORE)
    if not (out != IGNORE).any():
        raise ContractError("reference sequence is empty")
    return out


def _encode_batch_images(images: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    return encode_patches(patchify_array(np.asarray(images), cfg.patch_size), params, cfg)


def caption_loss(batch: TrainBatch, params, cfg: ModelConfig) -> Tensor:
    """Teacher-forced cross-entropy of the reference reports."""
    if batch.reports is None:
        raise ContractError("caption loss needs reference reports")
    vis = _encode_batch_images(batch.images, params, cfg)
    texts = [tokenize(n, batch.vocab, cfg.max_text_len) for n in batch.notes]
    refs = [tokenize(r, batch.vocab, cfg.max_report_len) for r in batch.reports]
    return T.cross_entropy(_seq2seq(vis, texts, refs, params, cfg), _shift_targets(refs), IGNORE)


def vqa_loss(batch: TrainBatch, params, cfg: ModelConfig) -> Tensor:
    """Answer cross-entropy with the question appended to the note after SEP."""
    if batch.questions is None or batch.answers is None:
        raise ContractError("VQA loss needs questions and answers")
    vis = _encode_batch_images(batch.images, params, cfg)
    texts = [tokenize(conditioning_text(n, q), batch.vocab, cfg.max_text_len)
             for n, q in zip(batch.notes, batch.questions)]
    refs = [tokenize(a, batch.vocab, cfg.max_report_len) for a in batch.answers]
    return T.cross_entropy(_seq2seq(vis, texts, refs, params, cfg), _shift_targets(refs), IGNORE)


def detection_logits(vis: Tensor, params) -> Tensor:
    """(B, N, d) visual embeddings -> (B, n_pathologies, N) logits."""
    return T.transpose(linear(vis, params, "detect.head"), (0, 2, 1))


def detection_loss(images: np.ndarray, annotations: Sequence[AnnotationRecord], params,
                   cfg: ModelConfig) -> Tensor:
    vis = _encode_batch_images(images, params, cfg)
    targets = np.stack([a.mask_array() for a in annotations])
    return T.bce_with_logits(detection_logits(vis, params), targets)


# -- optimizer -------------------------------------------------------------


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, state: Optional[dict] = None, step: int = 0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = step
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        for key, arr in (state or {}).items():
            kind, name = key.split(".", 1)
            getattr(self, kind)[name] = np.array(arr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out


# -- data handle and trainer -------------------------------------------------


@dataclass
class TrainingData:
    images: np.ndarray                  # (n, H, W)
    annotations: list
    notes: list
    reports: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ContractError("training dataset is empty")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_dir(cls, data_dir, split: str = "train") -> "TrainingData":
        from .synth import load_images, load_manifest

        m = load_manifest(data_dir)
        entries = m.split(split)
        return cls(load_images(data_dir, entries), [e.annotation for e in entries],
                   [e.note for e in entries], [e.report for e in entries])

    def tokens(self, kind: str, vocab: Vocabulary, max_len: int) -> list[TokenSequence]:
        key = (kind, id(vocab), max_len)
        if key not in self._cache:
            src = self.notes if kind == "note" else self.reports
            self._cache[key] = [tokenize(s, vocab, max_len) for s in src]
        return self._cache[key]


def corpus_vocab(data: TrainingData, max_size: int) -> Vocabulary:
    return build_vocab(list(data.notes) + list(data.reports) + template_corpus(), max_size)


def _step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1 if stage == "pretrain" else 2, step])


def pretrain_losses(data: TrainingData, idx: np.ndarray, rng: np.random.Generator, params,
                    cfg: ModelConfig, tcfg: TrainConfig, vocab: Vocabulary) -> dict:
    seeds = rng.integers(2 ** 31, size=(len(idx), 2))
    patches = patchify_array(data.images[idx], cfg.patch_size)
    mim_plans = [make_mask_plan(cfg.n_patches, tcfg.mim_ratio, int(s)) for s in seeds[:, 0]]
    notes = data.tokens("note", vocab, cfg.max_text_len)
    seqs = [notes[i] for i in idx]
    plans = [mlm_plan(s, tcfg.mlm_ratio, int(sd)) for s, sd in zip(seqs, seeds[:, 1])]
    ids, attn = batch_sequences(seqs)
    out = {"mim": _mim_batch(patches, mim_plans, params, cfg)}
    keep = [b for b, p in enumerate(plans) if len(p)]
    if keep:
        out["mlm"] = _mlm_batch(ids[keep], attn[keep], [plans[b] for b in keep], params, cfg)
    return out


def sample_questions(anns: Sequence[AnnotationRecord], rng: np.random.Generator) -> tuple[list, list]:
    qs, ans = [], []
    for a in anns:
        label = PATHOLOGIES[int(rng.integers(len(PATHOLOGIES)))]
        kind = "presence" if rng.random() < 0.5 else "location"
        q, an = question_answer(a, label, kind)
        qs.append(q)
        ans.append(an)
    return qs, ans


def finetune_losses(data: TrainingData, idx: np.ndarray, rng: np.random.Generator, params,
                    cfg: ModelConfig, tcfg: TrainConfig, vocab: Vocabulary) -> dict:
    B = len(idx)
    anns = [data.annotations[i] for i in idx]
    vis = _encode_batch_images(data.images[idx], params, cfg)
    out = {}
    if tcfg.w_detect:
        targets = np.stack([a.mask_array() for a in anns])
        out["detect"] = T.bce_with_logits(detection_logits(vis, params), targets)
    if tcfg.w_caption or tcfg.w_vqa:
        notes = data.tokens("note", vocab, cfg.max_text_len)
        reports = data.tokens("report", vocab, cfg.max_report_len)
        qs, ans = sample_questions(anns, rng)
        texts = [notes[i] for i in idx]
        texts += [tokenize(conditioning_text(data.notes[i], q), vocab, cfg.max_text_len)
                  for i, q in zip(idx, qs)]
        refs = [reports[i] for i in idx] + [tokenize(a, vocab, cfg.max_report_len) for a in ans]
        logits = _seq2seq(T.concat([vis, vis], axis=0), texts, refs, params, cfg)
        targets = _shift_targets(refs)
        out["caption"] = T.cross_entropy(T.take(logits, np.arange(B), 0), targets[:B], IGNORE)
        out["vqa"] = T.cross_entropy(T.take(logits, np.arange(B, 2 * B), 0), targets[B:], IGNORE)
    return out


LOSS_KEYS = {"pretrain": ("mim", "mlm"), "finetune": ("caption", "vqa", "detect")}


def _weights(tcfg: TrainConfig) -> dict:
    return {"mim": tcfg.w_mim, "mlm": tcfg.w_mlm, "caption": tcfg.w_caption,
            "vqa": tcfg.w_vqa, "detect": tcfg.w_detect}


def train(stage: str, tcfg: TrainConfig, data: TrainingData, params: dict, cfg: ModelConfig,
          vocab: Vocabulary, optimizer: Optional[Adam] = None, start_step: int = 0) -> tuple[Adam, list]:
    """Run ``tcfg.steps`` optimisation steps of one stage in place on ``params``.

    Batches, mask plans and questions derive from (seed, stage, global step),
    so a resumed run reproduces an uninterrupted one. Returns the optimizer
    and one log row per step.
    """
    if stage not in LOSS_KEYS:
        raise ValueError(f"unknown stage {stage!r}")
    check_params(params, cfg)
    opt = optimizer or Adam(params, tcfg.learning_rate, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
    opt.lr = tcfg.learning_rate
    weights = _weights(tcfg)
    compute = pretrain_losses if stage == "pretrain" else finetune_losses
    rows = []
    for step in range(start_step, start_step + tcfg.steps):
        rng = _step_rng(tcfg.seed, stage, step)
        idx = rng.choice(len(data), size=tcfg.batch_size, replace=len(data) < tcfg.batch_size)
        opt.zero_grad()
        with T.Tape() as tape:
            parts = compute(data, idx, rng, params, cfg, tcfg, vocab)
            total = None
            for key, value in parts.items():
                term = T.mul(value, weights[key])
                total = term if total is None else T.add(total, term)
            loss = total.item()
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{stage} loss became {loss} at step {step + 1}")
            T.backward(total, tape)
        opt.step()
        row = {"step": step + 1, "stage": stage, "loss_total": loss}
        for key in LOSS_KEYS[stage]:
            row[f"loss_{key}"] = parts[key].item() if key in parts else float("nan")
        rows.append(row)
        if (step + 1) % 100 == 0:
            log.info("%s step %d loss %.5f", stage, step + 1, loss)
    return opt, rows


def write_loss_csv(rows: Sequence[dict], path, stage: str) -> None:
    cols = ["step", "stage", "loss_total"] + [f"loss_{k}" for k in LOSS_KEYS[stage]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("step", "stage") else repr(float(r[c])) for c in cols])


def run_stage(stage: str, cfg: ModelConfig, tcfg: TrainConfig, data: TrainingData,
              checkpoint_in=None, checkpoint_out=None, loss_csv=None):
    """Load or initialise, train one stage, and write checkpoint and loss log."""
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    if checkpoint_in is not None:
        ckpt = load_checkpoint(checkpoint_in)
        if ckpt.cfg != cfg:
            raise ContractError("checkpoint config does not match the run config")
        vocab = Vocabulary(ckpt.vocab)
    else:
        vocab = corpus_vocab(data, cfg.vocab_size)
        ckpt = Checkpoint(cfg, init_params(cfg, tcfg.seed), vocab.tokens[6:])

    resume = ckpt.stage == stage
    opt = None
    start = ckpt.step if resume else 0
    if resume and ckpt.optimizer:
        opt = Adam(ckpt.params, tcfg.learning_rate, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps,
                   state=ckpt.optimizer, step=ckpt.optimizer_step)
    rows = []
    if tcfg.steps > 0:
        opt, rows = train(stage, tcfg, data, ckpt.params, cfg, vocab, opt, start)
        ckpt.stage, ckpt.step = stage, start + tcfg.steps
        ckpt.optimizer, ckpt.optimizer_step = opt.state(), opt.t
    if checkpoint_out is not None:
        save_checkpoint(ckpt, checkpoint_out)
    if loss_csv is not None:
        write_loss_csv(rows, loss_csv, stage)
    return ckpt, rows
