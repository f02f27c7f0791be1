import dataclasses
import math

import numpy as np
import pytest

from tbvlm import tensor as T
from tbvlm.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from tbvlm.config import TOY, TrainConfig
from tbvlm.objectives import (Adam, TrainBatch, TrainingData, TrainingDiverged, caption_loss,
                              make_mask_plan, mask_count, mim_loss, mlm_loss, mlm_plan, run_stage,
                              train, vqa_loss, corpus_vocab, _mlm_batch)
from tbvlm.params import init_params
from tbvlm.tensor import ContractError, Tensor
from tbvlm.text import MASK, batch_sequences, build_vocab, tokenize
from tbvlm.vision import ImageGrid

from conftest import SMALL, TINY


def _image(seed=0, size=32):
    return ImageGrid(np.random.default_rng(seed).random((size, size)))


# -- mask plans ------------------------------------------------------------


@pytest.mark.parametrize("total,ratio,count", [(16, 0.25, 4), (10, 0.15, 2), (4, 0.1, 1), (6, 0.25, 2),
                                               (5, 0.0, 0), (3, 1.0, 3)])
def test_mask_count(total, ratio, count):
    assert mask_count(total, ratio) == count


def test_mask_plan_is_reproducible_and_valid():
    a = make_mask_plan(196, 0.25, seed=11)
    assert a == make_mask_plan(196, 0.25, seed=11)
    assert len(set(a.indices)) == len(a) == 49
    assert all(0 <= i < 196 for i in a.indices)


# -- MIM -------------------------------------------------------------------


def test_mim_with_ratio_zero_is_rejected(tiny_params):
    with pytest.raises(ContractError):
        mim_loss(_image(), make_mask_plan(4, 0.0, 0), tiny_params, TINY)


def test_mim_planted_head_gives_zero_loss():
    cfg = dataclasses.replace(TINY, image_size=16)
    params = init_params(cfg, 0)
    img = _image(1, 16)
    params["mim.head.w"] = Tensor(np.zeros(params["mim.head.w"].shape))
    params["mim.head.b"] = Tensor(img.pixels.reshape(-1).copy())
    assert mim_loss(img, make_mask_plan(1, 0.25, 0), params, cfg).item() == 0.0


def test_mim_gradient_ignores_unmasked_targets(tiny_params):
    img = _image(2)
    plan = make_mask_plan(4, 0.5, seed=3)
    target = Tensor(np.random.default_rng(4).random((4, 256)), requires_grad=True)
    with T.Tape() as tape:
        T.backward(mim_loss(img, plan, tiny_params, TINY, target=target), tape)
    unmasked = [i for i in range(4) if i not in plan.indices]
    assert np.all(target.grad[unmasked] == 0.0)
    assert np.abs(target.grad[list(plan.indices)]).max() > 0


def _fit(params, loss_fn, steps, lr):
    opt = Adam(params, lr)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        with T.Tape() as tape:
            loss = loss_fn()
            T.backward(loss, tape)
        opt.step()
        losses.append(loss.item())
    return losses


def test_mim_overfits_a_fixed_batch():
    params = init_params(TINY, 0)
    imgs = [_image(s) for s in range(4)]
    plans = [make_mask_plan(4, 0.5, s) for s in range(4)]

    def loss():
        total = mim_loss(imgs[0], plans[0], params, TINY)
        for img, plan in zip(imgs[1:], plans[1:]):
            total = T.add(total, mim_loss(img, plan, params, TINY))
        return total

    losses = _fit(params, loss, 200, 1e-2)
    assert losses[-1] <= losses[0] / 10


# -- MLM -------------------------------------------------------------------


NOTES = ["prior tb : yes [sep] comorbidities : diabetes", "no prior tb history .",
         "prior tb : no [sep] treatment : completed", "prior tb : yes [sep] comorbidities : hiv"]


def test_mlm_peaked_and_uniform_heads(tiny_params):
    vocab = build_vocab(["a b"], 32)
    seq = tokenize("a", vocab, 8)
    plan = mlm_plan(seq, 0.5, 0)
    assert plan.indices == (1,)
    params = dict(tiny_params)
    params["mlm.head.w"] = Tensor(np.zeros((8, 32)))
    params["mlm.head.b"] = Tensor(np.zeros(32))
    assert mlm_loss(seq, plan, params, TINY).item() == pytest.approx(math.log(32), abs=1e-12)
    b = np.zeros(32)
    b[vocab.id("a")] = 20.0
    params["mlm.head.b"] = Tensor(b)
    assert mlm_loss(seq, plan, params, TINY).item() < 1e-3


def test_mlm_without_maskable_tokens_is_rejected(tiny_params):
    seq = tokenize("", build_vocab(["a"], 32), 8)
    with pytest.raises(ContractError):
        mlm_loss(seq, mlm_plan(seq, 0.15, 0), tiny_params, TINY)


def test_mlm_reaches_full_accuracy_on_four_notes():
    cfg = dataclasses.replace(TINY, max_text_len=16)
    params = init_params(cfg, 1)
    vocab = build_vocab(NOTES, 32)
    seqs = [tokenize(n, vocab, 16) for n in NOTES]
    plans = [mlm_plan(s, 0.15, i) for i, s in enumerate(seqs)]
    ids, attn = batch_sequences(seqs)
    opt = Adam(params, 1e-2)
    acc = 0.0
    for _ in range(500):
        opt.zero_grad()
        with T.Tape() as tape:
            T.backward(_mlm_batch(ids, attn, plans, params, cfg), tape)
        opt.step()
        acc = _mlm_accuracy(ids, attn, plans, params, cfg)
        if acc == 1.0:
            break
    assert acc == 1.0


def _mlm_accuracy(ids, attn, plans, params, cfg):
    from tbvlm.layers import linear
    from tbvlm.text import encode_tokens

    masked = ids.copy()
    for b, p in enumerate(plans):
        masked[b, list(p.indices)] = MASK
    with T.no_grad():
        logits = linear(encode_tokens(masked, attn, params, cfg), params, "mlm.head").data
    hits = [logits[b, i].argmax() == ids[b, i] for b, p in enumerate(plans) for i in p.indices]
    return float(np.mean(hits))


# -- captioning and VQA ----------------------------------------------------


def test_eos_only_reference_with_eos_peaked_decoder(tiny_params):
    vocab = build_vocab(["a b"], 32)
    params = dict(tiny_params)
    b = np.zeros(32)
    b[2] = 1e3
    params["decoder.out.b"] = Tensor(b)
    batch = TrainBatch(np.random.default_rng(0).random((1, 32, 32)), ["a"], vocab, reports=[""])
    assert caption_loss(batch, params, TINY).item() < 1e-3


def test_initial_caption_loss_is_near_log_vocab():
    params = init_params(TOY, 0)
    vocab = build_vocab(NOTES + ["mild upper fibrosis . impression : findings consistent"], TOY.vocab_size)
    batch = TrainBatch(np.random.default_rng(1).random((2, 64, 64)), NOTES[:2], vocab,
                       reports=["mild upper fibrosis .", "impression : findings consistent"])
    loss = caption_loss(batch, params, TOY).item()
    assert abs(loss - math.log(TOY.vocab_size)) <= 0.15 * math.log(TOY.vocab_size)


def test_empty_question_reduces_to_captioning(tiny_params):
    vocab = build_vocab(NOTES, 32)
    imgs = np.random.default_rng(2).random((2, 32, 32))
    reports = ["prior tb", "no history"]
    cap = caption_loss(TrainBatch(imgs, NOTES[:2], vocab, reports=reports), tiny_params, TINY).item()
    vqa = vqa_loss(TrainBatch(imgs, NOTES[:2], vocab, questions=["", ""], answers=reports),
                   tiny_params, TINY).item()
    assert vqa == cap


def test_batch_fields_must_align():
    with pytest.raises(ContractError):
        TrainBatch(np.zeros((2, 32, 32)), ["a"], build_vocab(["a"], 32))


# -- training loop ---------------------------------------------------------


@pytest.fixture(scope="module")
def data(small_dataset):
    return TrainingData.from_dir(small_dataset, "train")


def _tcfg(**kw):
    base = dict(steps=3, batch_size=2, learning_rate=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_zero_learning_rate_leaves_parameters_unchanged(stage, data):
    params = init_params(SMALL, 0)
    before = {n: p.data.copy() for n, p in params.items()}
    train(stage, _tcfg(learning_rate=0.0), data, params, SMALL, corpus_vocab(data, SMALL.vocab_size))
    for n, p in params.items():
        assert p.data.tobytes() == before[n].tobytes(), n


def test_same_seed_same_trajectory(data):
    vocab = corpus_vocab(data, SMALL.vocab_size)
    runs = [train("finetune", _tcfg(), data, init_params(SMALL, 0), SMALL, vocab)[1] for _ in range(2)]
    assert runs[0] == runs[1]
    assert [r["step"] for r in runs[0]] == [1, 2, 3]


def test_divergence_names_the_step(data):
    params = init_params(SMALL, 0)
    params["mim.head.b"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 1"):
        train("pretrain", _tcfg(), data, params, SMALL, corpus_vocab(data, SMALL.vocab_size))


def test_zero_weight_silences_its_head(data):
    params = init_params(SMALL, 0)
    before = {n: p.data.copy() for n, p in params.items()}
    train("pretrain", _tcfg(w_mlm=0.0), data, params, SMALL, corpus_vocab(data, SMALL.vocab_size))
    assert np.array_equal(params["mlm.head.w"].data, before["mlm.head.w"])
    assert not np.array_equal(params["mim.head.w"].data, before["mim.head.w"])


def test_adam_descends_a_quadratic():
    x = Tensor(np.array([3.0, -2.0, 0.5]), requires_grad=True)
    losses = _fit({"x": x}, lambda: T.sum(T.mul(x, x)), 50, 1e-2)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_resumed_run_matches_uninterrupted(tmp_path, data):
    full, _ = run_stage("pretrain", SMALL, _tcfg(steps=4), data, None, tmp_path / "full.ckpt")
    run_stage("pretrain", SMALL, _tcfg(steps=2), data, None, tmp_path / "half.ckpt")
    resumed, _ = run_stage("pretrain", SMALL, _tcfg(steps=2), data, tmp_path / "half.ckpt",
                           tmp_path / "resumed.ckpt")
    assert resumed.step == 4
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()


def test_checkpoint_round_trip(tmp_path):
    params = init_params(TINY, 4)
    ckpt = Checkpoint(TINY, params, ["a", "b"], "finetune", 7, {"m.x": np.ones(2)}, 7)
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.cfg == TINY and back.vocab == ["a", "b"] and back.stage == "finetune" and back.step == 7
    for n, p in params.items():
        assert back.params[n].data.tobytes() == p.data.tobytes()
    np.testing.assert_array_equal(back.optimizer["m.x"], np.ones(2))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
