import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbvlm.config import PAPER_SHAPE, TOY
from tbvlm.decoder import (DecoderState, bridge, count_parameters, decode_step, decoder_forward,
                           generate_report)
from tbvlm.fusion import FusedEmbeddings
from tbvlm.params import count_by_component, init_params
from tbvlm.tensor import ContractError, Tensor
from tbvlm.text import BOS, EOS, build_vocab

from conftest import TINY


def _fused(seed=0, L=5):
    rng = np.random.default_rng(seed)
    return FusedEmbeddings(Tensor(rng.normal(size=(L, 8))), np.ones(L, dtype=np.int64), [])


def test_decode_step_returns_vocab_logits(tiny_params):
    logits = decode_step(DecoderState(), _fused(), tiny_params, TINY)
    assert logits.shape == (TINY.vocab_size,)


def test_decode_step_contracts(tiny_params):
    with pytest.raises(ContractError):
        decode_step(DecoderState([7]), _fused(), tiny_params, TINY)
    with pytest.raises(ContractError):
        decode_step(DecoderState([BOS] * (TINY.max_report_len + 1)), _fused(), tiny_params, TINY)


def test_causal_mask_perturbation(tiny_params):
    rng = np.random.default_rng(1)
    fused = _fused(1)
    memory = bridge(fused.embeddings, tiny_params)
    memory = Tensor(memory.data[None])
    mask = fused.text_mask[None]
    ids = np.concatenate([[BOS], rng.integers(6, TINY.vocab_size, size=9)])[None]
    base = decoder_forward(ids, memory, mask, tiny_params, TINY).data[0]
    for j in range(1, ids.shape[1]):
        other = ids.copy()
        other[0, j] = (other[0, j] + 5) % TINY.vocab_size
        out = decoder_forward(other, memory, mask, tiny_params, TINY).data[0]
        assert np.abs(out[:j] - base[:j]).max() <= 1e-12
        assert np.abs(out[j] - base[j]).max() > 0


def test_forced_eos_gives_empty_report(tiny_params):
    params = dict(tiny_params)
    b = np.zeros(TINY.vocab_size)
    b[EOS] = 1e3
    params["decoder.out.b"] = Tensor(b)
    vocab = build_vocab(["a b c"], TINY.vocab_size)
    rep = generate_report(_fused(), params, TINY, vocab=vocab)
    assert rep.ids == [BOS, EOS] and rep.text == ""


def test_report_invariants_and_determinism(tiny_params):
    a = generate_report(_fused(2), tiny_params, TINY)
    b = generate_report(_fused(2), tiny_params, TINY)
    assert a == b
    assert a.ids[0] == BOS and len(a.ids) <= TINY.max_report_len
    assert all(lp <= 0 for lp in a.logprobs)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_beam_one_equals_greedy(seed):
    params = init_params(TINY, seed)
    fused = _fused(seed)
    assert generate_report(fused, params, TINY, "beam", 1).ids == generate_report(fused, params, TINY).ids


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_beam_never_scores_below_greedy(seed, k):
    params = init_params(TINY, seed)
    fused = _fused(seed)
    greedy = generate_report(fused, params, TINY)
    beam = generate_report(fused, params, TINY, "beam", k)
    assert beam.score >= greedy.score


def test_beam_size_must_be_positive(tiny_params):
    with pytest.raises(ValueError):
        generate_report(_fused(), tiny_params, TINY, "beam", 0)


# -- parameter counting ----------------------------------------------------


def _hand_count(c):
    """Independent tally of trainable scalars, written from the block recipe."""
    ln = lambda d: 2 * d  # noqa: E731
    lin = lambda i, o: i * o + o  # noqa: E731
    attn = lambda d, dkv: lin(d, d) + 2 * lin(dkv, d) + lin(d, d)  # noqa: E731
    ffn = lambda d: lin(d, c.ffn_mult * d) + lin(c.ffn_mult * d, d)  # noqa: E731
    enc_block = lambda d: 2 * ln(d) + attn(d, d) + ffn(d)  # noqa: E731
    vision = lin(c.patch_size ** 2, c.d_vision) + c.n_patches * c.d_vision \
        + c.vision_layers * enc_block(c.d_vision) + ln(c.d_vision)
    text = (c.vocab_size + c.max_text_len) * c.d_text + c.text_layers * enc_block(c.d_text) + ln(c.d_text)
    fusion = c.fusion_layers * (2 * ln(c.d_fused) + attn(c.d_fused, c.d_vision) + ffn(c.d_fused)) + ln(c.d_fused)
    dd = c.d_decoder
    decoder = (c.vocab_size + c.max_report_len) * dd + lin(c.d_fused, dd) \
        + c.decoder_layers * (3 * ln(dd) + 2 * attn(dd, dd) + ffn(dd)) + ln(dd) + lin(dd, c.vocab_size)
    return {"vision": vision, "text": text, "fusion": fusion, "decoder": decoder}


def test_zero_layer_count_is_closed_form():
    c = dataclasses.replace(TOY, vision_layers=0, text_layers=0, fusion_layers=0, decoder_layers=0)
    d, dd, V = c.d_text, c.d_decoder, c.vocab_size
    expected = (c.patch_dim * d + d + c.n_patches * d + 2 * d) \
        + (V * d + c.max_text_len * d + 2 * d) + 2 * d \
        + (V * dd + c.max_report_len * dd + d * dd + dd + 2 * dd + dd * V + V)
    assert count_parameters(c) == expected


def test_toy_count_matches_hand_count():
    hand = _hand_count(TOY)
    got = count_by_component(TOY)
    assert {k: got[k] for k in hand} == hand
    assert count_parameters(TOY) == sum(hand.values())


def test_reference_scale_count_is_far_below_three_billion():
    hand = _hand_count(PAPER_SHAPE)
    n = count_parameters(PAPER_SHAPE)
    assert n == sum(hand.values())
    assert n < 3_000_000_000 / 3
