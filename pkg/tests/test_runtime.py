from dataclasses import replace

import numpy as np
import pytest

import torch_reference as ref
from fidfilter.early_exit import ExitConfig
from fidfilter.filtering import FilterConfig
from fidfilter.model import EOS_ID, PAD_ID, decode_full, encode
from fidfilter.runtime import (DecodeSettings, FidInput, Passage, encode_passages, generate,
                               passage_token_ids, profile_decoder_share)
from fidfilter.tokenizer import Tokenizer
from fidfilter.toy import synthetic_input

TOK = Tokenizer.default()


def _inp(n=3, words=12, seed=0):
    return synthetic_input(n, words_per_passage=words, seed=seed)


def test_concatenated_length_and_passage_map(tiny_text):
    inp = FidInput("who", (Passage("a", "one two three four five six"), Passage("b", "x y z w v")))
    b = encode_passages(tiny_text, inp, DecodeSettings(max_passage_tokens=5), TOK)
    assert b.total_len == 10 and b.passage_length == 5
    assert b.token_to_passage.tolist() == [1] * 5 + [2] * 5
    assert b.source_index.tolist() == list(range(10))
    assert b.mask.all()


def test_passage_ids_end_with_eos():
    ids = passage_token_ids(TOK, "q", Passage("t", "c " * 50), 7)
    assert len(ids) == 7 and ids[-1] == EOS_ID


def test_permuting_passages_permutes_blocks(tiny_text):
    inp = _inp(3)
    perm = (2, 0, 1)
    other = replace(inp, passages=tuple(inp.passages[i] for i in perm))
    s = DecodeSettings(max_passage_tokens=20)
    a = encode_passages(tiny_text, inp, s, TOK)
    b = encode_passages(tiny_text, other, s, TOK)
    w = a.passage_length
    for new, old in enumerate(perm):
        np.testing.assert_allclose(b.states[new * w:(new + 1) * w], a.states[old * w:(old + 1) * w], atol=1e-5)


def test_single_passage_matches_plain_encode(tiny_text):
    inp = _inp(1)
    s = DecodeSettings(max_passage_tokens=30)
    b = encode_passages(tiny_text, inp, s, TOK)
    ids = passage_token_ids(TOK, inp.question, inp.passages[0], 30)
    np.testing.assert_allclose(b.states, encode(tiny_text, np.array(ids)), atol=1e-6)


def test_too_many_passages_rejected(tiny_text):
    with pytest.raises(ValueError):
        encode_passages(tiny_text, _inp(2), DecodeSettings(n_passages=3), TOK)


def test_beam_one_is_greedy_rollout(tiny_text):
    inp = _inp(3)
    s = DecodeSettings(beams=1, max_new_tokens=12, max_passage_tokens=20)
    res = generate(tiny_text, inp, s, TOK)
    b = encode_passages(tiny_text, inp, s, TOK)
    toks = [PAD_ID]
    out = []
    for _ in range(12):
        logits = decode_full(tiny_text, np.array(toks), b.states, b.mask)[-1]
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if nxt == EOS_ID:
            break
        toks.append(nxt)
    assert res.token_ids == out


@pytest.mark.parametrize("beams", [1, 3])
def test_filter_keep_all_is_identity(tiny_text, beams):
    inp = _inp(3)
    s = DecodeSettings(beams=beams, max_new_tokens=15, max_passage_tokens=20)
    base = generate(tiny_text, inp, s, TOK)
    filt = generate(tiny_text, inp, replace(s, filter=FilterConfig(100, 2, 2)), TOK)
    assert filt.token_ids == base.token_ids
    assert filt.surviving_token_indices == list(range(3 * 20))


def test_exit_threshold_one_is_identity(tiny_text):
    inp = _inp(3)
    s = DecodeSettings(beams=2, max_new_tokens=15, max_passage_tokens=20)
    base = generate(tiny_text, inp, s, TOK)
    ex = generate(tiny_text, inp, replace(s, exit=ExitConfig(1.0)), TOK)
    assert ex.token_ids == base.token_ids
    assert set(ex.exit_layer_per_token) == {tiny_text.config.n_dec_layers}


def test_generation_is_deterministic(tiny_text):
    inp = _inp(4)
    s = DecodeSettings(beams=3, max_new_tokens=20, max_passage_tokens=16,
                       filter=FilterConfig(30, 3, 2), exit=ExitConfig(0.3, 0.9, 4))
    outs = {tuple(generate(tiny_text, inp, s, TOK).token_ids) for _ in range(10)}
    assert len(outs) == 1


@pytest.mark.parametrize("lo,hi", [(0, 1), (5, 5), (3, 9)])
def test_length_bounds(tiny_text, lo, hi):
    res = generate(tiny_text, _inp(2), DecodeSettings(beams=2, min_new_tokens=lo, max_new_tokens=hi,
                                                      max_passage_tokens=16), TOK)
    assert max(lo, 1) <= len(res.token_ids) <= hi
    assert EOS_ID not in res.token_ids[:lo]
    assert len(res.per_token_decoder_seconds) == len(res.exit_layer_per_token) == len(res.token_ids)


def test_filter_layer_beyond_depth_rejected(tiny_text):
    with pytest.raises(ValueError, match="exceeds"):
        generate(tiny_text, _inp(2), DecodeSettings(filter=FilterConfig(50, 1, 9)), TOK)


def test_filter_after_generation_end_is_baseline(tiny_text):
    inp = _inp(3)
    s = DecodeSettings(beams=2, max_new_tokens=6, max_passage_tokens=16)
    base = generate(tiny_text, inp, s, TOK)
    late = generate(tiny_text, inp, replace(s, filter=FilterConfig(10, 50, 1)), TOK)
    assert late.token_ids == base.token_ids and late.surviving_token_indices is None


@pytest.mark.parametrize("p", [10, 33, 50])
def test_surviving_count(tiny_text, p):
    s = DecodeSettings(beams=2, max_new_tokens=5, min_new_tokens=5, max_passage_tokens=16,
                       filter=FilterConfig(p, 1, 1))
    res = generate(tiny_text, _inp(4), s, TOK)
    T = 4 * 16
    assert len(res.surviving_token_indices) == int(np.ceil(p * T / 100 - 1e-9))
    assert res.surviving_token_indices == sorted(res.surviving_token_indices)


def _pruning_oracle_gap(weights, inp, settings):
    """Max |logit difference| between the engine and a torch decoder that masks
    the dropped tokens for every query position after the trigger."""
    inputs, logits = [], []
    res = generate(weights, inp, settings, TOK,
                   step_callback=lambda t, lg, ids: (inputs.append(int(ids[0])), logits.append(lg[0].copy())))
    full = encode_passages(weights, inp, settings, TOK)
    keep = res.surviving_token_indices
    bias = ref.masked_cross_bias(weights.config.n_heads, full.mask, len(inputs), keep,
                                 settings.filter.trigger_token)
    want, _ = ref.decode(weights, inputs, full.states.astype(np.float64), bias)
    return float(np.max(np.abs(want.numpy() - np.stack(logits))))


def test_pruning_matches_mask_oracle(tiny_text):
    s = DecodeSettings(beams=1, max_new_tokens=10, min_new_tokens=10, max_passage_tokens=16,
                       filter=FilterConfig(25, 3, 2))
    assert _pruning_oracle_gap(tiny_text, _inp(3), s) <= 1e-4


def test_profile_share_grows_with_budget(toy):
    inp = synthetic_input(10, words_per_passage=40, seed=3)
    recs = profile_decoder_share(toy, inp, DecodeSettings(beams=1), [1, 60], repeats=3, warmup=1)
    assert [r["generated"] for r in recs] == [1, 60]
    assert all(0 < r["decoder_share"] < 1 for r in recs)
    assert recs[0]["decoder_share"] < recs[1]["decoder_share"]
