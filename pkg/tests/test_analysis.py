import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_top
from fidfilter.analysis import (CurveAccumulator, TraceBudgetExceeded, emit_analysis, gold_ratio,
                                passage_distribution, record_trace)
from fidfilter.runtime import DecodeSettings
from fidfilter.toy import synthetic_input
from fidfilter.trace import CrossAttnTrace


def _trace(rows_by_key, token_to_passage, gold=1):
    return CrossAttnTrace({k: np.asarray(v, dtype=np.float32) for k, v in rows_by_key.items()},
                          np.asarray(token_to_passage), gold)


def _uniform(T, h=2):
    return np.full((h, T), 1.0 / T)


def _settings(**kw):
    return DecodeSettings(beams=2, max_new_tokens=3, min_new_tokens=3, max_passage_tokens=12, **kw)


def test_full_trace_entry_count(tiny_text):
    # tiny_text has 3 decoder layers
    tr = record_trace(tiny_text, synthetic_input(3, 10), _settings())
    assert sorted(tr.entries) == [(t, l) for t in (1, 2, 3) for l in (1, 2, 3)]
    assert tr.gold_rank == 1 and len(tr.token_to_passage) == 36


def test_layer_and_token_subsampling(tiny_text):
    tr = record_trace(tiny_text, synthetic_input(3, 10), _settings(), layers=[2], tokens=[1, 3])
    assert sorted(tr.entries) == [(1, 2), (3, 2)]


def test_rows_sum_to_one_over_unmasked(tiny_text):
    inp = synthetic_input(3, 10)
    tr = record_trace(tiny_text, inp, _settings())
    for row in tr.entries.values():
        np.testing.assert_allclose(row.sum(-1), 1.0, atol=1e-5)


def test_budget_exceeded_is_explicit(tiny_text):
    with pytest.raises(TraceBudgetExceeded, match="budget"):
        record_trace(tiny_text, synthetic_input(3, 10), _settings(), max_bytes=1000)


def test_gold_moved_to_rank_one(tiny_text):
    inp = synthetic_input(3, 10, seed=5)
    from dataclasses import replace
    moved = replace(inp, passages=(inp.passages[1], inp.passages[2], inp.passages[0]))
    tr = record_trace(tiny_text, moved, _settings(), layers=[1], tokens=[1])
    assert tr.gold_rank == 1


def test_filtered_trace_keeps_original_length(tiny_text):
    from fidfilter.filtering import FilterConfig
    tr = record_trace(tiny_text, synthetic_input(3, 10), _settings(filter=FilterConfig(30, 1, 1)))
    assert tr.entries[(3, 1)].shape[1] == 36
    assert np.count_nonzero(tr.entries[(3, 1)][0]) <= int(np.ceil(0.3 * 36))


def test_gold_dominant_ratio_is_one():
    t2p = np.repeat([1, 2, 3], 4)
    row = np.where(t2p == 1, 0.2, 0.05 / 8)[None].repeat(2, 0)
    tr = _trace({(t, l): row for t in (1, 2) for l in (1, 2)}, t2p)
    assert set(gold_ratio(tr, 30).values.values()) == {1.0}
    dist = passage_distribution(tr, 50, 2)
    for t in (1, 2):
        assert dist.values[(1, t)] > max(dist.values[(2, t)], dist.values[(3, t)])


def test_uniform_ratio_matches_oracle():
    # 1000 tokens over 100 passages, gold holds 10 of them; ties go to low indices (gold first)
    t2p = np.repeat(np.arange(1, 101), 10)
    tr = _trace({(1, 1): _uniform(1000)}, t2p)
    chosen = exhaustive_top([1.0] * 1000, 10)
    want = sum(t2p[i] == 1 for i in chosen) / len(chosen)
    assert want == pytest.approx(0.1)
    assert gold_ratio(tr, 10).values[(1, 1)] == pytest.approx(want, abs=1e-12)


def test_keep_all_gives_gold_share():
    t2p = np.repeat([1, 2, 3, 4], [3, 5, 5, 7])
    rng = np.random.default_rng(0)
    rows = rng.dirichlet(np.ones(20), size=2)
    tr = _trace({(1, 1): rows}, t2p)
    assert gold_ratio(tr, 100).values[(1, 1)] == pytest.approx(3 / 20)


def test_single_passage_distribution():
    tr = _trace({(t, 1): _uniform(6) for t in (1, 2, 3)}, np.ones(6, int))
    d = passage_distribution(tr, 30, 1)
    assert d.values == {(1, 1): 1.0, (1, 2): 1.0, (1, 3): 1.0}


def test_two_equal_passages_half_split():
    # interleaved equal scores so the lower-index tie-break alternates passages
    tr = _trace({(1, 1): np.tile([0.3, 0.3, 0.2, 0.2], (2, 1))}, [1, 2, 1, 2])
    d = passage_distribution(tr, 50, 1)
    assert d.values[(1, 1)] == d.values[(2, 1)] == 0.5


def test_missing_gold_and_layer_errors():
    tr = _trace({(1, 1): _uniform(4)}, [1, 1, 2, 2], gold=None)
    with pytest.raises(ValueError, match="gold"):
        gold_ratio(tr, 50)
    with pytest.raises(ValueError, match="layer"):
        passage_distribution(tr, 50, 3)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.sampled_from([10, 30, 50, 77]))
def test_gold_ratio_consistent_with_distribution(seed, p):
    rng = np.random.default_rng(seed)
    n, w = rng.integers(1, 6), rng.integers(1, 6)
    t2p = np.repeat(np.arange(1, n + 1), w)
    T = n * w
    entries = {(t, l): rng.dirichlet(np.ones(T), size=2) for t in (1, 2) for l in (1, 2)}
    gold = int(rng.integers(1, n + 1))
    tr = _trace(entries, t2p, gold)
    g = gold_ratio(tr, p)
    for layer in (1, 2):
        d = passage_distribution(tr, p, layer)
        for t in (1, 2):
            assert g.values[(layer, t)] == pytest.approx(d.values[(gold, t)], abs=1e-12)
            assert sum(d.values[(r, t)] for r in range(1, n + 1)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("scale", [0.25, 0.5, 2.0, 8.0])
def test_rescaling_invariance(scale):
    # powers of two rescale float32 exactly, so score order is preserved bit for bit
    rng = np.random.default_rng(7)
    t2p = np.repeat([1, 2, 3], 5)
    entries = {(1, l): rng.dirichlet(np.ones(15), size=2) for l in (1, 2)}
    a = gold_ratio(_trace(entries, t2p), 30)
    b = gold_ratio(_trace({k: v * scale for k, v in entries.items()}, t2p), 30)
    assert a.values == b.values


def test_accumulator_merge_is_associative():
    a, b, c = CurveAccumulator(), CurveAccumulator(), CurveAccumulator()
    a.add({(1, 1): 0.2}); b.add({(1, 1): 0.4, (2, 1): 1.0}); c.add({(1, 1): 0.9})
    left = a.merge(b).merge(c).mean()
    right = a.merge(b.merge(c)).mean()
    assert left == pytest.approx(right) and left[(1, 1)] == pytest.approx(0.5)


def test_emit_csv(tmp_path):
    paths = emit_analysis(tmp_path, gold={10: {(1, 1): 0.5, (2, 1): 0.25}},
                          distributions={30: (2, {(1, 1): 0.75, (2, 1): 0.25})})
    assert [p.name for p in paths] == ["gold_ratio_p10.csv", "passage_distribution_p30_layer2.csv"]
    rows = list(csv.reader(open(paths[0])))
    assert rows[0] == ["layer", "token_index", "value"] and rows[1] == ["1", "1", "0.500000"]
    assert list(csv.reader(open(paths[1])))[0] == ["passage_rank", "token_index", "value"]


def test_emit_plot(tmp_path):
    pytest.importorskip("matplotlib")
    paths = emit_analysis(tmp_path, gold={10: {(1, 1): 0.5, (1, 2): 0.6}}, plot=True)
    assert any(p.suffix == ".png" and p.stat().st_size > 0 for p in paths)


def test_trace_roundtrip(tmp_path):
    tr = _trace({(1, 2): _uniform(4), (3, 1): _uniform(4)}, [1, 1, 2, 2], gold=2)
    tr.save(tmp_path / "t.bin")
    back = CrossAttnTrace.load(tmp_path / "t.bin")
    assert sorted(back.entries) == [(1, 2), (3, 1)]
    assert back.token_to_passage.tolist() == [1, 1, 2, 2] and back.gold_rank == 2
    np.testing.assert_array_equal(back.entries[(1, 2)], tr.entries[(1, 2)])
