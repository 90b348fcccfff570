import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_f1, naive_rouge_l
from fidfilter.metrics import f1, lcs_length, normalize_answer, rouge_l, score


def test_rouge_article_removed_example():
    assert rouge_l("the cat sat", "cat sat down") == pytest.approx(0.8, abs=1e-12)
    assert naive_rouge_l("the cat sat", "cat sat down") == pytest.approx(0.8, abs=1e-12)


def test_f1_clipped_example():
    # "a" is an article, leaving "b b" vs "b c": one clipped match of two tokens each
    assert f1("a b b", "b c") == naive_f1("a b b", "b c") == pytest.approx(0.5)
    # same counts with no article in play
    assert f1("x y y", "y z") == pytest.approx(0.4)


@pytest.mark.parametrize("fn", [rouge_l, f1])
def test_identity_and_disjoint(fn):
    assert fn("Paris is nice.", "paris is NICE") == 1.0
    assert fn("red green", "blue yellow") == 0.0


@pytest.mark.parametrize("fn", [rouge_l, f1])
def test_empty_conventions(fn):
    assert fn("", "") == 1.0
    assert fn("", "word") == 0.0 and fn("word", "") == 0.0
    assert fn("the", "an a") == 1.0  # both normalize to empty


def test_normalize():
    assert normalize_answer("  The Quick, brown fox!  ") == "quick brown fox"
    assert normalize_answer("theatre an-apple") == "theatre anapple"


def test_lcs_small():
    assert lcs_length(list("abcbdab"), list("bdcaba")) == 4
    assert lcs_length([], ["a"]) == 0


def test_permutation_behaviour():
    assert f1("b a c", "a b c") == f1("a b c", "a b c") == 1.0
    assert rouge_l("c b a", "a b c") < 1.0


def test_score_pair():
    s = score("the cat sat", "cat sat down")
    assert s.rouge_l == pytest.approx(0.8) and s.f1 == pytest.approx(0.8)


words = st.sampled_from(["a", "the", "an", "cat", "Cat", "dog", "sat,", "on", "mat.", "x", "y", "z!"])
texts = st.lists(words, max_size=12).map(" ".join)


@settings(max_examples=300, deadline=None)
@given(c=texts, r=texts)
def test_metric_properties(c, r):
    for fn, oracle in ((rouge_l, naive_rouge_l), (f1, naive_f1)):
        v = fn(c, r)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(oracle(c, r), abs=1e-12)
        assert fn(normalize_answer(c), r) == v
        if normalize_answer(c):
            assert fn(c, c) == 1.0
    rev = " ".join(reversed(c.split()))
    assert f1(rev, r) == pytest.approx(f1(c, r), abs=1e-12)
    assert rouge_l(c, r) <= f1(c, r) + 1e-12  # an LCS is a clipped bag match
