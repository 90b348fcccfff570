"""ROUGE-L and token F1 with KILT/SQuAD answer normalization."""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _tokens(s: str) -> list[str]:
    return normalize_answer(s).split()


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F1 over normalized tokens. Two empty strings score 1.0, one empty 0.0."""
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        return float(c == r)
    return _f(lcs_length(c, r), len(c), len(r))


def f1(candidate: str, reference: str) -> float:
    """Bag-of-tokens F1 with multiset clipping; same empty conventions as rouge_l."""
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        return float(c == r)
    overlap = sum((Counter(c) & Counter(r)).values())
    return _f(overlap, len(c), len(r))


@dataclass(frozen=True)
class ScorePair:
    rouge_l: float
    f1: float


def score(candidate: str, reference: str) -> ScorePair:
    return ScorePair(rouge_l=rouge_l(candidate, reference), f1=f1(candidate, reference))
