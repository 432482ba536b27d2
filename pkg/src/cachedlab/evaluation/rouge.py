"""ROUGE-N and ROUGE-L over token sequences.

ROUGE-L is a single longest-common-subsequence over the whole sequences (no
summary-level sentence splitting), with no stemming or stopword removal.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # input too short to score; all fields are 0

    @classmethod
    def from_pr(cls, p: float, r: float) -> "RougeScore":
        return cls(p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))


ZERO = RougeScore(0.0, 0.0, 0.0, degenerate=True)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> RougeScore:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(candidate) < n or len(reference) < n:
        return ZERO
    cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_pr(overlap / sum(cand.values()), overlap / sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> RougeScore:
    if not candidate or not reference:
        return ZERO
    ell = lcs_length(candidate, reference)
    return RougeScore.from_pr(ell / len(candidate), ell / len(reference))
