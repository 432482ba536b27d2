"""Document-utilization alignment, length-bucketed scores and memory/time profiling."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..data import BOS, EOS, PAD, SEP, Example
from ..model import ModelConfig, init_params
from ..rng import substream
from ..trainer.steps import cached_step, full_attention_step, reference_step
from .rouge import RougeScore, rouge_l, rouge_n

PROFILE_HEADER = ("L", "trainer", "ledger_peak", "wall_ms", "enc_calls")
LENGTH_HEADER = ("bucket_lo", "bucket_hi", "count", "rouge_l_f1")
ALIGN_HEADER = ("bin", "fraction")
FAILED = "FAIL"


def strip_special(seq: Iterable[int]) -> list[int]:
    """Drop bos/pad and cut at the first eos."""
    out = []
    for t in seq:
        if t == EOS:
            break
        if t not in (BOS, PAD):
            out.append(int(t))
    return out


def split_sentences(seq: Sequence[int], sep: int = SEP) -> list[list[int]]:
    sents, cur = [], []
    for t in strip_special(seq):
        if t == sep:
            if cur:
                sents.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        sents.append(cur)
    return sents


@dataclass
class AlignmentHistogram:
    bins: int
    counts: list[int]
    total: int

    @property
    def fractions(self) -> list[float]:
        if self.total == 0:
            return [0.0] * self.bins
        return [c / self.total for c in self.counts]

    def max_min_ratio(self) -> float:
        lo = min(self.counts)
        return float("inf") if lo == 0 else max(self.counts) / lo

    def merge(self, other: "AlignmentHistogram") -> "AlignmentHistogram":
        if other.bins != self.bins:
            raise ValueError("cannot merge histograms with different bin counts")
        return AlignmentHistogram(self.bins, [a + b for a, b in zip(self.counts, other.counts)],
                                  self.total + other.total)


def segment_bounds(n: int, bins: int) -> list[tuple[int, int]]:
    """``bins`` contiguous equal segments of [0, n); the last absorbs the remainder."""
    if bins < 1 or n < bins:
        raise ValueError(f"need 1 <= bins <= document length, got bins={bins}, length={n}")
    size = n // bins
    return [(i * size, (i + 1) * size if i < bins - 1 else n) for i in range(bins)]


def align_summary_bins(document: Sequence[int], sentences: Sequence[Sequence[int]], bins: int) -> AlignmentHistogram:
    """Assign each summary sentence to the document segment with the best ROUGE-L F1 (ties: lowest)."""
    bounds = segment_bounds(len(document), bins)
    segments = [list(document[s:e]) for s, e in bounds]
    counts = [0] * bins
    for sent in sentences:
        scores = [rouge_l(sent, seg).f1 for seg in segments]
        counts[int(np.argmax(scores))] += 1
    return AlignmentHistogram(bins, counts, len(sentences))


def corpus_rouge(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> dict[str, RougeScore]:
    """Mean precision/recall/F1 over examples for rouge1, rouge2 and rougeL."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    out = {}
    for key, fn in (("rouge1", lambda c, r: rouge_n(c, r, 1)),
                    ("rouge2", lambda c, r: rouge_n(c, r, 2)),
                    ("rougeL", rouge_l)):
        scores = [fn(strip_special(c), strip_special(r)) for c, r in zip(predictions, references)]
        n = max(len(scores), 1)
        out[key] = RougeScore(sum(s.precision for s in scores) / n, sum(s.recall for s in scores) / n,
                              sum(s.f1 for s in scores) / n)
    return out


def length_bucket_report(examples: Sequence[Example], predictions: Sequence[Sequence[int]],
                         edges: Sequence[int]) -> list[dict]:
    """Mean ROUGE-L F1 per source-length bucket [edges[i], edges[i+1])."""
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing with at least two values, got {edges}")
    rows = []
    for lo, hi in zip(edges, edges[1:]):
        f1s = [rouge_l(strip_special(p), strip_special(ex.target)).f1
               for ex, p in zip(examples, predictions) if lo <= len(ex.source) < hi]
        rows.append({"bucket_lo": lo, "bucket_hi": hi, "count": len(f1s),
                     "rouge_l_f1": float(np.mean(f1s)) if f1s else 0.0})
    return rows


def needle_recall(examples: Sequence[Example], predictions: Sequence[Sequence[int]],
                  region: tuple[float, float] = (0.0, 1.0)) -> tuple[float, int]:
    """Fraction of needles whose relative position lies in ``region`` that appear in the prediction."""
    hit = total = 0
    lo, hi = region
    for ex, pred in zip(examples, predictions):
        got = set(strip_special(pred))
        L = len(ex.source)
        for pos, tok in zip(ex.meta.get("needle_positions", []), ex.meta.get("needle_tokens", [])):
            if lo * L <= pos < hi * L:
                total += 1
                hit += tok in got
    return (hit / total if total else 0.0), total


def _profile_example(L: int, target_len: int, vocab: int, seed: int) -> Example:
    rng = substream(seed, f"profile.{L}")
    src = rng.integers(5 if vocab > 5 else 0, vocab, size=L).tolist()
    tgt = [BOS, *rng.integers(5 if vocab > 5 else 0, vocab, size=target_len - 1).tolist(), EOS]
    return Example(src, tgt)


def profile_memory_time(model_config: ModelConfig, trainers: Sequence[str], lengths: Sequence[int],
                        chunk_size: int, target_len: int = 12, repeats: int = 3, seed: int = 0) -> list[dict]:
    """One training step per (length, trainer); ledger peak, best-of-``repeats`` wall time, encoder calls."""
    steps = {
        "cached": lambda p, ex: cached_step(p, ex, chunk_size),
        "retained": lambda p, ex: reference_step(p, ex, chunk_size),
        "full_attention": lambda p, ex: full_attention_step(p, ex),
    }
    unknown = set(trainers) - set(steps)
    if unknown:
        raise ValueError(f"unknown trainers {sorted(unknown)}; choose from {sorted(steps)}")
    params = init_params(model_config)
    rows = []
    for L in lengths:
        if L < 1:
            raise ValueError(f"lengths must be positive, got {L}")
        ex = _profile_example(L, target_len, model_config.vocab_size, seed)
        for name in trainers:
            row = {"L": L, "trainer": name}
            try:
                best, rep = float("inf"), None
                for _ in range(repeats):
                    params.zero_grads()
                    t0 = time.perf_counter()
                    rep = steps[name](params, ex)
                    best = min(best, (time.perf_counter() - t0) * 1000)
                row.update(ledger_peak=rep.ledger_peak, wall_ms=round(best, 3),
                           enc_calls=rep.encoder_forward_count, K=rep.plan.K if rep.plan else 0)
            except ValueError as e:
                row.update(ledger_peak=FAILED, wall_ms=FAILED, enc_calls=FAILED, error=str(e))
            rows.append(row)
    params.zero_grads()
    return rows


def write_csv(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
