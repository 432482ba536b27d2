from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..chunking import make_chunk_plan
from ..data import BOS, EOS
from ..model import ModelParams, _decoder, encode_document

LogProbFn = Callable[[tuple[int, ...]], np.ndarray]


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _memory(params: ModelParams, source: Sequence[int], chunk_size: int):
    src = np.asarray(source, dtype=np.int64)
    return encode_document(params, src, make_chunk_plan(src.size, chunk_size), mode="severed").H


def _check_len(params: ModelParams, max_len: int) -> None:
    if max_len < 1 or max_len > params.config.context_size:
        raise ValueError(f"max_len must be in [1, {params.config.context_size}], got {max_len}")


def greedy_decode(params: ModelParams, source: Sequence[int], chunk_size: int, max_len: int,
                  bos: int = BOS, eos: int = EOS) -> list[int]:
    """Argmax decoding (ties go to the lowest id); stops after eos or ``max_len`` tokens."""
    _check_len(params, max_len)
    with ad.no_grad():
        H = _memory(params, source, chunk_size)
        seq = [bos]
        for _ in range(max_len):
            logits = _decoder(params, H, np.asarray(seq)).values[-1]
            tok = int(np.argmax(logits))
            seq.append(tok)
            if tok == eos:
                break
    return seq[1:]


def beam_search(logprob_fn: LogProbFn, bos: int, eos: int, width: int, max_len: int) -> tuple[list[int], float]:
    """Length-normalized beam search over a next-token log-prob function.

    Each step keeps the ``width`` best expansions by cumulative log-prob (ties:
    lexicographically smaller continuation first); expansions ending in eos
    leave the beam. The result is the finished-or-truncated hypothesis with the
    best mean per-token log-prob.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, (bos,))]
    done: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        cands = []
        for score, seq in beams:
            lp = logprob_fn(seq)
            cands.extend((score + float(lp[t]), seq + (t,)) for t in range(lp.size))
        cands.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for score, seq in cands[:width]:
            (done if seq[-1] == eos else beams).append((score, seq))
        if not beams:
            break
    pool = done + beams
    best = max(pool, key=lambda c: (c[0] / (len(c[1]) - 1), tuple(-t for t in c[1])))
    return list(best[1][1:]), best[0] / (len(best[1]) - 1)


def model_logprob_fn(params: ModelParams, source: Sequence[int], chunk_size: int) -> LogProbFn:
    with ad.no_grad():
        H = _memory(params, source, chunk_size)

    def fn(prefix):
        with ad.no_grad():
            return _log_softmax(_decoder(params, H, np.asarray(prefix)).values[-1])
    return fn


def beam_decode(params: ModelParams, source: Sequence[int], chunk_size: int, width: int = 4,
                max_len: int = 32, bos: int = BOS, eos: int = EOS) -> list[int]:
    _check_len(params, max_len)
    seq, _ = beam_search(model_logprob_fn(params, source, chunk_size), bos, eos, width, max_len)
    return seq


def sequence_score(logprob_fn: LogProbFn, seq: Sequence[int], bos: int = BOS) -> float:
    """Mean per-token log-prob of ``seq`` (tokens after bos)."""
    prefix, total = (bos,), 0.0
    for t in seq:
        total += float(logprob_fn(prefix)[t])
        prefix += (t,)
    return total / len(seq)


def exhaustive_search(logprob_fn: LogProbFn, bos: int, eos: int, vocab_size: int,
                      max_len: int) -> tuple[list[int], float]:
    """Best length-normalized sequence by enumerating every eos-terminated or max-length sequence."""
    best: tuple[float, tuple[int, ...]] | None = None

    def visit(seq, score):
        nonlocal best
        lp = logprob_fn(seq)
        for t in range(vocab_size):
            s, nxt = score + float(lp[t]), seq + (t,)
            if t == eos or len(nxt) - 1 == max_len:
                norm = s / (len(nxt) - 1)
                if best is None or norm > best[0]:
                    best = (norm, nxt)
            else:
                visit(nxt, s)

    visit((bos,), 0.0)
    return list(best[1][1:]), best[0]
