"""Synthetic long-document summarization tasks, vocabulary and JSONL I/O."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import substream

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "<sep>")
N_RESERVED = len(RESERVED_TOKENS)


class DatasetError(ValueError):
    pass


@dataclass
class Example:
    source: list[int]
    target: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.source) < 1:
            raise DatasetError("example source is empty")
        if len(self.target) < 1:
            raise DatasetError("example target is empty")

    def validate(self, vocab_size: int) -> None:
        for name, seq in (("source", self.source), ("target", self.target)):
            if min(seq) < 0 or max(seq) >= vocab_size:
                raise DatasetError(f"{name} has a token id outside [0, {vocab_size})")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        """``tokens``: the non-reserved tokens in id order."""
        self.itos = list(RESERVED_TOKENS) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DatasetError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text: str, where: str = "", strict: bool = False) -> list[int]:
        ids = []
        for tok in text.split():
            i = self.stoi.get(tok)
            if i is None:
                if strict:
                    raise DatasetError(f"token {tok!r} is not in the vocabulary")
                log.warning("unknown token %r%s mapped to <unk>", tok, f" ({where})" if where else "")
                i = UNK
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.itos[N_RESERVED:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocab":
        """Generator-native vocabulary: id i >= reserved is the token ``w{i}``."""
        return cls([f"w{i}" for i in range(N_RESERVED, vocab_size)])


def build_vocab(paths: Sequence) -> Vocab:
    """Tokens ordered by (frequency desc, token asc) after the reserved ids.

    Reads JSONL datasets (source and target fields) or plain text files.
    """
    counts: Counter = Counter()
    for path in paths:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if str(path).endswith(".jsonl"):
                rec = json.loads(line)
                text = f"{rec.get('source', '')} {rec.get('target', '')}"
            else:
                text = line
            counts.update(t for t in text.split() if t not in RESERVED_TOKENS)
    if not counts:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ordered)


def _check_vocab(V: int, needed: int, what: str) -> None:
    if V - N_RESERVED < needed:
        raise DatasetError(f"{what} needs {needed} non-reserved ids but vocab size {V} leaves {V - N_RESERVED}")


def needle_pools(V: int, n_needles: int, n_filler: int = 1) -> tuple[np.ndarray, list[np.ndarray]]:
    """Filler ids and one marker-id group per needle rank."""
    free = V - N_RESERVED
    n_filler = min(max(1, n_filler), free - n_needles)
    filler = np.arange(N_RESERVED, N_RESERVED + n_filler)
    markers = np.arange(N_RESERVED + n_filler, V)
    groups = np.array_split(markers, n_needles) if n_needles else []
    return filler, groups


def gen_needle_task(seed: int, n_examples: int, L: int, n_needles: int, V: int,
                    min_len: int | None = None, n_filler: int = 1) -> list[Example]:
    """Filler documents with ``n_needles`` unique markers planted uniformly.

    The target lists the markers in document order, separated by ``<sep>``.
    The k-th marker in document order is drawn from the k-th marker group, so
    a model can tell the order without knowing which chunk a marker came
    from. Lengths are drawn uniformly from [min_len, L] when min_len is given.
    """
    if n_needles < 0 or n_examples < 0:
        raise DatasetError("counts must be nonnegative")
    if n_needles >= V - N_RESERVED:
        raise DatasetError(f"{n_needles} needles do not fit in vocab size {V} "
                           f"({V - N_RESERVED} non-reserved ids, at least one is filler)")
    lo = L if min_len is None else min_len
    if lo < max(1, n_needles) or lo > L:
        raise DatasetError(f"document length must be in [max(1, needles)={max(1, n_needles)}, L], got [{lo}, {L}]")
    rng = substream(seed, "data.needle")
    filler, groups = needle_pools(V, n_needles, n_filler)
    out = []
    for _ in range(n_examples):
        length = int(rng.integers(lo, L + 1)) if lo < L else L
        source = filler[rng.integers(0, filler.size, size=length)]
        positions = np.sort(rng.choice(length, size=n_needles, replace=False))
        tokens = [int(g[rng.integers(0, g.size)]) for g in groups]
        source[positions] = tokens
        target = [BOS]
        for k, t in enumerate(tokens):
            if k:
                target.append(SEP)
            target.append(t)
        target.append(EOS)
        meta = {"needle_positions": [int(p) for p in positions], "needle_tokens": tokens}
        out.append(Example([int(t) for t in source], target, meta))
    return out


def gen_copy_task(seed: int, n_examples: int, L: int, span: int, V: int) -> list[Example]:
    """Target is the first ``span`` and the last ``span`` source tokens."""
    if span < 1 or 2 * span > L:
        raise DatasetError(f"span must satisfy 1 <= span and 2*span <= L, got span={span}, L={L}")
    if n_examples < 0:
        raise DatasetError("counts must be nonnegative")
    _check_vocab(V, 1, "copy task")
    rng = substream(seed, "data.copy")
    out = []
    for _ in range(n_examples):
        source = [int(t) for t in rng.integers(N_RESERVED, V, size=L)]
        target = [BOS, *source[:span], *source[L - span:], EOS]
        out.append(Example(source, target, {"span": span}))
    return out


def write_jsonl(path, examples: Sequence[Example], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {"source": vocab.decode(ex.source), "target": vocab.decode(ex.target), "meta": ex.meta}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path, vocab: Vocab, strict: bool = False) -> list[Example]:
    """Parse a dataset; unknown tokens become <unk> with a warning, or fail when ``strict``."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            for key in ("source", "target"):
                if not isinstance(rec.get(key), str):
                    raise DatasetError(f"{path}:{lineno}: missing or non-string {key!r}")
            where = f"{path}:{lineno}"
            try:
                ex = Example(vocab.encode(rec["source"], where, strict), vocab.encode(rec["target"], where, strict),
                             rec.get("meta") or {})
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            out.append(ex)
    return out
