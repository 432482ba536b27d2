import json
import logging
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binomtest, chisquare

from cachedlab.data import (BOS, EOS, N_RESERVED, SEP, UNK, DatasetError, Example, Vocab, build_vocab,
                            gen_copy_task, gen_needle_task, needle_pools, read_jsonl, write_jsonl)


def test_reserved_ids_distinct():
    v = Vocab.synthetic(10)
    assert [v.stoi[t] for t in ("<pad>", "<s>", "</s>", "<unk>", "<sep>")] == [0, 1, 2, 3, 4]
    assert len(v) == 10 and v.itos[5] == "w5"


# ----------------------------------------------------------- needle task

def test_zero_needles_target():
    for ex in gen_needle_task(0, 5, 20, 0, 16):
        assert ex.target == [BOS, EOS]


def test_needle_meta_matches_source():
    for ex in gen_needle_task(1, 50, 64, 3, 40):
        pos, tok = ex.meta["needle_positions"], ex.meta["needle_tokens"]
        assert pos == sorted(pos) and len(set(pos)) == 3
        assert [ex.source[p] for p in pos] == tok
        assert ex.target == [BOS, tok[0], SEP, tok[1], SEP, tok[2], EOS]
        others = [t for i, t in enumerate(ex.source) if i not in set(pos)]
        assert not set(others) & set(tok)  # markers occur only where planted
        assert len(set(tok)) == 3


def test_needle_groups_encode_rank():
    filler, groups = needle_pools(64, 4, n_filler=2)
    assert list(filler) == [5, 6]
    assert sum(g.size for g in groups) == 64 - 7
    for ex in gen_needle_task(2, 20, 50, 4, 64, n_filler=2):
        for k, t in enumerate(ex.meta["needle_tokens"]):
            assert t in set(groups[k].tolist())


def test_needle_positions_uniform_chi_square():
    L = 256
    examples = gen_needle_task(7, 1000, L, 1, 64)
    bins = Counter(ex.meta["needle_positions"][0] * 10 // L for ex in examples)
    counts = [bins[b] for b in range(10)]
    assert chisquare(counts).pvalue > 0.01


def test_needle_generator_pure():
    a = gen_needle_task(3, 10, 30, 2, 20)
    b = gen_needle_task(3, 10, 30, 2, 20)
    assert [(e.source, e.target, e.meta) for e in a] == [(e.source, e.target, e.meta) for e in b]
    c = gen_needle_task(4, 10, 30, 2, 20)
    assert [e.source for e in a] != [e.source for e in c]


def test_needle_variable_length():
    lengths = {len(e.source) for e in gen_needle_task(0, 200, 64, 2, 20, min_len=16)}
    assert min(lengths) >= 16 and max(lengths) <= 64 and len(lengths) > 10


@pytest.mark.parametrize("kw", [
    dict(n_needles=15, V=20),          # 15 non-reserved ids, none left for filler
    dict(n_needles=5, L=4, V=20),      # more needles than positions
    dict(n_needles=-1, V=20),
])
def test_needle_infeasible(kw):
    args = dict(seed=0, n_examples=3, L=32)
    args.update(kw)
    with pytest.raises(DatasetError):
        gen_needle_task(**args)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 5), st.integers(1, 80), st.integers(12, 60), st.integers(1, 4))
def test_needle_examples_valid(seed, n_needles, L, V, n_filler):
    if n_needles >= V - N_RESERVED or L < max(1, n_needles):
        with pytest.raises(DatasetError):
            gen_needle_task(seed, 2, L, n_needles, V, n_filler=n_filler)
        return
    for ex in gen_needle_task(seed, 2, L, n_needles, V, n_filler=n_filler):
        ex.validate(V)
        assert len(ex.source) == L and len(ex.target) == max(2, 2 * n_needles + 1)


# ------------------------------------------------------------- copy task

def test_copy_span1_len2():
    ex = gen_copy_task(0, 1, 2, 1, 20)[0]
    assert ex.target == [BOS, ex.source[0], ex.source[1], EOS]


def test_copy_tail_depends_only_on_last_chunk():
    L, C, span = 256, 32, 8
    for ex in gen_copy_task(5, 20, L, span, 40):
        assert ex.target[1 + span:-1] == ex.source[L - span:]
        assert ex.target[1:1 + span] == ex.source[:span]


def test_copy_truncated_guesser_at_chance():
    """Seeing only the first chunk, the best guess for a tail token is a coin flip over V - reserved ids."""
    L, C, span, V = 256, 32, 8, 40
    examples = gen_copy_task(9, 2000, L, span, V)
    hits = trials = 0
    for ex in examples:
        visible = ex.source[:C]
        guess = Counter(visible).most_common(1)[0][0]  # any function of the visible chunk
        hits += sum(t == guess for t in ex.target[1 + span:-1])
        trials += span
    p = 1 / (V - N_RESERVED)
    assert binomtest(hits, trials, p).pvalue > 0.01


def test_copy_invalid_span():
    with pytest.raises(DatasetError):
        gen_copy_task(0, 1, 10, 6, 20)
    with pytest.raises(DatasetError):
        gen_copy_task(0, 1, 10, 0, 20)


# ------------------------------------------------------------------ JSONL

def test_jsonl_round_trip(tmp_path):
    vocab = Vocab.synthetic(30)
    examples = gen_needle_task(0, 12, 40, 3, 30)
    path = tmp_path / "d.jsonl"
    write_jsonl(path, examples, vocab)
    back = read_jsonl(path, vocab)
    assert [(e.source, e.target, e.meta) for e in back] == [(e.source, e.target, e.meta) for e in examples]


def test_empty_file_gives_empty_set(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert read_jsonl(p, Vocab.synthetic(10)) == []


def test_missing_target_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"source": "w5", "target": "<s> </s>"}) + "\n" + json.dumps({"source": "w5"}) + "\n")
    with pytest.raises(DatasetError, match=r"bad.jsonl:2: .*target"):
        read_jsonl(p, Vocab.synthetic(10))


def test_malformed_json_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"source": "w5", "target": "w6"}\n{not json\n')
    with pytest.raises(DatasetError, match=r":2: malformed"):
        read_jsonl(p, Vocab.synthetic(10))


def test_unknown_token_becomes_unk_with_warning(tmp_path, caplog):
    p = tmp_path / "u.jsonl"
    p.write_text(json.dumps({"source": "w5 zebra", "target": "<s> w6 </s>"}) + "\n")
    with caplog.at_level(logging.WARNING):
        ex = read_jsonl(p, Vocab.synthetic(10))[0]
    assert ex.source == [5, UNK]
    assert "zebra" in caplog.text and "u.jsonl:1" in caplog.text
    with pytest.raises(DatasetError, match="zebra"):
        read_jsonl(p, Vocab.synthetic(10), strict=True)


def test_example_invariants():
    with pytest.raises(DatasetError):
        Example([], [1])
    with pytest.raises(DatasetError):
        Example([5], [])
    with pytest.raises(DatasetError):
        Example([5, 12], [1, 2]).validate(10)


# ------------------------------------------------------------------ vocab

def test_build_vocab_frequency_order(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("a a b\n")
    v = build_vocab([p])
    assert v.itos[N_RESERVED:] == ["a", "b"]


def test_build_vocab_tie_lexicographic(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("zeta beta alpha beta zeta\n")
    assert build_vocab([p]).itos[N_RESERVED:] == ["beta", "zeta", "alpha"]


def test_build_vocab_deterministic_and_jsonl(tmp_path):
    vocab = Vocab.synthetic(30)
    path = tmp_path / "d.jsonl"
    write_jsonl(path, gen_needle_task(0, 20, 30, 2, 30), vocab)
    a, b = build_vocab([path]), build_vocab([path])
    assert a == b
    assert "<s>" not in a.itos[N_RESERVED:]


def test_build_vocab_empty(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("\n\n")
    with pytest.raises(DatasetError, match="empty"):
        build_vocab([p])


def test_vocab_save_load(tmp_path):
    v = Vocab(["x", "y", "z"])
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text() == "x\ny\nz\n"
    assert Vocab.load(tmp_path / "v.txt") == v
    with pytest.raises(DatasetError, match="duplicate"):
        Vocab(["x", "x"])
