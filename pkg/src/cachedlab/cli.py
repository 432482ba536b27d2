"""``cachedlab`` command-line entry point.

Subcommands: gen-data, train, grad-check, eval, profile. Exit codes: 0 on
success, 1 on runtime or I/O failure, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .data import DatasetError, Vocab, gen_copy_task, gen_needle_task, read_jsonl, write_jsonl
from .evaluation import (ALIGN_HEADER, LENGTH_HEADER, PROFILE_HEADER, AlignmentHistogram, align_summary_bins,
                         beam_decode, corpus_rouge, greedy_decode, length_bucket_report, needle_recall,
                         profile_memory_time, split_sentences, write_csv)
from .model import ModelConfig
from .runconfig import (EVAL, GEN_DATA, GRAD_CHECK, PROFILE, TRAIN, UsageError, add_keys, resolve,
                        write_resolved)
from .trainer import TrainConfig, train_loop, truncate_example
from .trainer.gradcheck import matrix_configs, run_grad_check

log = logging.getLogger("cachedlab")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
SCORES_HEADER = ("metric", "precision", "recall", "f1")
NEEDLE_HEADER = ("region_lo", "region_hi", "recall", "count")
GRAD_HEADER = ("d_model", "layers", "L", "C", "K", "max_rel", "max_rel_param", "bitwise",
               "enc_calls_cached", "enc_calls_reference", "fd_max_rel", "fd_param", "fd_coords", "passed")


class RunError(RuntimeError):
    """Runtime failure; maps to exit code 1."""


def _out_dir(cfg: dict, required: bool = True) -> Path | None:
    if not cfg["out_dir"]:
        if required:
            raise UsageError("--out-dir is required")
        return None
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RunError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    log.addHandler(handler)
    return handler


def _model_config(cfg: dict, vocab_size: int | None = None) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=vocab_size or cfg["vocab_size"], d_model=cfg["d_model"], heads=cfg["heads"],
                           enc_layers=cfg["enc_layers"], dec_layers=cfg["dec_layers"],
                           context_size=cfg["context_size"], tie_embeddings=cfg["tie_embeddings"],
                           seed=cfg["seed"], precision=cfg["precision"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def _vocab_path(cfg: dict) -> Path:
    return Path(cfg["vocab"]) if cfg["vocab"] else Path(cfg["dataset"]).parent / "vocab.txt"


def _load_data(cfg: dict):
    if not cfg["dataset"]:
        raise UsageError("--dataset is required")
    try:
        vocab = Vocab.load(_vocab_path(cfg))
        examples = read_jsonl(cfg["dataset"], vocab, strict=True)
    except OSError as e:
        raise RunError(f"cannot read {e.filename}: {e.strerror}") from None
    except DatasetError as e:
        raise RunError(str(e)) from None
    return vocab, examples


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(cfg: dict) -> int:
    out = _out_dir(cfg)
    try:
        if cfg["task"] == "needle":
            examples = gen_needle_task(cfg["seed"], cfg["n"], cfg["len"], cfg["needles"], cfg["vocab_size"],
                                       min_len=cfg["min_len"] or None, n_filler=cfg["n_filler"])
        elif cfg["task"] == "copy":
            examples = gen_copy_task(cfg["seed"], cfg["n"], cfg["len"], cfg["span"], cfg["vocab_size"])
        else:
            raise UsageError(f"unknown task {cfg['task']!r}; choose needle or copy")
    except DatasetError as e:
        raise UsageError(str(e)) from None
    vocab = Vocab.synthetic(cfg["vocab_size"])
    data_path = out / "data.jsonl"
    try:
        write_jsonl(data_path, examples, vocab)
        vocab.save(out / "vocab.txt")
        write_resolved(out / "resolved_config.txt", "gen-data", cfg)
    except OSError as e:
        raise RunError(f"cannot write {e.filename}: {e.strerror}") from None
    src = [len(e.source) for e in examples]
    tgt = [len(e.target) for e in examples]
    print(f"wrote {len(examples)} examples to {data_path}")
    if examples:
        print(f"source length: min {min(src)} mean {np.mean(src):.1f} max {max(src)}")
        print(f"target length: min {min(tgt)} mean {np.mean(tgt):.1f} max {max(tgt)}")
    print(f"vocab size: {len(vocab)}")
    print(f"sha256: {_digest(data_path)}")
    return 0


# ------------------------------------------------------------------- train

def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab, examples = _load_data(cfg)
    if not examples:
        raise RunError(f"dataset {cfg['dataset']} is empty")
    if cfg["vocab_size"] and cfg["vocab_size"] != len(vocab):
        raise RunError(f"vocab_size {cfg['vocab_size']} does not match the vocabulary file ({len(vocab)} tokens)")
    cfg = dict(cfg, vocab_size=len(vocab))
    mcfg = _model_config(cfg)
    try:
        tcfg = TrainConfig(**{k: cfg[k] for k in TrainConfig.__dataclass_fields__})
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_resolved(out / "resolved_config.txt", "train", cfg)
    handler = _attach_log(out)
    try:
        log.info("training %d steps on %d examples (trainer=%s, C=%d)", tcfg.max_steps, len(examples),
                 tcfg.trainer, tcfg.chunk_size)
        ckpt, metrics = train_loop(tcfg, examples, mcfg, out_dir=out)
        ckpt.save(out / "checkpoint.bin")
    except ValueError as e:
        raise RunError(str(e)) from None
    finally:
        log.removeHandler(handler)
        handler.close()
    last = metrics[-1]["loss"] if metrics else float("nan")
    print(f"final loss {last:.6f} after {tcfg.max_steps} steps; checkpoint {out / 'checkpoint.bin'}")
    return 0


# -------------------------------------------------------------- grad-check

def cmd_grad_check(cfg: dict) -> int:
    out = _out_dir(cfg, required=False)
    if cfg["matrix"]:
        runs = list(matrix_configs(cfg["seed"]))
    else:
        C = cfg["chunk_size"]
        if cfg["chunks"]:
            C = math.ceil(cfg["len"] / cfg["chunks"])
            if math.ceil(cfg["len"] / C) != cfg["chunks"]:
                raise UsageError(f"L={cfg['len']} cannot be split into exactly {cfg['chunks']} chunks")
        # context_size 0: just large enough for one chunk and the target
        cfg = dict(cfg, chunk_size=C, context_size=cfg["context_size"] or max(C, cfg["target_len"]))
        runs = [(_model_config(cfg), cfg["len"], C)]
    corrupt = cfg["corrupt_seed"] if cfg["corrupt_seed"] >= 0 else None
    results = []
    try:
        for mcfg, L, C in runs:
            r = run_grad_check(mcfg, L, C, target_len=cfg["target_len"], fd_coords=cfg["fd_coords"],
                               eps=cfg["eps"], tolerance=cfg["tolerance"], fd_tolerance=cfg["fd_tolerance"],
                               workers=cfg["workers"], corrupt_chunk=corrupt, seed=cfg["seed"])
            results.append(r)
            status = "PASS" if r.passed else "FAIL"
            eq = " bitwise-equal" if r.bitwise else ""
            print(f"{status} d={r.d_model} layers={r.layers} L={r.L} C={r.C} K={r.K}: "
                  f"cached vs reference max rel {r.max_rel:.3e} at {r.max_rel_param}{eq}; "
                  f"enc calls {r.enc_calls_cached}/{r.enc_calls_reference}; "
                  f"fd max rel {r.fd_max_rel:.3e} over {r.fd_coords} coords")
    except ValueError as e:
        raise UsageError(str(e)) from None
    if out is not None:
        write_csv(out / "grad_check.csv", GRAD_HEADER, [r.to_dict() for r in results])
        write_resolved(out / "resolved_config.txt", "grad-check", cfg)
    failed = [r for r in results if not r.passed]
    print(f"{'FAIL' if failed else 'PASS'}: {len(results) - len(failed)}/{len(results)} configurations passed")
    return 1 if failed else 0


# -------------------------------------------------------------------- eval

def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    try:
        ckpt = Checkpoint.load(cfg["checkpoint"])
    except OSError as e:
        raise RunError(f"cannot read checkpoint {cfg['checkpoint']}: {e.strerror}") from None
    except CheckpointError as e:
        raise RunError(f"{cfg['checkpoint']}: {e}") from None
    vocab, examples = _load_data(cfg)
    if len(vocab) != ckpt.model_config.vocab_size:
        raise RunError(f"vocabulary has {len(vocab)} tokens but the checkpoint expects {ckpt.model_config.vocab_size}")
    tcfg = ckpt.train_config
    chunk = cfg["chunk_size"] or (tcfg.chunk_size if tcfg else ckpt.model_config.context_size)
    trunc = cfg["truncate"] if cfg["truncate"] >= 0 else (tcfg.truncate if tcfg else 0)
    cap = ckpt.model_config.context_size
    max_len = cfg["max_len"] or min(cap, max((len(e.target) - 1 for e in examples), default=1))
    if cfg["beam"] < 0:
        raise UsageError("--beam must be >= 0")
    params = ckpt.to_params()
    resolved = dict(cfg, chunk_size=chunk, truncate=trunc, max_len=max_len)
    write_resolved(out / "resolved_config.txt", "eval", resolved)
    preds = []
    try:
        for ex in examples:
            src = truncate_example(ex, trunc).source
            if cfg["beam"]:
                preds.append(beam_decode(params, src, chunk, width=cfg["beam"], max_len=max_len))
            else:
                preds.append(greedy_decode(params, src, chunk, max_len))
    except ValueError as e:
        raise RunError(str(e)) from None
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as f:
        for ex, p in zip(examples, preds):
            f.write(json.dumps({"prediction": vocab.decode(p), "target": vocab.decode(ex.target)},
                               sort_keys=True) + "\n")
    scores = corpus_rouge(preds, [e.target for e in examples])
    write_csv(out / "scores.csv", SCORES_HEADER,
              [{"metric": k, "precision": s.precision, "recall": s.recall, "f1": s.f1} for k, s in scores.items()])
    lengths = [len(e.source) for e in examples]
    edges = cfg["bucket_edges"] or [min(lengths, default=0), max(lengths, default=0) + 1]
    try:
        write_csv(out / "length_report.csv", LENGTH_HEADER, length_bucket_report(examples, preds, edges))
    except ValueError as e:
        raise UsageError(str(e)) from None
    hist = AlignmentHistogram(cfg["bins"], [0] * cfg["bins"], 0)
    for ex, p in zip(examples, preds):
        if len(ex.source) >= cfg["bins"]:
            hist = hist.merge(align_summary_bins(ex.source, split_sentences(p), cfg["bins"]))
    write_csv(out / "alignment.csv", ALIGN_HEADER,
              [{"bin": i, "fraction": f} for i, f in enumerate(hist.fractions)])
    if any("needle_positions" in e.meta for e in examples):
        rows = []
        for lo, hi in ((0.0, 1.0), (0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)):
            rec, n = needle_recall(examples, preds, (lo, hi))
            rows.append({"region_lo": lo, "region_hi": hi, "recall": rec, "count": n})
        write_csv(out / "needle_recall.csv", NEEDLE_HEADER, rows)
        print(f"needle recall {rows[0]['recall']:.4f} (final quarter {rows[-1]['recall']:.4f})")
    for k, s in scores.items():
        print(f"{k}: P={s.precision:.4f} R={s.recall:.4f} F1={s.f1:.4f}")
    print("alignment: " + " ".join(f"{f:.3f}" for f in hist.fractions))
    return 0


# ----------------------------------------------------------------- profile

def cmd_profile(cfg: dict) -> int:
    out = _out_dir(cfg)
    mcfg = _model_config(cfg)
    try:
        rows = profile_memory_time(mcfg, cfg["trainers"], cfg["lengths"], cfg["chunk_size"],
                                   target_len=cfg["target_len"], repeats=cfg["repeats"], seed=cfg["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_csv(out / "profile.csv", PROFILE_HEADER, rows)
    write_resolved(out / "resolved_config.txt", "profile", cfg)
    for r in rows:
        print(",".join(str(r[h]) for h in PROFILE_HEADER) + (f"  ({r['error']})" if "error" in r else ""))
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, GEN_DATA, "generate a synthetic dataset"),
    "train": (cmd_train, TRAIN, "train a model"),
    "grad-check": (cmd_grad_check, GRAD_CHECK, "compare cached, reference and finite-difference gradients"),
    "eval": (cmd_eval, EVAL, "decode a dataset and score it"),
    "profile": (cmd_profile, PROFILE, "ledger-peak and wall-time sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cachedlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys, helptext) in COMMANDS.items():
        add_keys(sub.add_parser(name, help=helptext), keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    fn, keys, _ = COMMANDS[args.command]
    try:
        return fn(resolve(args, keys))
    except UsageError as e:
        print(f"cachedlab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (RunError, OSError) as e:
        print(f"cachedlab {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
