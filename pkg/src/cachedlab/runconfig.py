"""Flat ``key = value`` run configuration with command-line overrides.

Resolution order: built-in defaults, then the ``--config`` file, then flags.
Unknown keys are rejected. The resolved configuration is written next to a
run's outputs and can be fed back with ``--config`` to reproduce it.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class UsageError(ValueError):
    """Bad configuration or flags; maps to exit code 2."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _str_list(text: str) -> list[str]:
    return [x for x in text.replace(" ", "").split(",") if x]


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""
    hidden: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path, keys: dict[str, Key]) -> dict[str, Any]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in keys:
            raise UsageError(f"{path}:{lineno}: unknown key {name!r}")
        try:
            out[name] = keys[name].parse(value)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: bad value for {name}: {e}") from None
    return out


def add_keys(parser: argparse.ArgumentParser, keys: dict[str, Key]) -> None:
    parser.add_argument("--config", help="key = value file; flags override it")
    for key in keys.values():
        if key.hidden:
            helptext = argparse.SUPPRESS
        elif key.default == "" or "default" in key.help:
            helptext = key.help
        else:
            helptext = f"{key.help} (default: {format_value(key.default)})"
        parser.add_argument(key.flag, dest=key.name, type=str, default=None, help=helptext)


def resolve(args: argparse.Namespace, keys: dict[str, Key]) -> dict[str, Any]:
    cfg = {k.name: k.default for k in keys.values()}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config, keys))
    for key in keys.values():
        raw = getattr(args, key.name, None)
        if raw is None:
            continue
        try:
            cfg[key.name] = key.parse(raw)
        except ValueError as e:
            raise UsageError(f"bad value for {key.flag}: {e}") from None
    return cfg


def write_resolved(path, command: str, cfg: dict[str, Any]) -> None:
    lines = [f"# resolved configuration for '{command}'"]
    lines += [f"{k} = {format_value(v)}" for k, v in cfg.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def keyset(*groups: list[Key]) -> dict[str, Key]:
    out: dict[str, Key] = {}
    for group in groups:
        for key in group:
            out[key.name] = key
    return out


def model_keys(**defaults) -> list[Key]:
    base = dict(vocab_size=64, d_model=32, heads=2, enc_layers=2, dec_layers=2, context_size=1024,
                tie_embeddings=False)
    base.update(defaults)
    return [
        Key("vocab_size", int, base["vocab_size"], "vocabulary size V"),
        Key("d_model", int, base["d_model"], "model width"),
        Key("heads", int, base["heads"], "attention heads"),
        Key("enc_layers", int, base["enc_layers"], "encoder layers"),
        Key("dec_layers", int, base["dec_layers"], "decoder layers"),
        Key("context_size", int, base["context_size"], "backbone capacity (positional table rows)"),
        Key("tie_embeddings", _bool, base["tie_embeddings"], "share token embedding and output projection"),
    ]


COMMON = [
    Key("seed", int, 0, "master seed; all randomness derives from it"),
    Key("precision", str, "float64", "float64 or float32"),
]

GEN_DATA = keyset(COMMON[:1], [
    Key("task", str, "needle", "needle or copy"),
    Key("n", int, 100, "number of examples"),
    Key("len", int, 256, "document length L (maximum when min_len is set)"),
    Key("min_len", int, 0, "draw lengths uniformly from [min_len, len]; 0 = fixed length"),
    Key("needles", int, 4, "needles per document (needle task)"),
    Key("n_filler", int, 1, "number of filler token ids (needle task)"),
    Key("span", int, 8, "head/tail span (copy task)"),
    Key("vocab_size", int, 64, "vocabulary size V"),
    Key("out_dir", str, "", "output directory (required)"),
])

TRAIN = keyset(COMMON, model_keys(vocab_size=0), [
    Key("dataset", str, "", "training JSONL (required)"),
    Key("vocab", str, "", "vocabulary file (default: vocab.txt next to the dataset)"),
    Key("out_dir", str, "", "output directory (required)"),
    Key("learning_rate", float, 1e-5, "peak learning rate"),
    Key("adam_beta1", float, 0.9, "AdamW beta1"),
    Key("adam_beta2", float, 0.99, "AdamW beta2"),
    Key("adam_epsilon", float, 1e-8, "AdamW epsilon"),
    Key("weight_decay", float, 0.0, "decoupled weight decay"),
    Key("batch_size", int, 1, "micro-batch size"),
    Key("effective_batch_size", int, 2, "examples averaged per optimizer step"),
    Key("warmup_strategy", str, "linear", "learning-rate warmup shape"),
    Key("warmup_steps", int, 1024, "warmup length in optimizer steps"),
    Key("chunk_size", int, 1024, "chunk size C"),
    Key("max_steps", int, 1000, "optimizer steps"),
    Key("trainer", str, "cached", "cached or reference"),
    Key("truncate", int, 0, "truncate sources to this many tokens; 0 = full documents"),
    Key("checkpoint_every", int, 0, "write an intermediate checkpoint every N steps; 0 = final only"),
    Key("workers", int, 1, "threads for chunk encoding and recompute"),
])

GRAD_CHECK = keyset(COMMON, model_keys(vocab_size=37, d_model=16, context_size=0), [
    Key("len", int, 96, "document length L"),
    Key("chunk_size", int, 32, "chunk size C"),
    Key("chunks", int, 0, "force K chunks (sets C = ceil(L/K)); 0 = use chunk_size"),
    Key("target_len", int, 12, "target length M including bos/eos"),
    Key("fd_coords", int, 50, "finite-difference coordinates; 0 = skip"),
    Key("eps", float, 1e-5, "finite-difference step"),
    Key("tolerance", float, 1e-9, "max relative difference, cached vs reference"),
    Key("fd_tolerance", float, 1e-5, "max relative error, reference vs finite differences"),
    Key("matrix", _bool, False, "run the full d x layers x K x remainder matrix"),
    Key("workers", int, 1, "threads for chunk encoding and recompute"),
    Key("out_dir", str, "", "optional directory for grad_check.csv"),
    Key("corrupt_seed", int, -1, "", hidden=True),
])

EVAL = keyset(COMMON[:1], [
    Key("checkpoint", str, "", "checkpoint file (required)"),
    Key("dataset", str, "", "evaluation JSONL (required)"),
    Key("vocab", str, "", "vocabulary file (default: vocab.txt next to the dataset)"),
    Key("out_dir", str, "", "output directory (required)"),
    Key("beam", int, 0, "beam width; 0 = greedy"),
    Key("max_len", int, 0, "decode length limit; 0 = longest reference"),
    Key("chunk_size", int, 0, "chunk size; 0 = the checkpoint's training value"),
    Key("truncate", int, -1, "truncate sources; -1 = the checkpoint's training value, 0 = none"),
    Key("bins", int, 10, "alignment histogram bins"),
    Key("bucket_edges", _int_list, [], "length-bucket edges; empty = one bucket over all lengths"),
])

PROFILE = keyset(COMMON, model_keys(vocab_size=37, d_model=16, context_size=256), [
    Key("lengths", _int_list, [64, 128, 256], "document lengths"),
    Key("trainers", _str_list, ["cached", "retained", "full_attention"], "trainers to profile"),
    Key("chunk_size", int, 32, "chunk size C"),
    Key("target_len", int, 12, "target length M"),
    Key("repeats", int, 3, "timing repeats (best is reported)"),
    Key("out_dir", str, "", "output directory (required)"),
])
