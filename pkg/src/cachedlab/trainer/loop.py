from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from .. import checkpoint as ckpt_io  # module import: checkpoint imports trainer.config
from ..data import Example
from ..model import ModelConfig, ModelParams, init_params
from ..rng import substream
from .config import TrainConfig
from .optim import AdamState, adamw_step
from .steps import cached_step, reference_step

log = logging.getLogger(__name__)


def truncate_example(ex: Example, n: int) -> Example:
    if n <= 0 or len(ex.source) <= n:
        return ex
    return Example(ex.source[:n], ex.target, ex.meta)


def _order_stream(n: int, seed: int):
    rng = substream(seed, "order")
    while True:
        yield from rng.permutation(n).tolist()


def train_loop(config: TrainConfig, dataset: Sequence[Example], model_config: ModelConfig, *,
               out_dir=None, params: ModelParams | None = None,
               on_step: Callable[[dict], None] | None = None) -> tuple[ckpt_io.Checkpoint, list[dict]]:
    """Run ``config.max_steps`` optimizer steps and return the final checkpoint and metrics.

    Each optimizer step averages the gradients of ``effective_batch_size``
    examples (one ``cached_step`` each) before a single AdamW update.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if params is None:
        params = init_params(model_config)
    for ex in dataset:
        ex.validate(model_config.vocab_size)
    if config.truncate:
        lengths = [len(e.source) for e in dataset]
        log.info("truncating sources to %d tokens (effective L = %d, longest source %d)",
                 config.truncate, min(config.truncate, max(lengths)), max(lengths))
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w", encoding="utf-8")
    state = AdamState.zeros_like(params)
    order = _order_stream(len(dataset), config.seed)
    n_micro = config.accumulation
    metrics: list[dict] = []
    params.zero_grads()
    try:
        for step in range(1, config.max_steps + 1):
            t0 = time.perf_counter()
            total_loss, peak, enc_calls = 0.0, 0, 0
            for _ in range(n_micro):
                ex = truncate_example(dataset[next(order)], config.truncate)
                if config.trainer == "cached":
                    rep = cached_step(params, ex, config.chunk_size, workers=config.workers)
                else:
                    rep = reference_step(params, ex, config.chunk_size)
                total_loss += rep.loss
                peak = max(peak, rep.ledger_peak)
                enc_calls += rep.encoder_forward_count
            grads = {k: t.grad / n_micro for k, t in params.items()}
            lr = adamw_step(params, grads, state, step, config)
            params.zero_grads()
            ad.LEDGER.compact()
            rec = {"step": step, "loss": total_loss / n_micro, "lr": lr, "ledger_peak": peak,
                   "enc_calls": enc_calls, "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                ckpt_io.Checkpoint.from_model(params, config, state, step).save(out / f"checkpoint_step{step}.bin")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return ckpt_io.Checkpoint.from_model(params, config, state, config.max_steps), metrics

