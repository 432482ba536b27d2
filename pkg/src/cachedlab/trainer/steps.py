"""Gradient computation for one example: CachED, full-graph reference, and finite differences."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..chunking import ChunkPlan, make_chunk_plan
from ..data import Example
from ..model import (
    EncoderStates,
    ModelParams,
    PAD_ID,
    decode_logits,
    encode_chunk,
    encode_document,
    sequence_loss,
)


@dataclass
class GradReport:
    loss: float
    grads: dict[str, np.ndarray]
    encoder_forward_count: int
    decoder_forward_count: int
    ledger_peak: int
    plan: ChunkPlan | None = None
    cached_grad: np.ndarray | None = None


def teacher_forcing(example: Example) -> tuple[np.ndarray, np.ndarray]:
    tgt = np.asarray(example.target, dtype=np.int64)
    if tgt.size < 2:
        raise ValueError(f"target needs at least 2 tokens (bos + one label), got {tgt.size}")
    return tgt[:-1], tgt[1:]


def _source(example: Example) -> np.ndarray:
    src = np.asarray(example.source, dtype=np.int64)
    if src.size < 1:
        raise ValueError("example source is empty")
    return src


def cached_step(params: ModelParams, example: Example, chunk_size: int, *,
                workers: int = 1, order: Sequence[int] | None = None,
                seed_hook: Callable[[int, np.ndarray], np.ndarray] | None = None) -> GradReport:
    """Accumulate dJ/dtheta into the parameter grads chunk by chunk.

    1. encode every chunk, severing each output so its graph is freed;
    2. decode over the concatenation H with H's gradient retained, backward;
    3. re-encode each chunk and backpropagate the matching row-slice of dJ/dH.

    ``order`` permutes the chunk order of step 3. ``seed_hook(k, G_k)`` may
    replace a seed slice; it exists only for negative-control tests.
    """
    src = _source(example)
    dec_in, labels = teacher_forcing(example)
    plan = make_chunk_plan(src.size, chunk_size)
    enc0, dec0 = params.calls["encoder_forward"], params.calls["decoder_forward"]
    with ad.ledger_scope("cached_step") as scope:
        # step 1
        if workers > 1:
            states = _encode_severed_parallel(params, src, plan, workers)
        else:
            states = encode_document(params, src, plan, mode="severed")
        # step 2
        H = ad.track(states.H, name="H")
        ad.mark_retain(H)
        loss = sequence_loss(decode_logits(params, EncoderStates(H, plan), dec_in), labels, PAD_ID)
        loss_value = float(loss.values)
        ad.backward(loss)
        del loss
        cached = H.grad
        cached.flags.writeable = False
        states.cached_grad = cached
        del H
        # step 3
        ks = list(range(plan.K)) if order is None else list(order)
        if sorted(ks) != list(range(plan.K)):
            raise ValueError(f"chunk order {ks} is not a permutation of range({plan.K})")
        if workers > 1:
            _recompute_parallel(params, src, plan, cached, ks, workers, seed_hook)
        else:
            for k in ks:
                _recompute_chunk(params, src, plan, cached, k, seed_hook)
    return GradReport(
        loss=loss_value,
        grads=params.grads(),
        encoder_forward_count=params.calls["encoder_forward"] - enc0,
        decoder_forward_count=params.calls["decoder_forward"] - dec0,
        ledger_peak=scope.peak,
        plan=plan,
        cached_grad=cached,
    )


def _seed_slice(plan, cached, k, seed_hook):
    s, e = plan.spans[k]
    seed = cached[s:e]
    return seed_hook(k, seed.copy()) if seed_hook is not None else seed


def _recompute_chunk(params, src, plan, cached, k, seed_hook) -> None:
    s, e = plan.spans[k]
    hk = encode_chunk(params, src[s:e])
    ad.backward_from(hk, _seed_slice(plan, cached, k, seed_hook))


def _encode_severed_parallel(params, src, plan, workers) -> EncoderStates:
    def one(span):
        s, e = span
        return ad.sever(encode_chunk(params, src[s:e]))

    with ThreadPoolExecutor(workers) as pool:
        chunks = list(pool.map(one, plan.spans))
    return EncoderStates(ad.concat_rows(chunks), plan)


def _recompute_parallel(params, src, plan, cached, ks, workers, seed_hook) -> None:
    # forwards run concurrently in groups; accumulation stays in the given order
    with ThreadPoolExecutor(workers) as pool:
        for g in range(0, len(ks), workers):
            group = ks[g:g + workers]
            outs = list(pool.map(lambda k: encode_chunk(params, src[slice(*plan.spans[k])]), group))
            for k, hk in zip(group, outs):
                ad.backward_from(hk, _seed_slice(plan, cached, k, seed_hook))
            del outs


def reference_step(params: ModelParams, example: Example, chunk_size: int) -> GradReport:
    """Ordinary backprop through the whole graph (all chunk graphs kept live)."""
    src = _source(example)
    dec_in, labels = teacher_forcing(example)
    plan = make_chunk_plan(src.size, chunk_size)
    enc0, dec0 = params.calls["encoder_forward"], params.calls["decoder_forward"]
    with ad.ledger_scope("reference_step") as scope:
        states = encode_document(params, src, plan, mode="retained")
        loss = sequence_loss(decode_logits(params, states, dec_in), labels, PAD_ID)
        loss_value = float(loss.values)
        ad.backward(loss)
        del loss, states
    return GradReport(
        loss=loss_value,
        grads=params.grads(),
        encoder_forward_count=params.calls["encoder_forward"] - enc0,
        decoder_forward_count=params.calls["decoder_forward"] - dec0,
        ledger_peak=scope.peak,
        plan=plan,
    )


def full_attention_step(params: ModelParams, example: Example) -> GradReport:
    """Unchunked baseline: one encoder call with self-attention over all L tokens."""
    src = _source(example)
    if src.size > params.config.context_size:
        raise ValueError(f"document of {src.size} tokens exceeds backbone capacity {params.config.context_size}")
    return reference_step(params, example, chunk_size=src.size)


def example_loss(params: ModelParams, example: Example, chunk_size: int) -> float:
    """Forward-only loss (no graph, no ledger charges)."""
    src = _source(example)
    dec_in, labels = teacher_forcing(example)
    with ad.no_grad():
        states = encode_document(params, src, make_chunk_plan(src.size, chunk_size), mode="severed")
        return float(sequence_loss(decode_logits(params, states, dec_in), labels, PAD_ID).values)


def fd_gradient(params: ModelParams, example: Example, coords: Sequence[tuple[str, int]],
                eps: float = 1e-5, chunk_size: int | None = None,
                loss_fn: Callable[[], float] | None = None) -> np.ndarray:
    """Central differences (J(theta+eps) - J(theta-eps)) / 2eps at each (name, flat index)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if loss_fn is None:
        C = chunk_size or len(example.source)
        loss_fn = lambda: example_loss(params, example, C)  # noqa: E731
    out = np.empty(len(coords))
    for i, (name, flat) in enumerate(coords):
        vals = params[name].values.reshape(-1)
        orig = vals[flat]
        vals[flat] = orig + eps
        up = loss_fn()
        vals[flat] = orig - eps
        down = loss_fn()
        vals[flat] = orig
        out[i] = (up - down) / (2 * eps)
    return out


def sample_coords(params: ModelParams, n: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Uniform draw of ``n`` distinct scalar coordinates across all parameters."""
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    bounds = np.cumsum(sizes)
    flat = rng.choice(int(bounds[-1]), size=min(n, int(bounds[-1])), replace=False)
    coords = []
    for f in np.sort(flat):
        j = int(np.searchsorted(bounds, f, side="right"))
        start = int(bounds[j - 1]) if j else 0
        coords.append((names[j], int(f - start)))
    return coords


def max_relative_difference(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> tuple[float, str]:
    """Largest per-parameter ``max|a-b| / max|b|`` and the parameter attaining it.

    A parameter whose reference gradient is identically zero scores 0 when the
    other side is also zero and infinity otherwise.
    """
    worst, where = -1.0, ""
    for name in b:
        diff = float(np.max(np.abs(a[name] - b[name])))
        ref = float(np.max(np.abs(b[name])))
        if ref == 0.0:
            rel = 0.0 if diff == 0.0 else float("inf")
        else:
            rel = diff / ref
        if rel > worst:
            worst, where = rel, name
    return max(worst, 0.0), where
