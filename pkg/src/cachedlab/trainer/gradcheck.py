"""Gradient checks: cached vs reference trainer, and reference vs finite differences."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from ..chunking import make_chunk_plan
from ..data import BOS, EOS, N_RESERVED, Example
from ..model import ModelConfig, ModelParams, init_params
from ..rng import substream
from .steps import cached_step, fd_gradient, max_relative_difference, reference_step

# FD coordinates are drawn among entries whose backward gradient is at least
# this large; below it the central-difference rounding floor (~1e-10 at
# eps=1e-5) dominates any relative comparison.
FD_GRAD_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    d_model: int
    layers: int
    L: int
    C: int
    K: int
    max_rel: float            # cached vs reference, worst parameter
    max_rel_param: str
    bitwise: bool
    enc_calls_cached: int
    enc_calls_reference: int
    fd_max_rel: float         # reference vs central differences over sampled coords
    fd_param: str
    fd_coords: int
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def toy_example(seed: int, vocab_size: int, L: int, target_len: int) -> Example:
    """Random source of length L and a bos/eos-framed target of ``target_len`` tokens."""
    if target_len < 2:
        raise ValueError("target_len must be >= 2 (bos and eos)")
    rng = substream(seed, "gradcheck.data")
    lo = N_RESERVED if vocab_size > N_RESERVED else 0
    src = rng.integers(lo, vocab_size, size=L).tolist()
    mid = rng.integers(lo, vocab_size, size=target_len - 2).tolist()
    return Example(src, [BOS, *mid, EOS])


def significant_coords(grads: dict[str, np.ndarray], n: int, rng: np.random.Generator,
                       floor: float = FD_GRAD_FLOOR) -> list[tuple[str, int]]:
    """Uniform draw of up to ``n`` coordinates with ``|grad| >= floor``."""
    pool = [(name, int(i)) for name, g in grads.items() for i in np.flatnonzero(np.abs(g.reshape(-1)) >= floor)]
    if not pool:
        return []
    pick = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in np.sort(pick)]


def fd_check(params: ModelParams, example: Example, chunk_size: int, ref_grads: dict[str, np.ndarray],
             n_coords: int, eps: float, seed: int) -> tuple[float, str, int]:
    """Worst relative error of ``ref_grads`` against central differences."""
    coords = significant_coords(ref_grads, n_coords, substream(seed, "gradcheck.coords"))
    if not coords:
        return 0.0, "", 0
    fd = fd_gradient(params, example, coords, eps, chunk_size)
    worst, where = 0.0, ""
    for (name, flat), approx in zip(coords, fd):
        exact = ref_grads[name].reshape(-1)[flat]
        rel = abs(approx - exact) / abs(exact)
        if rel > worst:
            worst, where = float(rel), f"{name}[{flat}]"
    return worst, where, len(coords)


def run_grad_check(model_config: ModelConfig, L: int, chunk_size: int, *, target_len: int = 12,
                   fd_coords: int = 50, eps: float = 1e-5, tolerance: float = 1e-9,
                   fd_tolerance: float = 1e-5, workers: int = 1, corrupt_chunk: int | None = None,
                   seed: int = 0) -> GradCheckResult:
    """Compare cached_step against reference_step (and reference against FD) on one toy example.

    ``corrupt_chunk`` perturbs the step-3 seed of that chunk; a negative control.
    """
    params = init_params(model_config)
    ex = toy_example(seed, model_config.vocab_size, L, target_len)
    plan = make_chunk_plan(L, chunk_size)
    hook = None
    if corrupt_chunk is not None:
        if not 0 <= corrupt_chunk < plan.K:
            raise ValueError(f"corrupt chunk {corrupt_chunk} outside [0, {plan.K})")

        def hook(k, g):
            if k == corrupt_chunk:
                g[0] += 1e-3 * (1.0 + np.abs(g[0]))
            return g

    params.zero_grads()
    ref = reference_step(params, ex, chunk_size)
    params.zero_grads()
    cac = cached_step(params, ex, chunk_size, workers=workers, seed_hook=hook)
    params.zero_grads()
    rel, where = max_relative_difference(cac.grads, ref.grads)
    bitwise = all(np.array_equal(cac.grads[k], ref.grads[k]) for k in ref.grads)
    fd_rel, fd_where, n_fd = (0.0, "", 0)
    if fd_coords > 0:
        fd_rel, fd_where, n_fd = fd_check(params, ex, chunk_size, ref.grads, fd_coords, eps, seed)
    ok = rel <= tolerance and fd_rel <= fd_tolerance and (plan.K > 1 or bitwise)
    ok = ok and cac.encoder_forward_count == 2 * plan.K and ref.encoder_forward_count == plan.K
    return GradCheckResult(model_config.d_model, model_config.enc_layers, L, chunk_size, plan.K, rel, where,
                           bitwise, cac.encoder_forward_count, ref.encoder_forward_count,
                           fd_rel, fd_where, n_fd, ok)


MATRIX_CHUNK = 16


def matrix_configs(seed: int = 0) -> Iterator[tuple[ModelConfig, int, int]]:
    """d in {8,16} x layers in {1,2} x K in {1,2,3,5} x (L divisible by C or not)."""
    C = MATRIX_CHUNK
    for d in (8, 16):
        for layers in (1, 2):
            for K in (1, 2, 3, 5):
                for divisible in (True, False):
                    L = K * C if divisible else K * C - 5
                    cfg = ModelConfig(vocab_size=37, d_model=d, heads=2, enc_layers=layers, dec_layers=layers,
                                      context_size=32, seed=seed)
                    yield cfg, L, C
