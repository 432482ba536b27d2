"""Miniature pre-LN transformer encoder-decoder with fusion-in-decoder.

Each chunk is encoded as a standalone backbone input: self-attention never
crosses a chunk boundary and positions restart at 0. The decoder's
cross-attention sees every row of the concatenated encoder states.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .chunking import ChunkPlan
from .rng import substream

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    context_size: int = 1024
    tie_embeddings: bool = False
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "heads", "enc_layers", "dec_layers", "context_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, in canonical order."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (v, d),
        "positional_table": (cfg.context_size, d),
    }

    def attn(prefix):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, 4 * d)
        shapes[f"{prefix}.b1"] = (4 * d,)
        shapes[f"{prefix}.w2"] = (4 * d, d)
        shapes[f"{prefix}.b2"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.self_attn")
        ffn(f"enc.{i}.ffn")
        ln(f"enc.{i}.ln1")
        ln(f"enc.{i}.ln2")
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self_attn")
        attn(f"dec.{i}.cross_attn")
        ffn(f"dec.{i}.ffn")
        ln(f"dec.{i}.ln1")
        ln(f"dec.{i}.ln2")
        ln(f"dec.{i}.ln3")
    if not cfg.tie_embeddings:
        shapes["output_projection"] = (d, v)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    calls: Counter = field(default_factory=Counter)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        ad.zero_grads(self.tensors.values())

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad.copy() for k, t in self.tensors.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.tensors.items()}

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(cfg: ModelConfig) -> ModelParams:
    """normal(0, 0.02) weights and embeddings, zero biases and betas, unit gammas."""
    rng = substream(cfg.seed, "init")
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            vals = np.ones(shape)
        elif leaf in ("beta", "b1", "b2"):
            vals = np.zeros(shape)
        else:
            vals = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = ad.parameter(vals.astype(cfg.dtype), name=name)
    return ModelParams(cfg, tensors)


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    expected = parameter_shapes(cfg)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ValueError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    tensors = {}
    for name, shape in expected.items():
        arr = np.asarray(arrays[name])
        if arr.shape != shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != expected {shape}")
        tensors[name] = ad.parameter(arr.astype(cfg.dtype), name=name)
    return ModelParams(cfg, tensors)


@dataclass
class EncoderStates:
    H: Tensor
    plan: ChunkPlan
    cached_grad: np.ndarray | None = None

    def __post_init__(self):
        if self.H.shape[0] != self.plan.L:
            raise ValueError(f"H has {self.H.shape[0]} rows but plan covers {self.plan.L} tokens")


def _check_ids(ids: np.ndarray, vocab: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"{what}: token id out of range [0, {vocab})")


def _attention(p: ModelParams, prefix: str, xq: Tensor, xkv: Tensor, causal: bool) -> Tensor:
    cfg = p.config
    dh = cfg.d_model // cfg.heads
    q = ad.matmul(xq, p[f"{prefix}.w_q"])
    kt = ad.transpose(ad.matmul(xkv, p[f"{prefix}.w_k"]))
    v = ad.matmul(xkv, p[f"{prefix}.w_v"])
    mask = None
    if causal:
        m = xq.shape[0]
        mask = Tensor(np.triu(np.full((m, m), -np.inf, dtype=cfg.dtype), k=1))
    heads = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        if cfg.heads == 1:
            qh, kth, vh = q, kt, v
        else:
            qh = ad.slice_cols(q, lo, hi)
            kth = ad.slice_rows(kt, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, kth), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask)
        heads.append(ad.matmul(ad.softmax_rows(scores), vh))
    out = heads[0] if cfg.heads == 1 else ad.concat_cols(heads)
    return ad.matmul(out, p[f"{prefix}.w_o"])


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _ln(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm_rows(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def _embed(p: ModelParams, ids: np.ndarray) -> Tensor:
    tok = ad.embedding(p["token_embedding"], ids)
    pos = ad.embedding(p["positional_table"], np.arange(len(ids)))
    return ad.add(tok, pos)


def encode_chunk(params: ModelParams, tokens: Sequence[int]) -> Tensor:
    """Contextualize one chunk; returns a c x d hidden matrix."""
    cfg = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    c = ids.size
    if c < 1:
        raise ValueError("cannot encode an empty chunk")
    if c > cfg.context_size:
        raise ValueError(f"chunk of {c} tokens exceeds backbone capacity {cfg.context_size}")
    _check_ids(ids, cfg.vocab_size, "encode_chunk")
    params.calls["encoder_forward"] += 1
    x = _embed(params, ids)
    for i in range(cfg.enc_layers):
        x = ad.add(x, _self_attn(params, f"enc.{i}", x, causal=False))
        x = ad.add(x, _ffn(params, f"enc.{i}.ffn", _ln(params, f"enc.{i}.ln2", x)))
    return x


def _self_attn(p: ModelParams, layer: str, x: Tensor, causal: bool) -> Tensor:
    h = _ln(p, f"{layer}.ln1", x)
    return _attention(p, f"{layer}.self_attn", h, h, causal)


def encode_document(params: ModelParams, tokens: Sequence[int], plan: ChunkPlan,
                    mode: str = "severed") -> EncoderStates:
    """Encode every span of ``plan`` and stack the results in span order.

    ``severed``: each chunk's output is cut from its graph before the next
    chunk runs, so only one chunk's activations are ever live.
    ``retained``: all chunk graphs stay live (end-to-end backprop baseline).
    """
    if mode not in ("severed", "retained"):
        raise ValueError(f"unknown encoding mode {mode!r}")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size != plan.L:
        raise ValueError(f"plan covers {plan.L} tokens but document has {ids.size}")
    chunks = []
    for s, e in plan.spans:
        h = encode_chunk(params, ids[s:e])
        chunks.append(ad.sever(h) if mode == "severed" else h)
        del h
    return EncoderStates(ad.concat_rows(chunks), plan)


def decode_logits(params: ModelParams, states: EncoderStates | None, target_prefix: Sequence[int]) -> Tensor:
    """Teacher-forced decoder pass; returns M x V logits."""
    if states is None or states.H is None:
        raise ValueError("decode_logits needs encoder states")
    return _decoder(params, states.H, np.asarray(target_prefix, dtype=np.int64))


def _decoder(params: ModelParams, memory: Tensor | None, ids: np.ndarray) -> Tensor:
    cfg = params.config
    m = ids.size
    if m < 1:
        raise ValueError("decoder prefix must contain at least one token")
    if m > cfg.context_size:
        raise ValueError(f"decoder prefix of {m} tokens exceeds capacity {cfg.context_size}")
    _check_ids(ids, cfg.vocab_size, "decode_logits")
    params.calls["decoder_forward"] += 1
    y = _embed(params, ids)
    for i in range(cfg.dec_layers):
        y = ad.add(y, _self_attn(params, f"dec.{i}", y, causal=True))
        if memory is not None:
            q = _ln(params, f"dec.{i}.ln2", y)
            y = ad.add(y, _attention(params, f"dec.{i}.cross_attn", q, memory, False))
        y = ad.add(y, _ffn(params, f"dec.{i}.ffn", _ln(params, f"dec.{i}.ln3", y)))
    if cfg.tie_embeddings:
        w_out = ad.transpose(params["token_embedding"])
    else:
        w_out = params["output_projection"]
    return ad.matmul(y, w_out)


def sequence_loss(logits: Tensor, targets: Sequence[int], pad_id: int = PAD_ID) -> Tensor:
    """Mean token cross-entropy over non-pad targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"{targets.size} targets for {logits.shape[0]} logit rows")
    if np.all(targets == pad_id):
        raise ValueError("every target position is padding")
    return ad.cross_entropy(logits, targets, ignore_index=pad_id)
