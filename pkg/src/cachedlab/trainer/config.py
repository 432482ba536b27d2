from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1
    effective_batch_size: int = 2
    warmup_strategy: str = "linear"
    warmup_steps: int = 1024
    chunk_size: int = 1024
    max_steps: int = 1000
    seed: int = 0
    precision: str = "float64"
    trainer: str = "cached"
    truncate: int = 0
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.effective_batch_size % self.batch_size:
            raise ValueError("effective_batch_size must be a positive multiple of batch_size")
        if self.effective_batch_size < 1:
            raise ValueError("effective_batch_size must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if self.warmup_strategy != "linear":
            raise ValueError(f"only linear warmup is supported, got {self.warmup_strategy!r}")
        if self.chunk_size < 1 or self.max_steps < 0 or self.truncate < 0 or self.workers < 1:
            raise ValueError("chunk_size and workers must be positive; max_steps and truncate nonnegative")
        if self.trainer not in ("cached", "reference"):
            raise ValueError(f"trainer must be 'cached' or 'reference', got {self.trainer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def accumulation(self) -> int:
        return self.effective_batch_size

    def to_dict(self) -> dict:
        return asdict(self)
