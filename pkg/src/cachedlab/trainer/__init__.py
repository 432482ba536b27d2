from ..chunking import ChunkPlan, make_chunk_plan
from .steps import (
    GradReport,
    cached_step,
    example_loss,
    fd_gradient,
    full_attention_step,
    max_relative_difference,
    reference_step,
    sample_coords,
)
from .config import TrainConfig
from .loop import train_loop, truncate_example
from .optim import AdamState, adamw_step, lr_at
