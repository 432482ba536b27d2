from .graph import (
    GraphError,
    Node,
    Tensor,
    backward,
    backward_from,
    grad_enabled,
    mark_retain,
    no_grad,
    parameter,
    sever,
    track,
    zero_grads,
)
from .ledger import LEDGER, LedgerError, LedgerScope, MemoryLedger, ledger_peak, ledger_scope
from .ops import (
    CATALOG,
    ShapeError,
    add,
    apply,
    concat_cols,
    concat_rows,
    cross_entropy,
    embedding,
    gelu,
    layer_norm_rows,
    matmul,
    mul,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)

__all__ = [
    "CATALOG", "GraphError", "LEDGER", "LedgerError", "LedgerScope", "MemoryLedger", "Node",
    "ShapeError", "Tensor", "add", "apply", "backward", "backward_from", "concat_cols",
    "concat_rows", "cross_entropy", "embedding", "gelu", "grad_enabled", "layer_norm_rows",
    "ledger_peak", "ledger_scope", "mark_retain", "matmul", "mul", "no_grad", "parameter",
    "scale", "sever", "slice_cols", "slice_rows", "softmax_rows", "track", "transpose",
    "zero_grads",
]
