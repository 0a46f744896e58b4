from .gemv import (
    ExecutionReport,
    KernelConfig,
    KernelId,
    gemv_reference,
    gemv_rowquant_dense,
    gemv_rowquant_naive_sparse,
    gemv_zigzag_dense,
    gemv_zigzag_sequential,
    gemv_zigzag_sparse_balanced,
    gemv_zigzag_sparse_unbalanced,
    partition_indices,
    run_kernel,
)
from .gemv import reference_from_quant
from .autotune import AutotuneResult, CostWeights, autotune, default_grid, virtual_cost
