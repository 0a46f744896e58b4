"""Quantized GEMV with activation sparsity: zigzag superblock layout, load-balanced kernels."""

from .qformat import (
    Layout,
    QuantMatrix,
    QuantSuperblock,
    convert_layout,
    dequantize_matrix,
    dequantize_superblock,
    quantize_matrix,
    quantize_superblock,
)
from .sparsity import (
    ActiveIndexList,
    Ordering,
    SparsityThreshold,
    ThresholdMode,
    blelloch_exclusive_scan,
    build_mask,
    calibrate_grouped,
    calibrate_threshold,
    collect_indices_parallel,
    collect_indices_sequential,
)
from .engine import (
    ExecutionReport,
    KernelConfig,
    KernelId,
    autotune,
    gemv_reference,
    gemv_rowquant_dense,
    gemv_rowquant_naive_sparse,
    gemv_zigzag_dense,
    gemv_zigzag_sparse_balanced,
    gemv_zigzag_sparse_unbalanced,
    partition_indices,
)

__version__ = "0.1.0"
