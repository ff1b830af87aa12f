"""Sparse fine-tuning with kernelized low-rank adapters."""

from ._accel import BACKEND
from .adapter import (
    AdapterGrads,
    KernelizedAdapter,
    MemoryMeter,
    SparsifyResult,
    backward,
    export_merged,
    forward,
    merge,
    shrink,
    sparsify,
)
from .kernels import KernelGrad, KernelSpec, kernel_grad, kernel_value
from .numkit import RngStream, kth_smallest_abs, matmul, numeric_rank, randn
from .trainer import (
    AdamWState,
    Dataset,
    TinyModel,
    TrainConfig,
    adamw_step,
    cosine_lr,
    fit_matrix,
    load_csv_dataset,
    make_blobs,
    softmax_cross_entropy,
    train_classifier,
)

__version__ = "0.1.0"
