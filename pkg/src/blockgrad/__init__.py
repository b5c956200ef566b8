"""Blockwise adaptive gradient optimizers and a reproducible experiment harness."""

from blockgrad.core import (
    BiasVector,
    BlockPartition,
    ConvKernel,
    DenseWeight,
    ModelLayout,
    Rng,
    TensorSpec,
    block_norm_sq,
    partition_build,
    spd_solve,
)

__version__ = "0.1.0"
