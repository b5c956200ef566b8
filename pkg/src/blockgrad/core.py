"""Flat parameter storage, tensor layouts, block partitions, and the small
linear-algebra / RNG utilities everything else builds on.

Parameters and gradients are plain 1-D float64 numpy arrays of a fixed
dimension d.  A ModelLayout describes how named tensors (conv kernels,
dense weights, bias vectors) tile such a flat vector; a BlockPartition
groups the d coordinates into disjoint blocks that share one adaptive
stepsize.  Tensors are flattened row-major, so for a dense weight of shape
(d_in, d_out) the input rows are contiguous and the output columns are
strided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "ConvKernel",
    "DenseWeight",
    "BiasVector",
    "TensorSpec",
    "ModelLayout",
    "BlockPartition",
    "partition_build",
    "block_norm_sq",
    "spd_solve",
    "Rng",
]


# ---------------------------------------------------------------------------
# Tensor layout description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvKernel:
    """Convolution weight tensor of shape (c_out, c_in, h, w)."""

    c_out: int
    c_in: int
    h: int
    w: int

    @property
    def count(self) -> int:
        return self.c_out * self.c_in * self.h * self.w

    @property
    def dims(self):
        return (self.c_out, self.c_in, self.h, self.w)


@dataclass(frozen=True)
class DenseWeight:
    """Fully-connected weight matrix of shape (d_in, d_out)."""

    d_in: int
    d_out: int

    @property
    def count(self) -> int:
        return self.d_in * self.d_out

    @property
    def dims(self):
        return (self.d_in, self.d_out)


@dataclass(frozen=True)
class BiasVector:
    """Bias vector of length n."""

    n: int

    @property
    def count(self) -> int:
        return self.n

    @property
    def dims(self):
        return (self.n,)


TensorKind = Union[ConvKernel, DenseWeight, BiasVector]


@dataclass(frozen=True)
class TensorSpec:
    """One tensor inside a flat parameter vector: kind + [offset, offset+count)."""

    kind: TensorKind
    offset: int
    count: int

    def __post_init__(self):
        if any(s <= 0 for s in self.kind.dims):
            raise ValueError(f"zero-sized tensor: {self.kind}")
        if self.count != self.kind.count:
            raise ValueError(
                f"count {self.count} does not match shape product {self.kind.count}"
            )
        if self.offset < 0:
            raise ValueError("negative offset")


@dataclass(frozen=True)
class ModelLayout:
    """Ordered, contiguous tensor specs tiling [0, total_dim) exactly."""

    specs: tuple[TensorSpec, ...]
    total_dim: int

    def __post_init__(self):
        if not self.specs:
            raise ValueError("empty layout")
        pos = 0
        for spec in self.specs:
            if spec.offset != pos:
                raise ValueError(
                    f"specs not contiguous: expected offset {pos}, got {spec.offset}"
                )
            pos += spec.count
        if pos != self.total_dim:
            raise ValueError(f"total_dim {self.total_dim} != sum of counts {pos}")

    @classmethod
    def of(cls, kinds: Sequence[TensorKind]) -> "ModelLayout":
        """Build a layout from tensor kinds, assigning offsets in order."""
        specs = []
        pos = 0
        for kind in kinds:
            specs.append(TensorSpec(kind=kind, offset=pos, count=kind.count))
            pos += kind.count
        return cls(specs=tuple(specs), total_dim=pos)


# ---------------------------------------------------------------------------
# Block partitions
# ---------------------------------------------------------------------------

class BlockPartition:
    """Disjoint cover of [0, d) by B blocks, each a list of [start, end) ranges.

    Precomputes the coordinate -> block map so per-step block reductions are
    single vectorized passes (np.bincount / fancy indexing).
    """

    def __init__(self, blocks: Sequence[Sequence[tuple[int, int]]], d: int):
        if d <= 0:
            raise ValueError("dimension must be positive")
        if not blocks:
            raise ValueError("partition needs at least one block")
        coord_block = np.full(d, -1, dtype=np.int64)
        sizes = np.zeros(len(blocks), dtype=np.int64)
        for b, ranges in enumerate(blocks):
            if not ranges:
                raise ValueError(f"block {b} is empty")
            for start, end in ranges:
                if not (0 <= start < end <= d):
                    raise ValueError(f"range [{start}, {end}) out of [0, {d})")
                if np.any(coord_block[start:end] >= 0):
                    raise ValueError(f"block {b} overlaps an earlier block")
                coord_block[start:end] = b
                sizes[b] += end - start
        if np.any(coord_block < 0):
            missing = int(np.flatnonzero(coord_block < 0)[0])
            raise ValueError(f"coordinate {missing} not covered by any block")
        self.blocks = [list(map(tuple, ranges)) for ranges in blocks]
        self.d = d
        self.B = len(blocks)
        self.sizes = sizes
        self.coord_block = coord_block

    def indices(self, b: int) -> np.ndarray:
        """Sorted coordinate indices of block b."""
        if not 0 <= b < self.B:
            raise IndexError(f"block index {b} out of range [0, {self.B})")
        return np.flatnonzero(self.coord_block == b)

    def block_sums_sq(self, g: np.ndarray) -> np.ndarray:
        """Vector of squared 2-norms per block: [sum_{i in G_b} g_i^2]_b."""
        return np.bincount(self.coord_block, weights=g * g, minlength=self.B)

    def scatter(self, per_block: np.ndarray) -> np.ndarray:
        """Expand a length-B vector to length d by block membership."""
        return per_block[self.coord_block]

    # Convenience constructors used by the experiment harness.

    @classmethod
    def single(cls, d: int) -> "BlockPartition":
        return cls([[(0, d)]], d)

    @classmethod
    def coordinatewise(cls, d: int) -> "BlockPartition":
        return cls([[(i, i + 1)] for i in range(d)], d)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "BlockPartition":
        blocks = []
        pos = 0
        for size in sizes:
            if size <= 0:
                raise ValueError("block sizes must be positive")
            blocks.append([(pos, pos + size)])
            pos += size
        return cls(blocks, pos)


def _dense_blocks(spec: TensorSpec, strategy: str):
    kind = spec.kind
    d_in, d_out = kind.d_in, kind.d_out
    if strategy == "B1":
        return [[(spec.offset, spec.offset + spec.count)]]
    if strategy in ("B2", "B3"):
        # One block per output column; columns of a row-major (d_in, d_out)
        # matrix are strided single-element ranges.
        return [
            [(spec.offset + i * d_out + j, spec.offset + i * d_out + j + 1)
             for i in range(d_in)]
            for j in range(d_out)
        ]
    if strategy == "B4":
        return [
            [(spec.offset + i * d_out, spec.offset + (i + 1) * d_out)]
            for i in range(d_in)
        ]
    raise ValueError(f"unknown strategy {strategy!r}")


def _conv_blocks(spec: TensorSpec, strategy: str):
    kind = spec.kind
    c_out, c_in, h, w = kind.dims
    khw = h * w
    kin = c_in * khw
    if strategy == "B1":
        return [[(spec.offset, spec.offset + spec.count)]]
    if strategy == "B2":
        return [
            [(spec.offset + o * kin, spec.offset + (o + 1) * kin)]
            for o in range(c_out)
        ]
    if strategy == "B3":
        return [
            [(spec.offset + o * kin + i * khw, spec.offset + o * kin + (i + 1) * khw)]
            for o in range(c_out)
            for i in range(c_in)
        ]
    if strategy == "B4":
        # One block per input position (i, y, x); its members are strided
        # across output channels.
        return [
            [(spec.offset + o * kin + pos, spec.offset + o * kin + pos + 1)
             for o in range(c_out)]
            for pos in range(kin)
        ]
    raise ValueError(f"unknown strategy {strategy!r}")


def _bias_blocks(spec: TensorSpec, strategy: str):
    n = spec.kind.n
    if strategy in ("B1", "B4"):
        return [[(spec.offset, spec.offset + spec.count)]]
    if strategy in ("B2", "B3"):
        return [[(spec.offset + i, spec.offset + i + 1)] for i in range(n)]
    raise ValueError(f"unknown strategy {strategy!r}")


def partition_build(layout: ModelLayout, strategy: str) -> BlockPartition:
    """Build a block partition from a tensor layout.

    Strategies:
      B1 -- one block per tensor.
      B2 -- dense: per output column; conv: per output channel; bias: per element.
      B3 -- dense/bias as B2; conv: per (out, in) kernel.
      B4 -- dense: per input row; conv: per input position; bias: whole vector.
    """
    if strategy not in ("B1", "B2", "B3", "B4"):
        raise ValueError(f"unknown strategy {strategy!r}")
    blocks = []
    for spec in layout.specs:
        if isinstance(spec.kind, DenseWeight):
            blocks.extend(_dense_blocks(spec, strategy))
        elif isinstance(spec.kind, ConvKernel):
            blocks.extend(_conv_blocks(spec, strategy))
        elif isinstance(spec.kind, BiasVector):
            blocks.extend(_bias_blocks(spec, strategy))
        else:
            raise TypeError(f"unknown tensor kind {spec.kind!r}")
    return BlockPartition(blocks, layout.total_dim)


def block_norm_sq(g: np.ndarray, partition: BlockPartition, b: int) -> float:
    """Squared 2-norm of the block-b subvector of g."""
    idx = partition.indices(b)
    sub = g[idx]
    return float(sub @ sub)


# ---------------------------------------------------------------------------
# Dense linear algebra
# ---------------------------------------------------------------------------

def spd_solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs for symmetric positive definite A via Cholesky.

    One step of iterative refinement keeps the residual within
    1e-10 * (1 + ||rhs||_inf) on well-conditioned systems.
    """
    A = np.asarray(A, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    scale = max(1.0, float(np.abs(A).max()))
    if float(np.abs(A - A.T).max()) > 1e-12 * scale:
        raise ValueError("matrix not SPD: not symmetric")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix not SPD: non-positive pivot") from exc

    def solve(b):
        z = solve_triangular(L, b, lower=True)
        return solve_triangular(L.T, z, lower=False)

    x = solve(rhs)
    x = x + solve(rhs - A @ x)
    return x


# ---------------------------------------------------------------------------
# Deterministic random source
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Seedable deterministic random source.

    Uniform doubles come from PCG64; standard normals are produced by
    Box-Muller on the uniform stream, so the whole stream is a pure
    function of the seed.  Parallel work derives independent child
    streams via `child`, never by sharing one generator.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None):
        """Standard-normal draws (Box-Muller from the uniform stream)."""
        if size is None:
            return float(self.normal(1)[0])
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        pairs = (n + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log never hits 0
        ang = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(ang)
        z[1::2] = r * np.sin(ang)
        z = z[:n]
        return z.reshape(size) if not np.isscalar(size) else z

    def signs(self, size=None):
        """Uniform +-1 draws."""
        u = self._gen.random(size)
        return np.where(u < 0.5, -1.0, 1.0) if size is not None else (-1.0 if u < 0.5 else 1.0)

    def randint(self, n: int, size=None):
        """Uniform integers in [0, n)."""
        if size is None:
            return min(int(self._gen.random() * n), n - 1)
        u = self._gen.random(size)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def child(self, index: int) -> "Rng":
        """Independent stream derived deterministically from (seed, index)."""
        mixed = _splitmix64(_splitmix64(self.seed) ^ ((index + 1) * 0xD1B54A32D192ED03 & _MASK64))
        return Rng(mixed)
