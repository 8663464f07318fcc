"""Sparse voxel grid storage, trilinear sampling and resampling.

Layout is row-major over (h, w, k) with k fastest.  Occupied voxels are
addressed through an occupancy mask; the i-th set bit (in linear order) owns
slot i of the dense value arrays.  Per-voxel SH coefficients are contiguous,
so a single slot pointer plus a fixed stride reaches every coefficient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import (DimensionMismatch, DimensionTooSmall, IndexOutOfRange, InvalidConfig,
                     NonFiniteInput, NonMonotonicIndices)

Scale = Union[Fraction, float, int, str]

ALLOWED_RESIZE = (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2), Fraction(4))


class Precision(enum.Enum):
    F32 = "f32"
    F16 = "f16"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is Precision.F32 else np.dtype("<f2")

    @classmethod
    def parse(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        return cls(str(value).lower())


def as_fraction(scale: Scale) -> Fraction:
    frac = Fraction(scale).limit_denominator(64)
    if frac <= 0:
        raise InvalidConfig(f"scale must be positive, got {scale!r}")
    return frac


@dataclass(frozen=True)
class GridDims:
    h: int
    w: int
    k: int
    c: int = 27

    def __post_init__(self):
        if min(self.h, self.w, self.k) < 2:
            raise DimensionTooSmall(f"spatial dims must be >= 2, got {self.spatial}")
        if self.c < 3 or self.c % 3:
            raise DimensionMismatch(f"channel count must be a positive multiple of 3, got {self.c}")
        if self.size >= 2**31:
            raise IndexOutOfRange(f"grid of {self.size} voxels exceeds the 32-bit index range")

    @property
    def spatial(self) -> Tuple[int, int, int]:
        return (self.h, self.w, self.k)

    @property
    def size(self) -> int:
        return self.h * self.w * self.k

    def with_spatial(self, shape: Sequence[int]) -> "GridDims":
        return GridDims(int(shape[0]), int(shape[1]), int(shape[2]), self.c)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class OccupancyMask:
    """Boolean occupancy over a (h, w, k) lattice.

    ``bits`` is kept as a read-only bool array; bit packing only happens at
    serialization time.
    """

    __slots__ = ("bits", "_slots")

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 3:
            raise DimensionMismatch(f"mask must be 3-D, got shape {bits.shape}")
        self.bits = _readonly(np.ascontiguousarray(bits).copy())
        self._slots = None

    @classmethod
    def dense(cls, shape: Sequence[int]) -> "OccupancyMask":
        return cls(np.ones(tuple(shape), dtype=bool))

    @classmethod
    def empty(cls, shape: Sequence[int]) -> "OccupancyMask":
        return cls(np.zeros(tuple(shape), dtype=bool))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def slot_grid(self) -> np.ndarray:
        """int32 grid holding each occupied voxel's storage slot, -1 elsewhere."""
        if self._slots is None:
            flat = self.bits.ravel()
            slots = np.full(flat.shape, -1, dtype=np.int32)
            slots[flat] = np.arange(np.count_nonzero(flat), dtype=np.int32)
            self._slots = _readonly(slots.reshape(self.shape))
        return self._slots

    def __eq__(self, other):
        if not isinstance(other, OccupancyMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))

    def __repr__(self):
        return f"OccupancyMask(shape={self.shape}, count={self.count})"


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    dims: GridDims
    mask: OccupancyMask
    density: np.ndarray
    color: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.mask.shape != self.dims.spatial:
            raise DimensionMismatch(f"mask {self.mask.shape} does not match dims {self.dims.spatial}")
        n = self.mask.count
        density = np.ascontiguousarray(self.density).reshape(-1)
        color = np.ascontiguousarray(self.color)
        if density.shape[0] != n or color.size != n * self.dims.c:
            raise DimensionMismatch(
                f"value arrays ({density.size}, {color.size}) do not match popcount {n} x C={self.dims.c}")
        color = color.reshape(n, self.dims.c)
        if not (np.all(np.isfinite(density)) and np.all(np.isfinite(color))):
            raise NonFiniteInput("grid values must be finite")
        object.__setattr__(self, "density", _readonly(density.copy()))
        object.__setattr__(self, "color", _readonly(color.copy()))

    @classmethod
    def from_dense(cls, density: np.ndarray, color: np.ndarray, mask: OccupancyMask | None = None,
                   dtype=np.float32) -> "VoxelGrid":
        density = np.asarray(density)
        color = np.asarray(color)
        if color.shape[:3] != density.shape:
            raise DimensionMismatch(f"density {density.shape} vs color {color.shape}")
        dims = GridDims(*density.shape, color.shape[3])
        if mask is None:
            mask = OccupancyMask.dense(density.shape)
        return cls(dims, mask, density[mask.bits].astype(dtype), color[mask.bits].astype(dtype))

    @property
    def occupied(self) -> int:
        return self.density.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.dims.c // 3))) - 1

    def dense_density(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros(self.dims.spatial, dtype=dtype)
        out[self.mask.bits] = self.density
        return out

    def dense_color(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros(self.dims.spatial + (self.dims.c,), dtype=dtype)
        out[self.mask.bits] = self.color
        return out

    def kernel_arrays(self):
        """(slot grid, float32 density, float32 color) laid out for the render kernels."""
        if "kernel" not in self._cache:
            self._cache["kernel"] = (
                self.mask.slot_grid(),
                np.ascontiguousarray(self.density, dtype=np.float32),
                np.ascontiguousarray(self.color, dtype=np.float32),
            )
        return self._cache["kernel"]

    def cast(self, precision: Precision) -> "VoxelGrid":
        dt = Precision.parse(precision).dtype
        return VoxelGrid(self.dims, self.mask, self.density.astype(dt), self.color.astype(dt))

    def equals(self, other: "VoxelGrid") -> bool:
        """Bitwise equality of dims, mask and value arrays (including dtype)."""
        return (
            self.dims == other.dims
            and self.mask == other.mask
            and self.density.dtype == other.density.dtype
            and self.color.dtype == other.color.dtype
            and self.density.tobytes() == other.density.tobytes()
            and self.color.tobytes() == other.color.tobytes()
        )


def trilinear_corners(p: Sequence[float], shape: Sequence[int]):
    """Clamped corner indices (8, 3) and weights (8,) for a point in voxel coordinates.

    Corner order is (dx, dy, dz) binary counting with dz fastest.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, np.asarray(shape, dtype=np.float64) - 1.0)
    i0 = np.minimum(np.floor(p).astype(np.int64), np.asarray(shape) - 2)
    f = p - i0
    corners = np.empty((8, 3), dtype=np.int64)
    weights = np.empty(8, dtype=np.float64)
    for n in range(8):
        d = ((n >> 2) & 1, (n >> 1) & 1, n & 1)
        corners[n] = i0 + d
        weights[n] = ((f[0] if d[0] else 1.0 - f[0])
                      * (f[1] if d[1] else 1.0 - f[1])
                      * (f[2] if d[2] else 1.0 - f[2]))
    return corners, weights


def trilinear_sample(grid: VoxelGrid, p: Sequence[float]) -> Tuple[float, np.ndarray]:
    """Interpolated (density, color) at ``p``; unoccupied corners read as zero."""
    corners, weights = trilinear_corners(p, grid.dims.spatial)
    slots = grid.mask.slot_grid()[corners[:, 0], corners[:, 1], corners[:, 2]]
    sigma = 0.0
    color = np.zeros(grid.dims.c, dtype=np.float64)
    for slot, w in zip(slots, weights):
        if slot >= 0:
            sigma += w * float(grid.density[slot])
            color += w * grid.color[slot].astype(np.float64)
    return sigma, color


def resized_shape(shape: Sequence[int], scale: Scale) -> Tuple[int, ...]:
    s = as_fraction(scale)
    return tuple(int(math.ceil(n * s)) for n in shape)


def _resize_axis(arr: np.ndarray, axis: int, scale: Fraction, out_len: int) -> np.ndarray:
    n = arr.shape[axis]
    i = np.arange(out_len, dtype=np.float64)
    src = np.clip((i + 0.5) * scale.denominator / scale.numerator - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    bshape = [1] * arr.ndim
    bshape[axis] = out_len
    # a + (b - a) * f keeps constants exact and makes f == 0 an exact copy
    return a + (b - a) * f.reshape(bshape)


def resize_dense(arr: np.ndarray, scale: Scale, out_shape: Sequence[int] | None = None) -> np.ndarray:
    """Separable trilinear resize of the three leading axes, half-pixel-center aligned.

    Destination index ``i`` reads source coordinate ``(i + 0.5) / scale - 0.5``
    (clamped).  ``out_shape`` crops or extends the destination; by default it
    is ``ceil(n * scale)`` per axis.
    """
    s = as_fraction(scale)
    if out_shape is None:
        out_shape = resized_shape(arr.shape[:3], s)
    out_shape = tuple(int(n) for n in out_shape)
    if min(out_shape) < 2:
        raise DimensionTooSmall(f"destination dims {out_shape} below 2")
    if s == 1 and out_shape == tuple(arr.shape[:3]):
        return np.array(arr, dtype=np.float64)
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        out = _resize_axis(out, axis, s, out_shape[axis])
    return out


def trilinear_resize(grid: VoxelGrid, scale: Scale) -> VoxelGrid:
    """Resample density and every color channel; the result has a dense mask."""
    s = as_fraction(scale)
    if s not in ALLOWED_RESIZE:
        raise InvalidConfig(f"unsupported resize factor {s}")
    density = resize_dense(grid.dense_density(np.float64), s)
    color = resize_dense(grid.dense_color(np.float64), s)
    return VoxelGrid.from_dense(density, color)


def sparsify(grid: VoxelGrid, reference_mask: OccupancyMask) -> VoxelGrid:
    if reference_mask.shape != grid.dims.spatial:
        raise DimensionMismatch(f"mask {reference_mask.shape} vs grid {grid.dims.spatial}")
    if reference_mask == grid.mask:
        return VoxelGrid(grid.dims, reference_mask, grid.density, grid.color)
    bits = reference_mask.bits
    density = grid.dense_density(grid.density.dtype)[bits]
    color = grid.dense_color(grid.color.dtype)[bits]
    return VoxelGrid(grid.dims, reference_mask, density, color)


def coarsen_mask(mask: OccupancyMask, scale: Scale) -> OccupancyMask:
    """OR-reduce blocks of ``1/scale`` voxels; the coarse shape is ``ceil(n * scale)``."""
    s = as_fraction(scale)
    if s == 1:
        return mask
    if s.numerator != 1 or s.denominator not in (2, 4):
        raise InvalidConfig(f"mask coarsening supports 1/2 and 1/4, got {s}")
    f = s.denominator
    coarse = resized_shape(mask.shape, s)
    padded = np.zeros(tuple(n * f for n in coarse), dtype=bool)
    h, w, k = mask.shape
    padded[:h, :w, :k] = mask.bits
    blocks = padded.reshape(coarse[0], f, coarse[1], f, coarse[2], f)
    return OccupancyMask(blocks.any(axis=(1, 3, 5)))


def mask_to_pointers(mask: OccupancyMask) -> np.ndarray:
    return np.flatnonzero(mask.bits.ravel()).astype(np.int64)


def pointers_to_mask(indices, shape: Sequence[int]) -> OccupancyMask:
    shape = tuple(int(n) for n in shape)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    total = shape[0] * shape[1] * shape[2]
    if idx.size:
        if idx[0] < 0 or idx[-1] >= total or idx.min() < 0 or idx.max() >= total:
            raise IndexOutOfRange(f"pointer outside [0, {total})")
        if np.any(np.diff(idx) <= 0):
            raise NonMonotonicIndices("pointers must be strictly increasing")
    bits = np.zeros(total, dtype=bool)
    bits[idx] = True
    return OccupancyMask(bits.reshape(shape))
