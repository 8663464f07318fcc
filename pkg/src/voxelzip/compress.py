"""Non-uniform compression: importance scoring, top-p retention, dual-ratio downsampling.

Density and SH features are downsampled with separate ratios, re-sparsified
against an OR-coarsened occupancy mask, and cast to the storage precision.
The highest-importance voxels are kept verbatim (always float32) and written
back after restoration, after any Neural Codebook refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from . import _backend
from .cameras import probe_cameras
from .errors import DimensionMismatch, EmptyGrid, InvalidConfig, NoCameras
from .grid import (GridDims, OccupancyMask, Precision, VoxelGrid, as_fraction, coarsen_mask,
                   resize_dense, resized_shape)
from .render import Camera, MarchConfig, _run_tiles, ray_box

ALLOWED_SCALES = (Fraction(1, 4), Fraction(1, 2), Fraction(1))
DEFAULT_PROBE_CAMERAS = 20


@dataclass(frozen=True)
class CompressionConfig:
    scale_color: Fraction = Fraction(1, 4)
    scale_density: Fraction = Fraction(1, 2)
    retain_fraction: float = 0.05
    importance_rays: int = DEFAULT_PROBE_CAMERAS * 64 * 64
    precision: Precision = Precision.F16
    probe_cameras: int = DEFAULT_PROBE_CAMERAS
    march: MarchConfig = field(default_factory=MarchConfig)

    def __post_init__(self):
        object.__setattr__(self, "scale_color", as_fraction(self.scale_color))
        object.__setattr__(self, "scale_density", as_fraction(self.scale_density))
        object.__setattr__(self, "precision", Precision.parse(self.precision))
        for s in (self.scale_color, self.scale_density):
            if s not in ALLOWED_SCALES:
                raise InvalidConfig(f"scale {s} not in {{1/4, 1/2, 1}}")
        if not 0.0 <= self.retain_fraction <= 1.0:
            raise InvalidConfig("retain_fraction must be in [0, 1]")
        if self.importance_rays < 1 or self.probe_cameras < 1:
            raise InvalidConfig("importance probing needs at least one ray and one camera")

    @classmethod
    def identity(cls, **kw) -> "CompressionConfig":
        base = dict(scale_color=1, scale_density=1, retain_fraction=0.0, precision=Precision.F32)
        base.update(kw)
        return cls(**base)


@dataclass
class ImportanceMap:
    """Accumulated compositing weight per voxel.

    ``dense`` covers every lattice voxel (a sample spreads its weight over all
    eight corners, occupied or not); ``scores`` is the occupied subset in
    storage-slot order.
    """

    mask: OccupancyMask
    dense: np.ndarray
    total_weight: float = 0.0
    total_samples: int = 0

    @property
    def dims(self):
        return self.mask.shape

    @property
    def scores(self) -> np.ndarray:
        return self.dense[self.mask.bits]


@dataclass
class ImportantVoxelSet:
    indices: np.ndarray
    density: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.density = np.asarray(self.density, dtype=np.float32).reshape(-1)
        self.color = np.asarray(self.color, dtype=np.float32)
        if self.color.ndim != 2:
            self.color = self.color.reshape(self.indices.size, -1)
        if not (self.indices.size == self.density.size == self.color.shape[0]):
            raise DimensionMismatch("important-voxel arrays differ in length")
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            raise InvalidConfig("important-voxel indices must be strictly increasing")

    def __len__(self):
        return int(self.indices.size)


@dataclass
class SparsePlane:
    """A downsampled channel group: values for the occupied voxels of ``mask``."""

    mask: OccupancyMask
    values: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros(self.mask.shape + self.values.shape[1:], dtype=np.float64)
        out[self.mask.bits] = self.values
        return out


@dataclass
class CompressedModel:
    full_mask: OccupancyMask
    original_dims: GridDims
    down_density: SparsePlane
    down_color: SparsePlane
    important: ImportantVoxelSet
    config: CompressionConfig
    ncb: Optional[object] = None

    def check(self):
        shape = self.original_dims.spatial
        if self.full_mask.shape != shape:
            raise DimensionMismatch("full mask does not match original dims")
        for plane, s in ((self.down_density, self.config.scale_density),
                         (self.down_color, self.config.scale_color)):
            if plane.mask.shape != resized_shape(shape, s):
                raise DimensionMismatch("downsampled plane dims disagree with the configured scale")
        if len(self.important) and self.important.indices[-1] >= self.full_mask.bits.size:
            raise DimensionMismatch("important voxel index outside the grid")
        return self


def compute_importance(grid: VoxelGrid, cameras: Sequence[Camera], cfg: MarchConfig,
                       workers: int = 1, backend: str | None = None) -> ImportanceMap:
    if grid.occupied == 0:
        raise EmptyGrid("cannot score an empty grid")
    if not cameras:
        raise NoCameras("importance probing needs at least one camera")
    rays = [cam.rays() for cam in cameras]
    origins = np.ascontiguousarray(np.concatenate([r[0] for r in rays]))
    dirs = np.ascontiguousarray(np.concatenate([r[1] for r in rays]))
    return importance_from_rays(grid, origins, dirs, cfg, workers, backend)


def importance_from_rays(grid: VoxelGrid, origins, dirs, cfg: MarchConfig, workers: int = 1,
                         backend: str | None = None) -> ImportanceMap:
    kern = _backend.get(backend)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    tnear, tfar = ray_box(origins, dirs, grid.dims.spatial)
    slots, density, _ = grid.kernel_arrays()
    R = origins.shape[0]
    weight = np.zeros(R, dtype=np.float64)
    samples = np.zeros(R, dtype=np.int64)

    def tile(a, b):
        buf = np.zeros(grid.dims.size, dtype=np.float64)
        kern.importance(slots, density, origins[a:b], dirs[a:b], tnear[a:b], tfar[a:b],
                        cfg.delta, cfg.termination_threshold, bool(cfg.early_termination),
                        buf, weight[a:b], samples[a:b])
        return buf

    # per-tile buffers summed in tile order: identical result for any worker count
    total = np.zeros(grid.dims.size, dtype=np.float64)
    for buf in _run_tiles(tile, R, workers):
        total += buf
    return ImportanceMap(grid.mask, total.reshape(grid.dims.spatial), float(weight.sum()),
                         int(samples.sum()))


def _top_count(fraction: float, n: int) -> int:
    return min(n, int(math.ceil(round(fraction * n, 9))))


def _ranked_slots(scores: np.ndarray) -> np.ndarray:
    """Slots by descending score; ties by ascending slot (== ascending linear index)."""
    return np.lexsort((np.arange(scores.size), -scores))


def importance_concentration(imap: ImportanceMap, fractions: Sequence[float]) -> List[float]:
    scores = imap.scores
    n = scores.size
    ranked = np.sort(scores)[::-1] if n else scores
    cum = np.concatenate([[0.0], np.cumsum(ranked)])
    total = cum[-1]
    shares = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise InvalidConfig("fractions must be in [0, 1]")
        k = _top_count(f, n)
        if total > 0:
            shares.append(float(cum[k] / total))
        else:
            shares.append(1.0 if k == n else 0.0)
    return shares


def select_important(grid: VoxelGrid, imap: ImportanceMap, p: float) -> ImportantVoxelSet:
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig("retain fraction must be in [0, 1]")
    if imap.mask != grid.mask:
        raise DimensionMismatch("importance map and grid masks differ")
    scores = imap.scores
    k = _top_count(p, scores.size)
    chosen = np.sort(_ranked_slots(scores)[:k])
    linear = np.flatnonzero(grid.mask.bits.ravel())[chosen]
    return ImportantVoxelSet(linear, grid.density[chosen].astype(np.float32),
                             grid.color[chosen].astype(np.float32))


def downsample_plane(dense: np.ndarray, full_mask: OccupancyMask, scale, precision: Precision) -> SparsePlane:
    coarse_mask = coarsen_mask(full_mask, scale)
    down = resize_dense(dense, scale)
    return SparsePlane(coarse_mask, down[coarse_mask.bits].astype(precision.dtype))


def compress(grid: VoxelGrid, cameras: Optional[Sequence[Camera]] = None,
             config: CompressionConfig = CompressionConfig(), workers: int = 1,
             imap: Optional[ImportanceMap] = None) -> CompressedModel:
    """Compress ``grid``.  Probe cameras default to the orbit ring; a precomputed
    importance map can be passed to skip probing."""
    if config.retain_fraction > 0 and grid.occupied:
        if imap is None:
            if cameras is None:
                cameras = probe_cameras(grid.dims.spatial, config.probe_cameras, config.importance_rays)
            imap = compute_importance(grid, cameras, config.march, workers)
        important = select_important(grid, imap, config.retain_fraction)
    else:
        important = ImportantVoxelSet(np.zeros(0, np.int64), np.zeros(0, np.float32),
                                      np.zeros((0, grid.dims.c), np.float32))
    down_density = downsample_plane(grid.dense_density(np.float64), grid.mask,
                                    config.scale_density, config.precision)
    down_color = downsample_plane(grid.dense_color(np.float64), grid.mask,
                                  config.scale_color, config.precision)
    return CompressedModel(grid.mask, grid.dims, down_density, down_color, important, config).check()


def upsample_plane(plane: SparsePlane, scale: Fraction, full_mask: OccupancyMask) -> np.ndarray:
    """Upsample to the full lattice and gather the occupied voxels (slot order)."""
    full = resize_dense(plane.dense(), 1 / as_fraction(scale), out_shape=full_mask.shape)
    return full[full_mask.bits]


def restore(model: CompressedModel, ncb=None, use_model_ncb: bool = True,
            overwrite_important: bool = True) -> VoxelGrid:
    """Rebuild a full-resolution grid: upsample, sparsify, refine (optional), overwrite."""
    from .ncb import ncb_refine_grid

    model.check()
    cfg = model.config
    density = upsample_plane(model.down_density, cfg.scale_density, model.full_mask)
    color = upsample_plane(model.down_color, cfg.scale_color, model.full_mask)
    grid = VoxelGrid(model.original_dims, model.full_mask, density.astype(np.float32),
                     color.astype(np.float32))
    net = ncb if ncb is not None else (model.ncb if use_model_ncb else None)
    if net is not None:
        grid = ncb_refine_grid(net, grid)
    if overwrite_important and len(model.important):
        grid = overwrite(grid, model.important)
    return grid


def overwrite(grid: VoxelGrid, important: ImportantVoxelSet) -> VoxelGrid:
    slots = grid.mask.slot_grid().ravel()[important.indices]
    if np.any(slots < 0):
        raise DimensionMismatch("important voxel is not occupied in the full mask")
    density = np.array(grid.density, dtype=np.float32)
    color = np.array(grid.color, dtype=np.float32)
    density[slots] = important.density
    color[slots] = important.color
    return VoxelGrid(grid.dims, grid.mask, density, color)
