"""Volume rendering over a sparse voxel grid.

World coordinates coincide with voxel coordinates: voxel ``(i, j, l)`` sits
at position ``(i, j, l)`` and the grid bounding box is ``[0, dim - 1]`` per
axis.  Densities are per voxel unit.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import _backend
from ._kernels_py import sh_basis
from .errors import DimensionMismatch, InvalidConfig, UnsupportedDegree
from .grid import VoxelGrid, trilinear_sample

TILE_RAYS = 2048

SH_DEGREE_FOR_COEFFS = {3: 0, 12: 1, 27: 2}


def default_workers() -> int:
    env = os.environ.get("VOXELZIP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` maps camera axes (right, down, forward) to world."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise InvalidConfig("camera rotation must be a proper orthonormal matrix")
        if not self.focal > 0 or self.width < 1 or self.height < 1:
            raise InvalidConfig("camera needs focal > 0 and a positive image size")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def look_at(cls, eye, target, focal, width, height, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(float(np.dot(up, forward))) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(eye, np.stack([right, down, forward], axis=1), float(focal), int(width), int(height))

    def rays(self):
        """Origins and unit directions for every pixel, row-major (v, u)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u - self.width / 2.0) / self.focal,
                      (v - self.height / 2.0) / self.focal,
                      np.ones_like(u)], axis=-1).reshape(-1, 3)
        d = d @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, d.shape).copy()
        return origins, d


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidConfig("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise InvalidConfig("ray needs 0 <= t_near < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class MarchConfig:
    step: float = 0.5
    termination_threshold: float = 0.01
    early_termination: bool = True
    step_multiplier: float = 2.0
    # False reproduces a per-channel decomposition of the sample fetch; same
    # result, more addressing work (used as the slow baseline in benchmarks)
    combine_lanes: bool = True

    def __post_init__(self):
        if not self.step > 0 or not self.step_multiplier > 0:
            raise InvalidConfig("step and step_multiplier must be positive")
        if not 0 <= self.termination_threshold < 1:
            raise InvalidConfig("termination_threshold must be in [0, 1)")

    @property
    def delta(self) -> float:
        return self.step * self.step_multiplier


REFERENCE_STEP = 0.125


def reference_config(fine_step: float = REFERENCE_STEP) -> MarchConfig:
    return MarchConfig(step=fine_step, step_multiplier=1.0, early_termination=False)


@dataclass
class SampleState:
    t_accum: float
    color_accum: np.ndarray
    i: int
    alpha: float = 0.0
    weight: float = 0.0


@dataclass
class RenderJob:
    camera: Camera
    config: MarchConfig
    background: np.ndarray
    image: Optional[np.ndarray] = None
    total_samples: int = 0
    terminated_rays: int = 0
    wall_ms: float = 0.0
    backend: str = field(default_factory=lambda: _backend.NAME)


def eval_sh(coeffs, d) -> np.ndarray:
    """RGB from per-channel SH coefficient blocks, shifted by 0.5 and clamped to [0, 1]."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if coeffs.size not in SH_DEGREE_FOR_COEFFS:
        raise UnsupportedDegree(f"{coeffs.size} coefficients do not match SH degree 0, 1 or 2")
    nb = coeffs.size // 3
    basis = sh_basis(np.asarray(d, dtype=np.float64).reshape(1, 3), nb)[0]
    rgb = coeffs.reshape(3, nb) @ basis
    return np.clip(rgb + 0.5, 0.0, 1.0)


def ray_box(origins, dirs, shape):
    """Entry/exit distances against the grid box ``[0, dim - 1]``; misses give t_near >= t_far."""
    lo = np.zeros(3)
    hi = np.asarray(shape, dtype=np.float64) - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # parallel rays outside the slab never enter
    outside = (dirs == 0) & ((origins < lo) | (origins > hi))
    tmax = np.where(outside, -np.inf, tmax)
    tnear = np.maximum(tmin.max(axis=1), 0.0)
    tfar = tmax.min(axis=1)
    tfar = np.where(tfar > tnear, tfar, tnear)
    return tnear, tfar


def _tiles(n: int):
    return [(s, min(s + TILE_RAYS, n)) for s in range(0, n, TILE_RAYS)]


def _run_tiles(fn, n: int, workers: int):
    tiles = _tiles(n)
    if workers <= 1 or len(tiles) <= 1:
        return [fn(a, b) for a, b in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), tiles))


def march_rays(grid: VoxelGrid, origins, dirs, cfg: MarchConfig, background=(0.0, 0.0, 0.0),
               workers: int = 1, backend: str | None = None, tnear=None, tfar=None):
    """Render a batch of rays.  Returns (rgb, samples, terminated, final transmittance)."""
    kern = _backend.get(backend)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if tnear is None or tfar is None:
        tnear, tfar = ray_box(origins, dirs, grid.dims.spatial)
    tnear = np.ascontiguousarray(tnear, dtype=np.float64)
    tfar = np.ascontiguousarray(tfar, dtype=np.float64)
    bg = np.ascontiguousarray(background, dtype=np.float64).reshape(3)
    slots, density, color = grid.kernel_arrays()
    R = origins.shape[0]
    rgb = np.zeros((R, 3), dtype=np.float64)
    samples = np.zeros(R, dtype=np.int64)
    term = np.zeros(R, dtype=np.uint8)
    trans = np.ones(R, dtype=np.float64)

    def tile(a, b):
        kern.march(slots, density, color, origins[a:b], dirs[a:b], tnear[a:b], tfar[a:b],
                   cfg.delta, cfg.termination_threshold, bool(cfg.early_termination), bg,
                   bool(cfg.combine_lanes), rgb[a:b], samples[a:b], term[a:b], trans[a:b])

    _run_tiles(tile, R, workers)
    return rgb, samples, term.astype(bool), trans


def render_ray(grid: VoxelGrid, ray: Ray, cfg: MarchConfig, background=(0.0, 0.0, 0.0),
               backend: str | None = None) -> np.ndarray:
    o = ray.origin.reshape(1, 3)
    d = ray.direction.reshape(1, 3)
    tnear, tfar = ray_box(o, d, grid.dims.spatial)
    tnear = np.maximum(tnear, ray.t_near)
    tfar = np.maximum(np.minimum(tfar, ray.t_far), tnear)
    rgb, _, _, _ = march_rays(grid, o, d, cfg, background, backend=backend, tnear=tnear, tfar=tfar)
    return rgb[0]


def render_image(grid: VoxelGrid, camera: Camera, cfg: MarchConfig, workers: int | None = None,
                 background=(0.0, 0.0, 0.0), backend: str | None = None) -> RenderJob:
    workers = default_workers() if workers is None else workers
    job = RenderJob(camera, cfg, np.asarray(background, dtype=np.float64),
                    backend=backend or _backend.NAME)
    start = time.perf_counter()
    origins, dirs = camera.rays()
    rgb, samples, term, _ = march_rays(grid, origins, dirs, cfg, background, workers, backend)
    job.wall_ms = (time.perf_counter() - start) * 1e3
    job.image = rgb.reshape(camera.height, camera.width, 3)
    job.total_samples = int(samples.sum())
    job.terminated_rays = int(term.sum())
    return job


def render_reference(grid: VoxelGrid, camera: Camera, fine_step: float = REFERENCE_STEP,
                     background=(0.0, 0.0, 0.0), workers: int | None = None,
                     backend: str | None = None) -> np.ndarray:
    return render_image(grid, camera, reference_config(fine_step), workers, background, backend).image


def render_views(grid: VoxelGrid, cameras: Sequence[Camera], cfg: MarchConfig,
                 background=(0.0, 0.0, 0.0), workers: int | None = None) -> List[np.ndarray]:
    return [render_image(grid, cam, cfg, workers, background).image for cam in cameras]


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def mean_psnr(images_a, images_b) -> float:
    """PSNR of the pooled MSE over several views."""
    mse = float(np.mean([np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
                         for a, b in zip(images_a, images_b)]))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


def trace_ray(grid: VoxelGrid, ray: Ray, cfg: MarchConfig) -> List[SampleState]:
    """Scalar step-by-step march kept deliberately simple; used to check invariants.

    Each state records the transmittance *after* compositing sample ``i``.
    """
    tnear, tfar = ray_box(ray.origin.reshape(1, 3), ray.direction.reshape(1, 3), grid.dims.spatial)
    tn = max(float(tnear[0]), ray.t_near)
    tf = min(float(tfar[0]), ray.t_far)
    delta = cfg.delta
    T = 1.0
    acc = np.zeros(3)
    states = []
    i = 0
    while tn + (i + 0.5) * delta < tf:
        p = ray.origin + (tn + (i + 0.5) * delta) * ray.direction
        sigma, coef = trilinear_sample(grid, p)
        alpha = 1.0 - math.exp(-max(sigma, 0.0) * delta)
        w = T * alpha
        if alpha > 0:
            acc = acc + w * eval_sh(coef, ray.direction)
        T *= 1.0 - alpha
        states.append(SampleState(T, acc.copy(), i, alpha, w))
        i += 1
        if cfg.early_termination and T < cfg.termination_threshold:
            break
    return states
