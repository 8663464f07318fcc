"""Camera rigs around a grid: importance probes and held-out evaluation views."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from .render import Camera

ORBIT_RADIUS = 2.5  # in units of the grid half-diagonal


def grid_center(shape: Sequence[int]) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def half_diagonal(shape: Sequence[int]) -> float:
    return float(np.linalg.norm(np.asarray(shape, dtype=np.float64) - 1.0) / 2.0)


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def icosahedral_directions() -> np.ndarray:
    g = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-g, g):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.asarray(verts)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def orbit_camera(shape, direction, resolution: int, radius: float = ORBIT_RADIUS) -> Camera:
    """Camera on a sphere around the grid center, framing the whole grid."""
    center = grid_center(shape)
    dist = radius * half_diagonal(shape)
    eye = center + dist * np.asarray(direction, dtype=np.float64)
    half_angle = math.asin(min(1.0 / radius, 0.999))
    focal = (resolution / 2.0) / math.tan(half_angle)
    return Camera.look_at(eye, center, focal, resolution, resolution)


def probe_cameras(shape, n: int = 20, total_rays: int = 20 * 64 * 64) -> List[Camera]:
    res = max(1, int(math.ceil(math.sqrt(total_rays / n))))
    return [orbit_camera(shape, d, res) for d in fibonacci_directions(n)]


def heldout_cameras(shape, n: int = 8, resolution: int = 64) -> List[Camera]:
    dirs = icosahedral_directions()[:n]
    return [orbit_camera(shape, d, resolution) for d in dirs]
