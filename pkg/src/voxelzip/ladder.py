"""The renderer acceleration ladder: cumulative toggles measured against a fine reference."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .grid import VoxelGrid
from .render import Camera, MarchConfig, march_rays, psnr, reference_config

# baseline: per-channel fetch decomposition, base step, no early termination
BASE = MarchConfig(step=0.5, step_multiplier=1.0, early_termination=False, combine_lanes=False)

STAGES = (
    ("baseline", {}),
    ("+ one task per ray", {"combine_lanes": True}),
    ("+ larger step (x2)", {"step_multiplier": 2.0}),
    ("+ early termination", {"early_termination": True}),
)


@dataclass
class LadderRow:
    name: str
    config: MarchConfig
    total_samples: int
    terminated_rays: int
    wall_ms: float
    psnr_db: float
    max_abs_vs_previous: float

    def to_dict(self) -> dict:
        c = self.config
        return {"name": self.name, "step": c.step, "step_multiplier": c.step_multiplier,
                "early_termination": c.early_termination, "combine_lanes": c.combine_lanes,
                "termination_threshold": c.termination_threshold,
                "total_samples": self.total_samples, "terminated_rays": self.terminated_rays,
                "wall_ms": self.wall_ms, "psnr_db": self.psnr_db,
                "max_abs_vs_previous": self.max_abs_vs_previous}


def _render_all(grid, rays, cfg, background, workers, backend):
    images, samples, term = [], 0, 0
    for o, d in rays:
        rgb, s, t, _ = march_rays(grid, o, d, cfg, background, workers, backend)
        images.append(rgb)
        samples += int(s.sum())
        term += int(t.sum())
    return images, samples, term


def acceleration_ladder(grid: VoxelGrid, cameras: Sequence[Camera], base: MarchConfig = BASE,
                        fine_step: float = 0.125, background=(0.0, 0.0, 0.0), workers: int = 1,
                        backend: Optional[str] = None, repeats: int = 3) -> List[LadderRow]:
    """Apply the STAGES toggles cumulatively.  Wall time is the best of ``repeats``."""
    rays = [cam.rays() for cam in cameras]
    ref, _, _ = _render_all(grid, rays, reference_config(fine_step), background, workers, backend)
    ref_all = np.concatenate(ref)
    rows: List[LadderRow] = []
    cfg = base
    prev = None
    for name, toggle in STAGES:
        cfg = replace(cfg, **toggle)
        best = float("inf")
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            images, samples, term = _render_all(grid, rays, cfg, background, workers, backend)
            best = min(best, (time.perf_counter() - t0) * 1e3)
        cur = np.concatenate(images)
        delta = float(np.abs(cur - prev).max()) if prev is not None else 0.0
        rows.append(LadderRow(name, cfg, samples, term, best, psnr(cur, ref_all), delta))
        prev = cur
    return rows


def format_ladder(rows: Sequence[LadderRow]) -> str:
    head = f"{'stage':<22} {'samples':>10} {'term':>6} {'wall_ms':>9} {'psnr_db':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<22} {r.total_samples:>10d} {r.terminated_rays:>6d} "
                     f"{r.wall_ms:>9.1f} {r.psnr_db:>8.3f}")
    return "\n".join(lines)
