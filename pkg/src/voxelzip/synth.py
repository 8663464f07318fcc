"""Procedural scenes, brute-force oracles and the ablation runner.

Scenes stand in for trained radiance-field grids: smooth low-frequency
structure plus seeded high-frequency detail, so downsampling demonstrably
throws away information.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import GridTooLargeForOracle, InvalidConfig
from .grid import GridDims, OccupancyMask, VoxelGrid, resize_dense
from .render import SH_DEGREE_FOR_COEFFS, MarchConfig, ray_box

SH_C0 = 0.28209479177387814
SLAB_SIGMA = 4.0
SLAB_RGB = (0.85, 0.45, 0.2)
ORACLE_MAX_VOXELS = 16 ** 3
EXPERIMENT_SCHEMA = 1


class SceneKind(enum.Enum):
    SLAB = "slab"
    SPHERE_SHELL = "sphere_shell"
    CHECKER = "checker"
    PERLIN_CLOUD = "perlin_cloud"


@dataclass(frozen=True)
class SceneSpec:
    kind: SceneKind = SceneKind.SPHERE_SHELL
    dims: GridDims = GridDims(64, 64, 64, 27)
    occupancy_target: float = 0.1
    sh_degree: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SceneKind(self.kind))
        if self.sh_degree not in (0, 1, 2):
            raise InvalidConfig("sh_degree must be 0, 1 or 2")
        if self.dims.c != 3 * (self.sh_degree + 1) ** 2:
            raise InvalidConfig(f"channel count {self.dims.c} does not match SH degree {self.sh_degree}")
        if not 0 < self.occupancy_target <= 1:
            raise InvalidConfig("occupancy_target must be in (0, 1]")

    @classmethod
    def make(cls, kind, size: int = 64, occupancy: float = 0.1, sh_degree: int = 2, seed: int = 0):
        c = 3 * (sh_degree + 1) ** 2
        return cls(SceneKind(kind), GridDims(size, size, size, c), occupancy, sh_degree, seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "dims": list(asdict(self.dims).values()),
                "occupancy_target": self.occupancy_target, "sh_degree": self.sh_degree,
                "seed": self.seed}


def _unit_coords(shape):
    axes = [np.linspace(0.0, 1.0, n) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _value_noise(shape, rng, cell: int, octaves: int = 1) -> np.ndarray:
    """Lattice noise in [-1, 1]: random values every ``cell`` voxels, trilinearly upsampled."""
    out = np.zeros(shape, dtype=np.float64)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        c = max(1, cell >> o)
        coarse = tuple(int(math.ceil(n / c)) + 1 for n in shape)
        lattice = rng.uniform(-1.0, 1.0, coarse)
        out += amp * resize_dense(lattice, c, out_shape=shape)
        total += amp
        amp *= 0.5
    return out / total


def _sh_colors(rgb: np.ndarray, sh_degree: int, rng, detail: float = 0.15) -> np.ndarray:
    """Per-channel SH blocks whose DC term reproduces ``rgb``.

    Higher bands are smooth lattice noise (cell 8), so view dependence varies
    across the scene without being pure per-voxel noise.
    """
    shape = rgb.shape[:-1]
    nb = (sh_degree + 1) ** 2
    coef = np.zeros(shape + (3, nb), dtype=np.float64)
    coef[..., 0] = (rgb - 0.5) / SH_C0
    for ch in range(3):
        for b in range(1, nb):
            coef[..., ch, b] = detail * _value_noise(shape, rng, 8)
    return coef.reshape(shape + (3 * nb,))


def _smooth_rgb(shape, rng) -> np.ndarray:
    x, y, z = _unit_coords(shape)
    freq = rng.uniform(0.5, 1.5, (3, 3))
    phase = rng.uniform(0.0, 2 * math.pi, 3)
    rgb = np.stack([0.5 + 0.25 * np.sin(2 * math.pi * (freq[i, 0] * x + freq[i, 1] * y + freq[i, 2] * z)
                                         + phase[i]) for i in range(3)], axis=-1)
    return rgb


def _checker(shape, cell: int) -> np.ndarray:
    idx = np.indices(shape)
    return np.where(((idx[0] // cell) + (idx[1] // cell) + (idx[2] // cell)) % 2 == 0, 1.0, -1.0)


def _radius(shape):
    idx = np.indices(shape).astype(np.float64)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return np.sqrt(sum((idx[a] - center[a]) ** 2 for a in range(3)))


def _slab(spec: SceneSpec, rng):
    h, w, k = spec.dims.spatial
    thickness = max(1, int(round(spec.occupancy_target * k)) - 2)
    z0 = (k - thickness) // 2
    density = np.zeros((h, w, k))
    density[:, :, z0:z0 + thickness] = SLAB_SIGMA
    bits = np.zeros((h, w, k), dtype=bool)
    # one zero-density halo layer on each side keeps the color constant wherever density is nonzero
    bits[:, :, max(0, z0 - 1):min(k, z0 + thickness + 1)] = True
    rgb = np.broadcast_to(np.asarray(SLAB_RGB), (h, w, k, 3))
    nb = (spec.sh_degree + 1) ** 2
    coef = np.zeros((h, w, k, 3, nb))
    coef[..., 0] = (rgb - 0.5) / SH_C0
    return density, coef.reshape(h, w, k, 3 * nb), bits


def _sphere_shell(spec: SceneSpec, rng):
    shape = spec.dims.spatial
    r = _radius(shape)
    r0 = 0.35 * min(shape)
    n = float(np.prod(shape))
    thickness = max(1.0, spec.occupancy_target * n / (4.0 * math.pi * r0 * r0))
    bits = np.abs(r - r0) <= thickness / 2.0
    profile = np.clip(1.0 - (2.0 * (r - r0) / max(thickness, 1.0)) ** 2, 0.0, 1.0)
    detail = _value_noise(shape, rng, 2)
    density = 6.0 * profile * (1.0 + 0.3 * _value_noise(shape, rng, 8, 2)) + 1.5 * detail * profile
    rgb = _smooth_rgb(shape, rng) + 0.12 * _value_noise(shape, rng, 2)[..., None] * np.array([1.0, -0.6, 0.4])
    return np.maximum(density, 0.0), _sh_colors(np.clip(rgb, 0.05, 0.95), spec.sh_degree, rng), bits


def _checker_ball(spec: SceneSpec, rng):
    shape = spec.dims.spatial
    r = _radius(shape)
    n = float(np.prod(shape))
    radius = (3.0 * spec.occupancy_target * n / (4.0 * math.pi)) ** (1.0 / 3.0)
    bits = r <= radius
    cell = max(1, min(shape) // 32)
    check = _checker(shape, cell)
    density = 3.0 * (1.0 + 0.25 * _value_noise(shape, rng, 16)) + 1.5 * check
    rgb = _smooth_rgb(shape, rng) + 0.2 * check[..., None] * np.array([1.0, -1.0, 0.6])
    return np.maximum(density, 0.0), _sh_colors(np.clip(rgb, 0.05, 0.95), spec.sh_degree, rng), bits


def _perlin_cloud(spec: SceneSpec, rng):
    shape = spec.dims.spatial
    noise = _value_noise(shape, rng, max(2, min(shape) // 4), 3)
    cut = np.quantile(noise, 1.0 - spec.occupancy_target)
    bits = noise >= cut
    density = np.where(bits, 2.0 + 20.0 * (noise - cut), 0.0)
    rgb = _smooth_rgb(shape, rng) + 0.1 * _value_noise(shape, rng, 2)[..., None]
    return density, _sh_colors(np.clip(rgb, 0.05, 0.95), spec.sh_degree, rng), bits


_GENERATORS = {
    SceneKind.SLAB: _slab,
    SceneKind.SPHERE_SHELL: _sphere_shell,
    SceneKind.CHECKER: _checker_ball,
    SceneKind.PERLIN_CLOUD: _perlin_cloud,
}


def generate_scene(spec: SceneSpec) -> VoxelGrid:
    rng = np.random.default_rng([spec.seed, list(SceneKind).index(spec.kind)])
    density, color, bits = _GENERATORS[spec.kind](spec, rng)
    return VoxelGrid.from_dense(density, color, OccupancyMask(bits))


# -- oracle ----------------------------------------------------------------------------

def oracle_importance(grid: VoxelGrid, origins, dirs, cfg: MarchConfig):
    """Brute-force importance: every sample is tested against every voxel.

    A voxel receives a sample's compositing weight scaled by its tent function
    ``prod(max(0, 1 - |p - v|))``, which is nonzero only inside the voxel's
    one-voxel neighbourhood and equals the trilinear corner weight there.
    """
    from .compress import ImportanceMap
    from .grid import trilinear_sample

    shape = grid.dims.spatial
    if grid.dims.size > ORACLE_MAX_VOXELS:
        raise GridTooLargeForOracle(f"oracle limited to {ORACLE_MAX_VOXELS} voxels, got {grid.dims.size}")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    lattice = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    hi = np.asarray(shape, dtype=np.float64) - 1.0
    tnear, tfar = ray_box(origins, dirs, shape)
    delta = cfg.delta
    scores = np.zeros(lattice.shape[0])
    total_w, total_s = 0.0, 0
    for r in range(origins.shape[0]):
        T = 1.0
        i = 0
        while tnear[r] + (i + 0.5) * delta < tfar[r]:
            p = origins[r] + (tnear[r] + (i + 0.5) * delta) * dirs[r]
            sigma, _ = trilinear_sample(grid, p)
            total_s += 1
            alpha = 1.0 - math.exp(-max(sigma, 0.0) * delta)
            if alpha > 0:
                q = np.clip(p, 0.0, hi)
                tent = np.prod(np.maximum(0.0, 1.0 - np.abs(lattice - q)), axis=1)
                scores += tent * (T * alpha)
                total_w += T * alpha
                T *= 1.0 - alpha
            i += 1
            if cfg.early_termination and T < cfg.termination_threshold:
                break
    return ImportanceMap(grid.mask, scores.reshape(shape), total_w, total_s)


# -- ablation --------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    scene: SceneSpec
    config: object
    metrics: Dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    schema: int = EXPERIMENT_SCHEMA

    def row(self) -> Dict[str, object]:
        cfg = self.config
        out = {"schema": self.schema, "config_hash": self.config_hash,
               "scene": self.scene.kind.value, "size": self.scene.dims.h, "seed": self.scene.seed,
               "scale_color": str(cfg.scale_color), "scale_density": str(cfg.scale_density),
               "retain_fraction": cfg.retain_fraction, "precision": cfg.precision.value}
        for key in CSV_METRICS:
            out[key] = self.metrics.get(key, float("nan"))
        return out


CSV_METRICS = ("psnr_db", "container_bytes", "ratio", "ncb_iters", "ncb_loss_start", "ncb_loss_end",
               "wall_ms_compress", "wall_ms_train", "wall_ms_restore", "wall_ms_render")
CSV_COLUMNS = ("schema", "config_hash", "scene", "size", "seed", "scale_color", "scale_density",
               "retain_fraction", "precision") + CSV_METRICS


def config_hash(config, ncb_iters: int = 0) -> str:
    m = config.march
    doc = {"scale_color": str(config.scale_color), "scale_density": str(config.scale_density),
           "retain_fraction": repr(float(config.retain_fraction)), "precision": config.precision.value,
           "importance_rays": config.importance_rays, "probe_cameras": config.probe_cameras,
           "march": [m.step, m.termination_threshold, m.early_termination, m.step_multiplier],
           "ncb_iters": ncb_iters}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def records_to_csv(records: Sequence[ExperimentRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        row = rec.row()
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def run_ablation(grid: VoxelGrid, scene: SceneSpec, configs: Sequence, out_dir=None,
                 ncb_iters: int = 0, train_config=None, views: int = 8, resolution: int = 64,
                 march: Optional[MarchConfig] = None, background=(0.0, 0.0, 0.0), workers: int = 1,
                 log=None) -> List[ExperimentRecord]:
    """Compress / (train) / restore / render each config on the same scene.

    PSNR is measured on ``views`` held-out cameras against renders of the
    original grid with the same march settings.  With ``out_dir`` the CSV goes
    to ``out_dir/ablation.csv`` and the restored renders to ``out_dir/<hash>/``.
    """
    from .cameras import heldout_cameras, probe_cameras
    from .compress import compress, compute_importance, restore
    from .container import storage_report
    from .imageio import save_png
    from .ncb import TrainConfig, train_ncb
    from .render import mean_psnr, render_views

    if not configs:
        raise InvalidConfig("run_ablation needs at least one config")
    march = march or MarchConfig()
    cams = heldout_cameras(grid.dims.spatial, views, resolution)
    truth = render_views(grid, cams, march, background, workers)
    imaps: Dict[tuple, object] = {}
    records = []
    for cfg in configs:
        metrics: Dict[str, float] = {}
        key = (cfg.probe_cameras, cfg.importance_rays, cfg.march)
        t0 = time.perf_counter()
        imap = None
        if cfg.retain_fraction > 0 and grid.occupied:
            if key not in imaps:
                probes = probe_cameras(grid.dims.spatial, cfg.probe_cameras, cfg.importance_rays)
                imaps[key] = compute_importance(grid, probes, cfg.march, workers)
            imap = imaps[key]
        model = compress(grid, config=cfg, workers=workers, imap=imap)
        metrics["wall_ms_compress"] = (time.perf_counter() - t0) * 1e3
        net = None
        metrics["ncb_iters"] = float(ncb_iters)
        t0 = time.perf_counter()
        if ncb_iters > 0:
            tcfg = train_config or TrainConfig.desk(total_iters=ncb_iters)
            hist: list = []
            plain = restore(model, overwrite_important=False)
            net = train_ncb(grid, plain, tcfg, history=hist)
            metrics["ncb_loss_start"] = float(hist[0][1])
            metrics["ncb_loss_end"] = float(hist[-1][1])
        metrics["wall_ms_train"] = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        restored = restore(model, ncb=net)
        metrics["wall_ms_restore"] = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        images = render_views(restored, cams, march, background, workers)
        metrics["wall_ms_render"] = (time.perf_counter() - t0) * 1e3
        metrics["psnr_db"] = mean_psnr(images, truth)
        report = storage_report(model, net)
        metrics["container_bytes"] = float(report.total_bytes)
        metrics["ratio"] = float(report.ratio)
        rec = ExperimentRecord(scene, cfg, metrics, config_hash(cfg, ncb_iters))
        records.append(rec)
        if log is not None:
            log(f"{rec.config_hash} S_c={cfg.scale_color} S_s={cfg.scale_density} "
                f"p={cfg.retain_fraction} psnr={metrics['psnr_db']:.3f} ratio={metrics['ratio']:.2f}")
        if out_dir is not None:
            d = Path(out_dir) / rec.config_hash
            d.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(images):
                save_png(d / f"view_{i:02d}.png", img)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as fh:
            fh.write(records_to_csv(records))
    return records


def retention_sweep(fractions=(0.0, 0.025, 0.05, 0.075, 0.1), **base):
    from .compress import CompressionConfig
    return [CompressionConfig(retain_fraction=f, **base) for f in fractions]


def downsample_grid(scales=((Fraction(1, 2), Fraction(1, 2)), (Fraction(1, 2), Fraction(1, 4)),
                            (Fraction(1, 4), Fraction(1, 2)), (Fraction(1, 4), Fraction(1, 4))),
                    **base):
    """Configs over (scale_color, scale_density) pairs."""
    from .compress import CompressionConfig
    return [CompressionConfig(scale_color=c, scale_density=d, **base) for c, d in scales]
