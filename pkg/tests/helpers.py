"""Random-model factory shared by the container tests."""

from fractions import Fraction

import numpy as np

from voxelzip.compress import CompressedModel, CompressionConfig, ImportantVoxelSet, SparsePlane
from voxelzip.grid import GridDims, OccupancyMask, Precision, coarsen_mask
from voxelzip.ncb import NcbNetwork
from voxelzip.render import MarchConfig

SCALES = (Fraction(1, 4), Fraction(1, 2), Fraction(1))


def random_network(rng, channels, precision=None):
    trunk = tuple(int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3))))
    dens = tuple(int(rng.integers(2, 5)) for _ in range(int(rng.integers(1, 3))))
    lo = max(dens)
    col = tuple(int(rng.integers(lo, lo + 5)) for _ in range(len(dens) + 2))
    net = NcbNetwork.create(channels, rng, int(rng.integers(1, 5)), 2.0, trunk, dens, col,
                            head_std=0.3, mod_std=0.3)
    net.params = {k: (v + rng.normal(size=v.shape)).astype(np.float32) for k, v in net.params.items()}
    prec = precision or (Precision.F16 if rng.random() < 0.5 else Precision.F32)
    return net.cast(prec)


def random_model(rng, with_ncb=None, min_size=2):
    shape = tuple(int(rng.integers(min_size, 11)) for _ in range(3))
    c = int(rng.choice([3, 12, 27]))
    dims = GridDims(*shape, c)
    bits = rng.random(shape) < rng.uniform(0.0, 1.0)
    full = OccupancyMask(bits)
    prec = Precision.F16 if rng.random() < 0.5 else Precision.F32
    cfg = CompressionConfig(scale_color=SCALES[int(rng.integers(0, 3))],
                            scale_density=SCALES[int(rng.integers(0, 3))],
                            retain_fraction=float(rng.uniform(0, 1)), precision=prec,
                            importance_rays=int(rng.integers(1, 100000)),
                            probe_cameras=int(rng.integers(1, 40)),
                            march=MarchConfig(step=float(rng.uniform(0.1, 2)),
                                              early_termination=bool(rng.random() < 0.5)))
    md = coarsen_mask(full, cfg.scale_density)
    mc = coarsen_mask(full, cfg.scale_color)
    dd = SparsePlane(md, (rng.normal(size=md.count) * 3).astype(prec.dtype))
    dc = SparsePlane(mc, rng.normal(size=(mc.count, c)).astype(prec.dtype))
    occ = np.flatnonzero(bits.ravel())
    k = int(rng.integers(0, occ.size + 1))
    idx = np.sort(rng.choice(occ, size=k, replace=False)) if k else np.zeros(0, np.int64)
    imp = ImportantVoxelSet(idx, rng.normal(size=k).astype(np.float32),
                            rng.normal(size=(k, c)).astype(np.float32))
    if with_ncb is None:
        with_ncb = rng.random() < 0.3
    net = random_network(rng, c) if with_ncb else None
    return CompressedModel(full, dims, dd, dc, imp, cfg, net).check(), net
