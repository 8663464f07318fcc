from fractions import Fraction

import numpy as np
import pytest

from voxelzip.cameras import probe_cameras
from voxelzip.compress import (CompressionConfig, ImportanceMap, ImportantVoxelSet, compress, compute_importance,
                               importance_concentration, importance_from_rays, overwrite, restore,
                               select_important)
from voxelzip.errors import DimensionMismatch, EmptyGrid, InvalidConfig, NoCameras
from voxelzip.grid import GridDims, OccupancyMask, VoxelGrid
from voxelzip.render import MarchConfig, march_rays

ET_OFF = MarchConfig(step=0.5, early_termination=False)


def test_importance_total_equals_opacity(small_scene):
    cams = probe_cameras(small_scene.dims.spatial, 4, 4 * 16 * 16)
    imap = compute_importance(small_scene, cams, ET_OFF)
    o = np.concatenate([c.rays()[0] for c in cams])
    d = np.concatenate([c.rays()[1] for c in cams])
    _, samples, _, trans = march_rays(small_scene, o, d, ET_OFF)
    assert imap.dense.sum() == pytest.approx((1 - trans).sum(), rel=1e-9)
    assert imap.total_weight == pytest.approx((1 - trans).sum(), rel=1e-9)
    assert imap.total_samples == samples.sum()


def test_unreached_voxels_score_zero():
    g = VoxelGrid.from_dense(np.ones((8, 8, 8)), np.zeros((8, 8, 8, 3)))
    imap = importance_from_rays(g, [[1.0, 1.0, -2.0]], [[0, 0, 1.0]], ET_OFF)
    dense = imap.dense
    assert dense[0:3, 0:3].sum() > 0
    assert dense[3:].sum() == 0 and dense[:, 3:].sum() == 0


def test_importance_independent_of_workers(small_scene):
    cams = probe_cameras(small_scene.dims.spatial, 6, 6 * 32 * 32)
    a = compute_importance(small_scene, cams, MarchConfig(), workers=1)
    b = compute_importance(small_scene, cams, MarchConfig(), workers=3)
    assert a.dense.tobytes() == b.dense.tobytes()


def test_importance_errors(small_scene):
    with pytest.raises(NoCameras):
        compute_importance(small_scene, [], ET_OFF)
    empty = VoxelGrid(GridDims(4, 4, 4, 3), OccupancyMask.empty((4, 4, 4)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(EmptyGrid):
        compute_importance(empty, probe_cameras((4, 4, 4), 2, 32), ET_OFF)


def fake_map(mask, scores):
    dense = np.zeros(mask.shape)
    dense[mask.bits] = scores
    return ImportanceMap(mask, dense)


def test_selection_tie_break_by_linear_index():
    mask = OccupancyMask(np.ones((2, 2, 2), dtype=bool))
    g = VoxelGrid.from_dense(np.arange(8.0).reshape(2, 2, 2), np.zeros((2, 2, 2, 3)))
    imap = fake_map(mask, [1, 5, 5, 0, 5, 2, 2, 5])
    sel = select_important(g, imap, 0.5)
    assert sel.indices.tolist() == [1, 2, 4, 7]
    sel = select_important(g, imap, 3 / 8)
    assert sel.indices.tolist() == [1, 2, 4]
    np.testing.assert_array_equal(sel.density, [1, 2, 4])


def test_selection_count_and_monotone(small_scene):
    cams = probe_cameras(small_scene.dims.spatial, 4, 4 * 16 * 16)
    imap = compute_importance(small_scene, cams, ET_OFF)
    prev = set()
    for p in (0.0, 0.01, 0.05, 0.2, 0.5, 1.0):
        sel = select_important(small_scene, imap, p)
        assert len(sel) == int(np.ceil(p * small_scene.occupied))
        cur = set(sel.indices.tolist())
        assert prev <= cur
        prev = cur
    with pytest.raises(InvalidConfig):
        select_important(small_scene, imap, 1.5)


def test_concentration_is_monotone(small_scene):
    cams = probe_cameras(small_scene.dims.spatial, 4, 4 * 16 * 16)
    imap = compute_importance(small_scene, cams, ET_OFF)
    shares = importance_concentration(imap, [0, 0.05, 0.1, 0.5, 1])
    assert shares[0] == 0 and shares[-1] == pytest.approx(1.0)
    assert all(a <= b for a, b in zip(shares, shares[1:]))


def test_identity_pipeline_is_lossless(small_scene):
    m = compress(small_scene, config=CompressionConfig.identity())
    assert restore(m).equals(small_scene)


def test_full_retention_recovers_source(small_scene):
    m = compress(small_scene, config=CompressionConfig(retain_fraction=1.0, precision="f32"))
    r = restore(m)
    np.testing.assert_array_equal(r.density, small_scene.density.astype(np.float32))
    np.testing.assert_array_equal(r.color, small_scene.color.astype(np.float32))


def test_restore_preserves_mask_and_retention_reduces_error(small_scene):
    errs = []
    for p in (0.0, 0.1, 0.3):
        r = restore(compress(small_scene, config=CompressionConfig(retain_fraction=p)))
        assert r.mask == small_scene.mask
        errs.append(np.abs(r.color - small_scene.color).sum())
    assert errs[0] >= errs[1] >= errs[2]


def test_compressed_plane_shapes(small_scene):
    m = compress(small_scene, config=CompressionConfig(scale_color=Fraction(1, 4), scale_density=Fraction(1, 2),
                                                       retain_fraction=0.0))
    assert m.down_color.mask.shape == (4, 4, 4)
    assert m.down_density.mask.shape == (8, 8, 8)
    assert m.down_color.values.dtype == np.float16


def test_config_validation():
    with pytest.raises(InvalidConfig):
        CompressionConfig(scale_color=Fraction(1, 8))
    with pytest.raises(InvalidConfig):
        CompressionConfig(retain_fraction=-0.1)
    with pytest.raises(InvalidConfig):
        CompressionConfig(importance_rays=0)


def test_important_set_validation_and_overwrite(small_scene):
    with pytest.raises(InvalidConfig):
        ImportantVoxelSet([3, 1], [0, 0], np.zeros((2, 27)))
    with pytest.raises(DimensionMismatch):
        ImportantVoxelSet([1, 3], [0], np.zeros((2, 27)))
    free = int(np.flatnonzero(~small_scene.mask.bits.ravel())[0])
    with pytest.raises(DimensionMismatch):
        overwrite(small_scene, ImportantVoxelSet([free], [1.0], np.zeros((1, 27))))
