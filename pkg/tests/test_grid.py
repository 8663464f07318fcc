import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from voxelzip.errors import (DimensionMismatch, DimensionTooSmall, IndexOutOfRange, InvalidConfig,
                             NonFiniteInput, NonMonotonicIndices)
from voxelzip.grid import (GridDims, OccupancyMask, Precision, VoxelGrid, coarsen_mask, mask_to_pointers,
                           pointers_to_mask, resize_dense, sparsify, trilinear_corners, trilinear_resize,
                           trilinear_sample)

shapes = st.tuples(*[st.integers(2, 7)] * 3)


def random_grid(rng, shape=(5, 6, 7), c=27, fill=0.5):
    mask = OccupancyMask(rng.random(shape) < fill)
    return VoxelGrid(GridDims(*shape, c), mask, rng.normal(size=mask.count).astype(np.float32),
                     rng.normal(size=(mask.count, c)).astype(np.float32))


def test_dims_validation():
    with pytest.raises(DimensionTooSmall):
        GridDims(1, 4, 4)
    with pytest.raises(DimensionMismatch):
        GridDims(4, 4, 4, 5)
    assert GridDims(2, 3, 4).spatial == (2, 3, 4)


def test_grid_rejects_wrong_counts_and_nan(rng):
    mask = OccupancyMask(rng.random((3, 3, 3)) < 0.5)
    n = mask.count
    with pytest.raises(DimensionMismatch):
        VoxelGrid(GridDims(3, 3, 3, 3), mask, np.zeros(n + 1), np.zeros((n, 3)))
    bad = np.zeros(n)
    bad[0] = np.nan
    with pytest.raises(NonFiniteInput):
        VoxelGrid(GridDims(3, 3, 3, 3), mask, bad, np.zeros((n, 3)))


def test_grid_is_immutable(rng):
    g = random_grid(rng)
    with pytest.raises(ValueError):
        g.density[0] = 1.0
    with pytest.raises(Exception):
        g.dims = None


@given(st.tuples(*[st.floats(-2, 10, allow_nan=False)] * 3), shapes)
def test_trilinear_weights_sum_to_one(p, shape):
    corners, w = trilinear_corners(p, shape)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-6
    assert np.all(corners >= 0) and np.all(corners < np.asarray(shape))


def test_trilinear_sample_at_lattice_points_and_zero_outside_mask(rng):
    g = random_grid(rng)
    dense_d = g.dense_density(np.float64)
    for idx in [(0, 0, 0), (4, 5, 6), (2, 3, 1)]:
        sigma, color = trilinear_sample(g, idx)
        assert sigma == pytest.approx(dense_d[idx])
        np.testing.assert_allclose(color, g.dense_color(np.float64)[idx])
    # midpoint of an edge blends two neighbours, unoccupied ones count as zero
    sigma, _ = trilinear_sample(g, (0.5, 0, 0))
    assert sigma == pytest.approx(0.5 * (dense_d[0, 0, 0] + dense_d[1, 0, 0]))


def test_resize_constant_is_exact():
    arr = np.full((8, 8, 8), 3.25)
    for s in (Fraction(1, 4), Fraction(1, 2), Fraction(2), Fraction(4)):
        out = resize_dense(arr, s)
        assert np.all(out == 3.25)


@given(st.integers(0, 2**32 - 1), st.sampled_from([Fraction(1, 4), Fraction(1, 2), Fraction(2), Fraction(4)]))
def test_resize_linearity(seed, s):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(8, 9, 6, 3))
    b = rng.normal(size=(8, 9, 6, 3))
    x, y = 1.7, -0.4
    ga = VoxelGrid.from_dense(a[..., 0], a, dtype=np.float64)
    gb = VoxelGrid.from_dense(b[..., 0], b, dtype=np.float64)
    gab = VoxelGrid.from_dense(x * a[..., 0] + y * b[..., 0], x * a + y * b, dtype=np.float64)
    lhs = trilinear_resize(gab, s)
    ra, rb = trilinear_resize(ga, s), trilinear_resize(gb, s)
    np.testing.assert_allclose(lhs.color, x * ra.color + y * rb.color, atol=1e-5)
    np.testing.assert_allclose(lhs.density, x * ra.density + y * rb.density, atol=1e-5)


def test_resize_shapes_and_bad_factor(rng):
    g = random_grid(rng, (8, 6, 5), 3, fill=1.0)
    assert trilinear_resize(g, Fraction(1, 2)).dims.spatial == (4, 3, 3)
    assert trilinear_resize(g, 2).dims.spatial == (16, 12, 10)
    with pytest.raises(InvalidConfig):
        trilinear_resize(g, Fraction(1, 3))


def test_resize_scale_one_is_copy():
    arr = np.array([-0.0, 1.0]).repeat(4).reshape(2, 2, 2)
    out = resize_dense(arr, 1)
    assert out.tobytes() == arr.astype(np.float64).tobytes()


def test_sparsify_identity_is_bitexact(rng):
    g = random_grid(rng)
    assert sparsify(g, g.mask).equals(g)
    dense = VoxelGrid.from_dense(g.dense_density(), g.dense_color())
    assert sparsify(dense, g.mask).equals(g)


def test_sparsify_mask_mismatch(rng):
    g = random_grid(rng)
    with pytest.raises(DimensionMismatch):
        sparsify(g, OccupancyMask.dense((2, 2, 2)))


def test_coarsen_mask_or_semantics():
    bits = np.zeros((5, 4, 4), dtype=bool)
    bits[4, 3, 0] = True
    coarse = coarsen_mask(OccupancyMask(bits), Fraction(1, 2))
    assert coarse.shape == (3, 2, 2)
    assert coarse.count == 1 and coarse.bits[2, 1, 0]
    assert coarsen_mask(OccupancyMask(bits), Fraction(1, 4)).shape == (2, 1, 1)
    with pytest.raises(InvalidConfig):
        coarsen_mask(OccupancyMask(bits), Fraction(1, 3))


@given(arrays(bool, shapes))
def test_pointer_mask_round_trip(bits):
    mask = OccupancyMask(bits)
    ptr = mask_to_pointers(mask)
    assert ptr.size == mask.count
    assert pointers_to_mask(ptr, bits.shape) == mask


def test_pointer_errors():
    with pytest.raises(IndexOutOfRange):
        pointers_to_mask([0, 8], (2, 2, 2))
    with pytest.raises(NonMonotonicIndices):
        pointers_to_mask([3, 1], (2, 2, 2))
    with pytest.raises(NonMonotonicIndices):
        pointers_to_mask([1, 1], (2, 2, 2))


@given(st.lists(st.integers(0, 0xFFFF), min_size=16, max_size=16))
def test_f16_cast_identity(raw):
    values = np.array(raw, dtype=np.uint16).view(np.float16)
    values = np.where(np.isfinite(values), values, np.float16(0))
    mask = OccupancyMask(np.ones((2, 2, 4), dtype=bool))
    g = VoxelGrid(GridDims(2, 2, 4, 3), mask, values, np.repeat(values[:, None], 3, axis=1))
    back = g.cast(Precision.F32).cast(Precision.F16)
    assert back.density.tobytes() == g.density.tobytes()


def test_slot_grid(rng):
    g = random_grid(rng)
    slots = g.mask.slot_grid()
    assert slots[~g.mask.bits].max(initial=-1) == -1
    assert np.array_equal(np.sort(slots[g.mask.bits]), np.arange(g.occupied))
