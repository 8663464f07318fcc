import io
import struct
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxelzip.compress import CompressedModel, CompressionConfig, ImportantVoxelSet, SparsePlane, compress
from voxelzip.container import (MAGIC, SKIPPABLE, SectionId, decode_container, decode_indices, decode_raw_grid,
                                decode_varints, encode_container, encode_indices, encode_raw_grid,
                                encode_varints, load_container, models_equal, networks_equal, pack_mask,
                                read_container, read_header, save_container, storage_report, unpack_mask)
from voxelzip.errors import (BadMagic, ChecksumMismatch, DimensionMismatch, IoFailure, TruncatedSection, UnknownSection,
                             UnsupportedVersion)
from voxelzip.grid import GridDims, OccupancyMask, Precision, VoxelGrid, coarsen_mask
from voxelzip.ncb import NcbNetwork
from voxelzip.render import MarchConfig

from helpers import random_model

DATA = Path(__file__).parent / "data"
PRE = struct.Struct("<4sIII")
FIXED = struct.Struct("<4I2BQIH")
ENTRY = struct.Struct("<HQQQI")


def golden_model():
    """Small fixed model with an F16 network; its encoding is pinned in tests/data."""
    shape = (4, 5, 3)
    idx = np.arange(60).reshape(shape)
    bits = (idx % 3) != 1
    full = OccupancyMask(bits)
    cfg = CompressionConfig(scale_color=Fraction(1, 2), scale_density=Fraction(1), retain_fraction=0.25,
                            precision="f16", importance_rays=4096, probe_cameras=2,
                            march=MarchConfig(step=0.25))
    dd = SparsePlane(full, (np.arange(full.count) * 0.5).astype(np.float16))
    mc = coarsen_mask(full, cfg.scale_color)
    dc = SparsePlane(mc, (np.arange(mc.count * 3).reshape(-1, 3) / 7).astype(np.float16))
    occ = np.flatnonzero(bits.ravel())
    imp = ImportantVoxelSet(occ[[0, 5, 17]], [1.0, 2.0, 3.0], np.arange(9.0).reshape(3, 3))
    net = NcbNetwork.create(3, np.random.default_rng(42), 2, 1.0, (4,), (2,), (3, 3, 3),
                            head_std=0.1, mod_std=0.1).cast(Precision.F16)
    return CompressedModel(full, GridDims(*shape, 3), dd, dc, imp, cfg, net).check(), net


def rebuild(data, extra=()):
    """Re-emit a container with extra (sid, payload) sections appended, keeping CRCs valid."""
    h = read_header(data)
    blobs = [(e.sid, data[e.offset:e.offset + e.compressed_len], e.raw_len) for e in h.sections]
    blobs += [(sid, zlib.compress(raw), len(raw)) for sid, raw in extra]
    _, version, body_len, _ = PRE.unpack_from(data)
    fixed = bytearray(data[PRE.size:PRE.size + FIXED.size])
    struct.pack_into("<H", fixed, FIXED.size - 2, len(blobs))
    body_len = FIXED.size + len(blobs) * ENTRY.size
    off = PRE.size + body_len
    body = bytes(fixed)
    for sid, comp, raw_len in blobs:
        body += ENTRY.pack(sid, off, len(comp), raw_len, zlib.crc32(comp))
        off += len(comp)
    crc = zlib.crc32(struct.pack("<II", version, body_len) + body)
    return PRE.pack(MAGIC, version, body_len, crc) + body + b"".join(b[1] for b in blobs)


@given(st.lists(st.integers(0, 2**63 - 1), max_size=50))
def test_varint_round_trip(values):
    assert decode_varints(encode_varints(values)).tolist() == values


def test_varint_known_bytes():
    assert encode_varints([0, 127, 128, 300]) == bytes([0, 127, 0x80, 1, 0xAC, 2])
    with pytest.raises(DimensionMismatch):
        decode_varints(bytes([0x80]))


@given(st.lists(st.integers(0, 10**6), unique=True, max_size=40))
def test_index_delta_round_trip(values):
    idx = np.array(sorted(values), dtype=np.int64)
    assert np.array_equal(decode_indices(encode_indices(idx)), idx)


def test_mask_packing_is_lsb_first():
    bits = np.zeros((2, 2, 3), dtype=bool)
    bits.ravel()[[0, 9]] = True
    raw = pack_mask(OccupancyMask(bits))
    assert raw == bytes([0x01, 0x02])
    assert unpack_mask(raw, (2, 2, 3)) == OccupancyMask(bits)


def test_golden_fixture():
    model, net = golden_model()
    data = encode_container(model, net)
    golden = (DATA / "golden_v1.ncbc").read_bytes()
    assert data == golden
    m2, n2 = decode_container(golden)
    assert models_equal(model, m2) and networks_equal(net, n2)
    magic, version, body_len, _ = PRE.unpack_from(golden)
    assert magic == b"NCBC" and version == 1
    h = read_header(golden)
    assert [e.sid for e in h.sections] == [1, 2, 3, 4, 5, 6, 7]
    assert h.has_ncb and h.precision is Precision.F16 and h.retain_count == 3
    assert h.scale_codes == (2, 1)


@pytest.mark.parametrize("seed", range(30))
def test_random_round_trip(seed):
    model, net = random_model(np.random.default_rng(seed))
    m2, n2 = decode_container(encode_container(model, net))
    assert models_equal(model, m2)
    assert networks_equal(net, n2)


def test_empty_grid_round_trip():
    dims = GridDims(8, 8, 8, 3)
    g = VoxelGrid(dims, OccupancyMask.empty((8, 8, 8)), np.zeros(0), np.zeros((0, 3)))
    model = compress(g, config=CompressionConfig(retain_fraction=0.1))
    m2, n2 = decode_container(encode_container(model))
    assert models_equal(model, m2) and n2 is None


def test_skippable_unknown_section_is_ignored():
    model, net = golden_model()
    data = rebuild(encode_container(model, net), [(SKIPPABLE | 0x123, b"future")])
    m2, _ = decode_container(data)
    assert models_equal(model, m2)


def test_unknown_required_section_rejected():
    model, net = golden_model()
    with pytest.raises(UnknownSection):
        decode_container(rebuild(encode_container(model, net), [(0x123, b"future")]))


def test_corruption_names_the_section():
    model, net = golden_model()
    data = encode_container(model, net)
    h = read_header(data)
    for e in h.sections:
        bad = bytearray(data)
        bad[e.offset + e.compressed_len // 2] ^= 0x10
        with pytest.raises(ChecksumMismatch) as info:
            decode_container(bytes(bad))
        assert info.value.section == e.name
    bad = bytearray(data)
    bad[PRE.size + 3] ^= 1
    with pytest.raises(ChecksumMismatch) as info:
        decode_container(bytes(bad))
    assert info.value.section == "header"


def test_magic_version_and_truncation():
    model, net = golden_model()
    data = encode_container(model, net)
    with pytest.raises(BadMagic):
        decode_container(b"PNG\x89" + b"\0" * 40)
    with pytest.raises(ChecksumMismatch):
        decode_container(b"NCBX" + data[4:])
    head = read_header(data)
    with pytest.raises(TruncatedSection):
        decode_container(data[:head.sections[-1].offset + 1])
    # a valid header claiming a newer version
    body = data[PRE.size:head.header_bytes]
    crc = zlib.crc32(struct.pack("<II", 2, len(body)) + body)
    with pytest.raises(UnsupportedVersion):
        decode_container(PRE.pack(MAGIC, 2, len(body), crc) + body + data[head.header_bytes:])


def test_stream_and_file_io(tmp_path):
    model, net = golden_model()
    data = encode_container(model, net)
    m2, _ = read_container(io.BytesIO(data))
    assert models_equal(model, m2)
    path = tmp_path / "m.ncbc"
    assert save_container(path, model, net) == len(data)
    assert path.read_bytes() == data
    m3, n3 = load_container(path)
    assert models_equal(model, m3) and networks_equal(net, n3)


def test_atomic_save_keeps_old_file(tmp_path, monkeypatch):
    model, net = golden_model()
    path = tmp_path / "m.ncbc"
    path.write_bytes(b"old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(IoFailure):
        save_container(path, model, net)
    assert path.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["m.ncbc"]


def test_storage_report_identity_and_sections(small_scene):
    model = compress(small_scene, config=CompressionConfig.identity())
    rep = storage_report(model)
    n, c = small_scene.occupied, small_scene.dims.c
    assert rep.baseline_bytes == 4 * (1 + c) * n + 4 * n
    assert rep.total_bytes == len(encode_container(model))
    assert set(rep.sections) == {"MASK", "DOWN_DENSITY", "DOWN_COLOR", "IMPORTANT_IDX", "IMPORTANT_VAL", "META"}
    assert rep.header_bytes + sum(rep.sections.values()) == rep.total_bytes
    assert "ratio" in rep.table() and rep.to_dict()["ratio"] == rep.ratio


def test_storage_report_counts_ncb(small_scene):
    model = compress(small_scene, config=CompressionConfig(retain_fraction=0.0))
    net = NcbNetwork.create(27, np.random.default_rng(0), 4, 1.0, (8,), (4,), (8, 8, 8))
    without, with_ = storage_report(model), storage_report(model, net)
    assert "NCB_WEIGHTS" in with_.sections and with_.total_bytes > without.total_bytes
    assert with_.ratio < without.ratio


@pytest.mark.parametrize("prec", ["f16", "f32"])
def test_raw_grid_round_trip(small_scene, prec):
    g = small_scene.cast(prec)
    back = decode_raw_grid(encode_raw_grid(g))
    assert back.equals(g)
    data = encode_raw_grid(g)
    assert data[:4] == b"VXGR"
    with pytest.raises(BadMagic):
        decode_raw_grid(b"NCBC" + data[4:])
    with pytest.raises(TruncatedSection):
        decode_raw_grid(data[:-3])
