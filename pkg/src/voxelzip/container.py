"""NCBC container and the VXGR raw-grid interchange format.

NCBC byte layout (all integers little-endian)::

    0   4   magic "NCBC"
    4   4   u32 version
    8   4   u32 header_len            (bytes of the header body that follows the preamble)
    12  4   u32 header_crc            CRC-32 of bytes [4, 12) + header body
    16  ..  header body
              4 x u32   H, W, K, C
              2 x u8    color / density scale denominators (1, 2 or 4)
              u64       retain_count
              u32       flags (bit 0: has NCB, bit 1: tensors stored as F16)
              u16       section count
              per section: u16 id, u64 offset, u64 compressed_len, u64 raw_len, u32 crc32
    ..      sections, each an independent zlib stream (level 6), in id order

Section ids with bit 15 set may be skipped by readers that do not know them.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np

from .compress import CompressedModel, CompressionConfig, ImportantVoxelSet, SparsePlane
from .errors import (BadMagic, ChecksumMismatch, DimensionMismatch, InvalidConfig, IoFailure,
                     TruncatedSection, UnknownSection, UnsupportedVersion)
from .grid import GridDims, OccupancyMask, Precision, VoxelGrid, coarsen_mask
from .ncb import NcbNetwork, PositionalEncoder
from .render import MarchConfig

MAGIC = b"NCBC"
VERSION = 1
ZLIB_LEVEL = 6
SKIPPABLE = 0x8000

FLAG_HAS_NCB = 1
FLAG_F16 = 2

_PREAMBLE = struct.Struct("<4sIII")
_FIXED = struct.Struct("<4I2BQIH")
_ENTRY = struct.Struct("<HQQQI")

RAW_MAGIC = b"VXGR"
RAW_VERSION = 1
_RAW_HEAD = struct.Struct("<4sI4IB3xQ")

NCB_FORMAT = 1
_NCB_HEAD = struct.Struct("<IIIBxxxddBBBx")


class SectionId:
    MASK = 1
    DOWN_DENSITY = 2
    DOWN_COLOR = 3
    IMPORTANT_IDX = 4
    IMPORTANT_VAL = 5
    NCB_WEIGHTS = 6
    META = 7

    NAMES = {1: "MASK", 2: "DOWN_DENSITY", 3: "DOWN_COLOR", 4: "IMPORTANT_IDX",
             5: "IMPORTANT_VAL", 6: "NCB_WEIGHTS", 7: "META"}
    REQUIRED = (1, 2, 3, 4, 5, 7)

    @classmethod
    def name(cls, sid: int) -> str:
        return cls.NAMES.get(sid & ~SKIPPABLE, f"0x{sid:04x}")


@dataclass
class SectionEntry:
    sid: int
    offset: int
    compressed_len: int
    raw_len: int
    crc: int

    @property
    def name(self) -> str:
        return SectionId.name(self.sid)


@dataclass
class ContainerHeader:
    version: int
    dims: GridDims
    scale_codes: Tuple[int, int]
    retain_count: int
    flags: int
    sections: List[SectionEntry] = field(default_factory=list)
    header_bytes: int = 0

    @property
    def has_ncb(self) -> bool:
        return bool(self.flags & FLAG_HAS_NCB)

    @property
    def precision(self) -> Precision:
        return Precision.F16 if self.flags & FLAG_F16 else Precision.F32

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dims": [self.dims.h, self.dims.w, self.dims.k, self.dims.c],
            "scale_color": f"1/{self.scale_codes[0]}",
            "scale_density": f"1/{self.scale_codes[1]}",
            "retain_count": self.retain_count,
            "has_ncb": self.has_ncb,
            "precision": self.precision.value,
            "header_bytes": self.header_bytes,
            "sections": [{"id": s.sid, "name": s.name, "offset": s.offset,
                          "compressed_len": s.compressed_len, "raw_len": s.raw_len,
                          "crc32": f"{s.crc:08x}"} for s in self.sections],
        }


# -- small codecs ----------------------------------------------------------------------

def pack_mask(mask: OccupancyMask) -> bytes:
    """One bit per voxel, k fastest, LSB-first within each byte."""
    return np.packbits(mask.bits.ravel(), bitorder="little").tobytes()


def unpack_mask(data: bytes, shape) -> OccupancyMask:
    n = int(np.prod(shape))
    if len(data) != (n + 7) // 8:
        raise DimensionMismatch("packed mask length does not match the grid dims")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="little")
    return OccupancyMask(bits.astype(bool).reshape(shape))


def encode_varints(values) -> bytes:
    """Unsigned LEB128 of each value."""
    out = bytearray()
    for v in np.asarray(values, dtype=np.uint64).tolist():
        while True:
            byte = v & 0x7F
            v >>= 7
            if v:
                out.append(byte | 0x80)
            else:
                out.append(byte)
                break
    return bytes(out)


def decode_varints(data: bytes) -> np.ndarray:
    out = []
    cur = shift = 0
    for byte in data:
        cur |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
            if shift > 63:
                raise DimensionMismatch("varint too long")
        else:
            out.append(cur)
            cur = shift = 0
    if shift:
        raise DimensionMismatch("dangling varint continuation")
    return np.asarray(out, dtype=np.int64)


def encode_indices(indices: np.ndarray) -> bytes:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return b""
    return encode_varints(np.diff(idx, prepend=0))


def decode_indices(data: bytes) -> np.ndarray:
    return np.cumsum(decode_varints(data), dtype=np.int64)


def _le(arr: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


# -- NCB weights -----------------------------------------------------------------------

def pack_ncb(net: NcbNetwork) -> bytes:
    prec = Precision.F16 if net.precision is Precision.F16 else Precision.F32
    widths = net.trunk + net.density_branch + net.color_branch
    head = _NCB_HEAD.pack(NCB_FORMAT, net.encoder.l_count, net.channels,
                          1 if prec is Precision.F16 else 0, net.slope, net.eps,
                          len(net.trunk), len(net.density_branch), len(net.color_branch))
    parts = [head, struct.pack(f"<{len(widths)}I", *widths), _le(net.encoder.basis, "<f4")]
    parts += [_le(net.params[name], prec.dtype) for name in net.params]
    return b"".join(parts)


def unpack_ncb(data: bytes) -> NcbNetwork:
    try:
        fmt, l_count, channels, prec_code, slope, eps, nt, nd, nc = _NCB_HEAD.unpack_from(data, 0)
    except struct.error:
        raise TruncatedSection("NCB_WEIGHTS payload too short") from None
    if fmt != NCB_FORMAT:
        raise UnsupportedVersion(f"NCB weight format {fmt}")
    pos = _NCB_HEAD.size
    n_w = nt + nd + nc
    widths = struct.unpack_from(f"<{n_w}I", data, pos)
    pos += 4 * n_w
    prec = Precision.F16 if prec_code else Precision.F32
    basis = np.frombuffer(data, dtype="<f4", count=3 * l_count, offset=pos).reshape(l_count, 3)
    pos += basis.nbytes
    trunk, dens, col = widths[:nt], widths[nt:nt + nd], widths[nt + nd:]
    shapes = _shapes_for(channels, 2 * l_count, trunk, dens, col)
    params = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        if pos + count * prec.dtype.itemsize > len(data):
            raise TruncatedSection("NCB_WEIGHTS payload too short")
        arr = np.frombuffer(data, dtype=prec.dtype, count=count, offset=pos).reshape(shape)
        params[name] = arr.astype(prec.dtype.newbyteorder("="))
        pos += arr.nbytes
    if pos != len(data):
        raise DimensionMismatch("trailing bytes in NCB_WEIGHTS")
    return NcbNetwork(PositionalEncoder(basis.astype(np.float32)), channels, trunk, dens, col,
                      params, prec, float(slope), float(eps))


def _shapes_for(channels, p_dim, trunk, dens, col):
    from .ncb import _param_shapes
    return _param_shapes(channels, p_dim, trunk, dens, col)


# -- meta ------------------------------------------------------------------------------

def _meta(config: CompressionConfig) -> bytes:
    m = config.march
    doc = {
        "retain_fraction": config.retain_fraction,
        "importance_rays": config.importance_rays,
        "probe_cameras": config.probe_cameras,
        "march": {"step": m.step, "termination_threshold": m.termination_threshold,
                  "early_termination": m.early_termination, "step_multiplier": m.step_multiplier,
                  "combine_lanes": m.combine_lanes},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _config_from(meta: bytes, header: ContainerHeader) -> CompressionConfig:
    try:
        doc = json.loads(meta.decode("utf-8"))
        march = MarchConfig(**doc["march"])
        return CompressionConfig(scale_color=Fraction(1, header.scale_codes[0]),
                                 scale_density=Fraction(1, header.scale_codes[1]),
                                 retain_fraction=float(doc["retain_fraction"]),
                                 importance_rays=int(doc["importance_rays"]),
                                 precision=header.precision,
                                 probe_cameras=int(doc["probe_cameras"]), march=march)
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidConfig(f"META section unreadable: {exc}") from None


def _scale_code(scale: Fraction) -> int:
    if scale.numerator != 1 or scale.denominator not in (1, 2, 4):
        raise InvalidConfig(f"scale {scale} cannot be stored")
    return scale.denominator


# -- write -----------------------------------------------------------------------------

def _payloads(model: CompressedModel, ncb: Optional[NcbNetwork]) -> List[Tuple[int, bytes]]:
    prec = model.config.precision
    imp = model.important
    payloads = [
        (SectionId.MASK, pack_mask(model.full_mask)),
        (SectionId.DOWN_DENSITY, _le(model.down_density.values, prec.dtype)),
        (SectionId.DOWN_COLOR, _le(model.down_color.values, prec.dtype)),
        (SectionId.IMPORTANT_IDX, encode_indices(imp.indices)),
        (SectionId.IMPORTANT_VAL, _le(imp.density, "<f4") + _le(imp.color, "<f4")),
    ]
    if ncb is not None:
        payloads.append((SectionId.NCB_WEIGHTS, pack_ncb(ncb)))
    payloads.append((SectionId.META, _meta(model.config)))
    return payloads


def encode_container(model: CompressedModel, ncb: Optional[NcbNetwork] = None) -> bytes:
    model.check()
    if ncb is None:
        ncb = model.ncb
    cfg = model.config
    dims = model.original_dims
    blobs = []
    for sid, raw in _payloads(model, ncb):
        comp = zlib.compress(raw, ZLIB_LEVEL)
        blobs.append((sid, comp, len(raw)))
    n = len(blobs)
    body_len = _FIXED.size + n * _ENTRY.size
    offset = _PREAMBLE.size + body_len
    flags = (FLAG_HAS_NCB if ncb is not None else 0) | (FLAG_F16 if cfg.precision is Precision.F16 else 0)
    body = bytearray(_FIXED.pack(dims.h, dims.w, dims.k, dims.c, _scale_code(cfg.scale_color),
                                 _scale_code(cfg.scale_density), len(model.important), flags, n))
    for sid, comp, raw_len in blobs:
        body += _ENTRY.pack(sid, offset, len(comp), raw_len, zlib.crc32(comp))
        offset += len(comp)
    crc = zlib.crc32(struct.pack("<II", VERSION, body_len) + bytes(body))
    out = [_PREAMBLE.pack(MAGIC, VERSION, body_len, crc), bytes(body)]
    out += [comp for _, comp, _ in blobs]
    return b"".join(out)


def write_container(model: CompressedModel, ncb: Optional[NcbNetwork], sink: BinaryIO) -> int:
    data = encode_container(model, ncb)
    try:
        sink.write(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(data)


def save_container(path, model: CompressedModel, ncb: Optional[NcbNetwork] = None) -> int:
    """Write atomically: a temp file in the target directory, fsync, then rename."""
    return atomic_write(path, encode_container(model, ncb))


def atomic_write(path, data: bytes) -> int:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return len(data)


# -- read ------------------------------------------------------------------------------

def read_header(data: bytes) -> ContainerHeader:
    if len(data) < _PREAMBLE.size:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise BadMagic("not an NCBC container")
        raise TruncatedSection("file shorter than the container preamble")
    magic, version, body_len, crc = _PREAMBLE.unpack_from(data, 0)
    end = _PREAMBLE.size + body_len
    body = data[_PREAMBLE.size:end]
    crc_ok = len(body) == body_len and zlib.crc32(data[4:12] + body) == crc
    if magic != MAGIC:
        # a damaged magic on an otherwise intact header is corruption, not a foreign file
        if crc_ok:
            raise ChecksumMismatch("header", "container magic is corrupted")
        raise BadMagic(f"expected magic {MAGIC!r}, got {magic!r}")
    if not crc_ok:
        # a short body means the length field or the file is damaged; the CRC cannot vouch for either
        raise ChecksumMismatch("header")
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version}, this reader supports {VERSION}")
    try:
        h, w, k, c, sc, sd, retain, flags, n = _FIXED.unpack_from(body, 0)
        entries = [SectionEntry(*_ENTRY.unpack_from(body, _FIXED.size + i * _ENTRY.size))
                   for i in range(n)]
    except struct.error:
        raise TruncatedSection("section table is truncated") from None
    return ContainerHeader(version, GridDims(h, w, k, c), (sc, sd), retain, flags, entries, end)


def _section_bytes(data: bytes, entry: SectionEntry) -> bytes:
    end = entry.offset + entry.compressed_len
    if end > len(data):
        raise TruncatedSection(f"section {entry.name} extends past end of file")
    comp = data[entry.offset:end]
    if zlib.crc32(comp) != entry.crc:
        raise ChecksumMismatch(entry.name)
    try:
        raw = zlib.decompress(comp)
    except zlib.error:
        raise ChecksumMismatch(entry.name, f"section {entry.name} does not inflate") from None
    if len(raw) != entry.raw_len:
        raise ChecksumMismatch(entry.name, f"section {entry.name} inflated to the wrong length")
    return raw


def read_sections(data: bytes, header: Optional[ContainerHeader] = None) -> Dict[int, bytes]:
    header = header or read_header(data)
    out: Dict[int, bytes] = {}
    prev_end = header.header_bytes
    for e in header.sections:
        if e.offset < prev_end:
            raise ChecksumMismatch(e.name, "section table has overlapping or unordered offsets")
        prev_end = e.offset + e.compressed_len
        sid = e.sid & ~SKIPPABLE
        if sid not in SectionId.NAMES:
            if e.sid & SKIPPABLE:
                continue
            raise UnknownSection(f"unknown section id 0x{e.sid:04x}")
        if sid in out:
            raise ChecksumMismatch(e.name, f"section {e.name} appears twice")
        out[sid] = _section_bytes(data, e)
    for sid in SectionId.REQUIRED:
        if sid not in out:
            raise TruncatedSection(f"required section {SectionId.name(sid)} missing")
    if header.has_ncb != (SectionId.NCB_WEIGHTS in out):
        raise ChecksumMismatch("NCB_WEIGHTS", "NCB flag disagrees with the section table")
    return out


def _values(raw: bytes, dtype, rows: int, cols: int = 0, name: str = "") -> np.ndarray:
    dtype = np.dtype(dtype)
    per = dtype.itemsize * (cols or 1)
    if len(raw) != rows * per:
        raise DimensionMismatch(f"section {name}: {len(raw)} bytes for {rows} rows")
    arr = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
    return arr.reshape(rows, cols) if cols else arr


def decode_container(data: bytes) -> Tuple[CompressedModel, Optional[NcbNetwork]]:
    header = read_header(data)
    sec = read_sections(data, header)
    dims = header.dims
    config = _config_from(sec[SectionId.META], header)
    prec = header.precision
    full_mask = unpack_mask(sec[SectionId.MASK], dims.spatial)
    mask_d = coarsen_mask(full_mask, config.scale_density)
    mask_c = coarsen_mask(full_mask, config.scale_color)
    down_d = SparsePlane(mask_d, _values(sec[SectionId.DOWN_DENSITY], prec.dtype, mask_d.count,
                                         name="DOWN_DENSITY"))
    down_c = SparsePlane(mask_c, _values(sec[SectionId.DOWN_COLOR], prec.dtype, mask_c.count, dims.c,
                                         name="DOWN_COLOR"))
    idx = decode_indices(sec[SectionId.IMPORTANT_IDX])
    n = header.retain_count
    if idx.size != n:
        raise DimensionMismatch("important index count disagrees with the header")
    vals = sec[SectionId.IMPORTANT_VAL]
    if len(vals) != 4 * n * (1 + dims.c):
        raise DimensionMismatch("important value section has the wrong size")
    dens = _values(vals[:4 * n], "<f4", n, name="IMPORTANT_VAL")
    col = _values(vals[4 * n:], "<f4", n, dims.c, name="IMPORTANT_VAL")
    important = ImportantVoxelSet(idx, dens, col)
    if n and (idx[0] < 0 or not full_mask.bits.ravel()[idx].all()):
        raise DimensionMismatch("important voxels must be occupied")
    ncb = unpack_ncb(sec[SectionId.NCB_WEIGHTS]) if SectionId.NCB_WEIGHTS in sec else None
    model = CompressedModel(full_mask, dims, down_d, down_c, important, config, ncb)
    return model.check(), ncb


def read_container(source: Union[bytes, bytearray, BinaryIO]) -> Tuple[CompressedModel, Optional[NcbNetwork]]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode_container(bytes(source))
    try:
        data = source.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_container(data)


def load_container(path) -> Tuple[CompressedModel, Optional[NcbNetwork]]:
    return read_container(_read_file(path))


def _read_file(path) -> bytes:
    from .errors import InputNotFound
    p = Path(path)
    if not p.is_file():
        raise InputNotFound(f"no such file: {p}")
    try:
        return p.read_bytes()
    except OSError as exc:
        raise IoFailure(f"{p}: {exc}") from exc


def models_equal(a: CompressedModel, b: CompressedModel) -> bool:
    """Field-by-field equality, comparing tensors bit for bit."""
    def same(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()

    return (a.full_mask == b.full_mask and a.original_dims == b.original_dims
            and a.config == b.config
            and a.down_density.mask == b.down_density.mask and same(a.down_density.values, b.down_density.values)
            and a.down_color.mask == b.down_color.mask and same(a.down_color.values, b.down_color.values)
            and same(a.important.indices, b.important.indices)
            and same(a.important.density, b.important.density)
            and same(a.important.color, b.important.color))


def networks_equal(a: Optional[NcbNetwork], b: Optional[NcbNetwork]) -> bool:
    if a is None or b is None:
        return a is b
    if (a.channels, a.trunk, a.density_branch, a.color_branch, a.precision, a.slope, a.eps) != \
            (b.channels, b.trunk, b.density_branch, b.color_branch, b.precision, b.slope, b.eps):
        return False
    if a.encoder.basis.tobytes() != b.encoder.basis.tobytes() or list(a.params) != list(b.params):
        return False
    return all(a.params[k].dtype == b.params[k].dtype and a.params[k].tobytes() == b.params[k].tobytes()
               for k in a.params)


# -- storage report --------------------------------------------------------------------

@dataclass
class StorageReport:
    sections: Dict[str, int]
    header_bytes: int
    total_bytes: int
    occupied: int
    channels: int
    mask_bits: int

    @property
    def baseline_bytes(self) -> int:
        # F32 density + C features per voxel, plus a 4-byte pointer per voxel
        return 4 * (1 + self.channels) * self.occupied + 4 * self.occupied

    @property
    def ratio(self) -> float:
        return self.baseline_bytes / self.total_bytes if self.total_bytes else float("inf")

    def to_dict(self) -> dict:
        return {"sections": dict(self.sections), "header_bytes": self.header_bytes,
                "total_bytes": self.total_bytes, "baseline_bytes": self.baseline_bytes,
                "occupied": self.occupied, "mask_bits": self.mask_bits, "ratio": self.ratio}

    def table(self) -> str:
        rows = [("header", self.header_bytes)] + list(self.sections.items())
        rows += [("total", self.total_bytes), ("baseline_f32", self.baseline_bytes)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:>12d}" for name, val in rows]
        lines.append(f"{'ratio':<{width}}  {self.ratio:>12.2f}")
        return "\n".join(lines)


def storage_report(model: CompressedModel, ncb: Optional[NcbNetwork] = None) -> StorageReport:
    data = encode_container(model, ncb)
    header = read_header(data)
    sections = {e.name: e.compressed_len for e in header.sections}
    return StorageReport(sections, header.header_bytes, len(data), model.full_mask.count,
                         model.original_dims.c, model.full_mask.bits.size)


# -- VXGR raw grids --------------------------------------------------------------------

def encode_raw_grid(grid: VoxelGrid, precision: Optional[Precision] = None) -> bytes:
    if precision is None:
        precision = Precision.F16 if grid.density.dtype == np.float16 else Precision.F32
    precision = Precision.parse(precision)
    d = grid.dims
    head = _RAW_HEAD.pack(RAW_MAGIC, RAW_VERSION, d.h, d.w, d.k, d.c,
                          1 if precision is Precision.F16 else 0, grid.occupied)
    return b"".join([head, pack_mask(grid.mask), _le(grid.density, precision.dtype),
                     _le(grid.color, precision.dtype)])


def decode_raw_grid(data: bytes) -> VoxelGrid:
    if data[:4] != RAW_MAGIC:
        raise BadMagic(f"expected magic {RAW_MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _RAW_HEAD.size:
        raise TruncatedSection("raw grid header is truncated")
    _, version, h, w, k, c, prec_code, n = _RAW_HEAD.unpack_from(data, 0)
    if version != RAW_VERSION:
        raise UnsupportedVersion(f"raw grid version {version}")
    dims = GridDims(h, w, k, c)
    prec = Precision.F16 if prec_code else Precision.F32
    mask_len = (dims.size + 7) // 8
    need = _RAW_HEAD.size + mask_len + n * (1 + c) * prec.dtype.itemsize
    if len(data) < need:
        raise TruncatedSection("raw grid payload is truncated")
    pos = _RAW_HEAD.size
    mask = unpack_mask(data[pos:pos + mask_len], dims.spatial)
    if mask.count != n:
        raise DimensionMismatch("raw grid count disagrees with its mask")
    pos += mask_len
    dens = _values(data[pos:pos + n * prec.dtype.itemsize], prec.dtype, n, name="density")
    pos += n * prec.dtype.itemsize
    col = _values(data[pos:need], prec.dtype, n, c, name="color")
    return VoxelGrid(dims, mask, dens, col)


def save_raw_grid(path, grid: VoxelGrid, precision: Optional[Precision] = None) -> int:
    return atomic_write(path, encode_raw_grid(grid, precision))


def load_raw_grid(path) -> VoxelGrid:
    return decode_raw_grid(_read_file(path))
