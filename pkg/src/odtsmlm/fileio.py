"""Binary volume and frame-stack containers, fluorophore CSV, hashing.

Volume container (little-endian)::

    16 bytes   magic b"ODTSMLM-VOLUME" + u16 version
    3 x u64    counts (Nx, Ny, Nz)
    6 x f64    spacing (dx, dy, dz), origin (x0, y0, z0)
    u8         value kind: 0 = real64, 1 = complex128
    data       voxel values, x fastest

Frame-stack container (little-endian)::

    16 bytes   magic b"ODTSMLM-FRAMES" + u16 version
    u8         frame dtype: 0 = f64, 1 = u32
    u8         backgrounds present (0/1)
    u64 x 4    L, planes (2), My, Mx
    u64        length of the UTF-8 key=value block
    bytes      key=value lines (biplane configuration)
    data       L frames in measurement order, then L f64 backgrounds if present
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .domain import FluorophoreSet, Grid3, ScatteringVolume
from .sensor import BiplaneConfig, FrameStack
from .waves import ComplexField

VERSION = 1
VOLUME_MAGIC = b"ODTSMLM-VOLUME"
FRAMES_MAGIC = b"ODTSMLM-FRAMES"
_KINDS = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_FRAME_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}


class FormatError(ValueError):
    """Malformed container; the message names the byte offset."""


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<H", VERSION)


def _check_header(buf: bytes, magic: bytes, what: str) -> None:
    if len(buf) < 16:
        raise FormatError(f"{what}: truncated header at byte offset {len(buf)}")
    if buf[:14] != magic:
        raise FormatError(f"{what}: bad magic at byte offset 0")
    (version,) = struct.unpack_from("<H", buf, 14)
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version} at byte offset 14")


def encode_volume(volume: ScatteringVolume | ComplexField) -> bytes:
    grid = volume.grid
    vals = np.asarray(volume.values)
    kind = 1 if np.iscomplexobj(vals) else 0
    out = io.BytesIO()
    out.write(_header(VOLUME_MAGIC))
    out.write(struct.pack("<3Q", *grid.counts))
    out.write(struct.pack("<6d", *grid.spacing, *grid.origin))
    out.write(struct.pack("<B", kind))
    out.write(np.asarray(vals, _KINDS[kind]).tobytes(order="F"))
    return out.getvalue()


def decode_volume(buf: bytes) -> ScatteringVolume | ComplexField:
    _check_header(buf, VOLUME_MAGIC, "volume")
    need = 16 + 24 + 48 + 1
    if len(buf) < need:
        raise FormatError(f"volume: truncated grid block at byte offset {len(buf)}")
    counts = struct.unpack_from("<3Q", buf, 16)
    geo = struct.unpack_from("<6d", buf, 40)
    (kind,) = struct.unpack_from("<B", buf, 88)
    if kind not in _KINDS:
        raise FormatError(f"volume: unknown value kind {kind} at byte offset 88")
    try:
        grid = Grid3(counts, geo[:3], geo[3:])
    except ValueError as exc:
        raise FormatError(f"volume: invalid grid at byte offset 16: {exc}") from None
    dtype = _KINDS[kind]
    n = grid.size * dtype.itemsize
    if len(buf) != need + n:
        raise FormatError(f"volume: expected {need + n} bytes, data ends at byte offset {len(buf)}")
    vals = np.frombuffer(buf, dtype, count=grid.size, offset=need).reshape(grid.shape, order="F")
    if kind == 1:
        return ComplexField(grid, vals.astype(complex))
    return ScatteringVolume(grid, vals.astype(float))


def write_volume(path, volume) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path):
    return decode_volume(Path(path).read_bytes())


def _kv_block(config: BiplaneConfig) -> bytes:
    lines = [f"{k}={json.dumps(v)}" for k, v in config.to_dict().items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def encode_frames(stack: FrameStack, dtype: str = "f64") -> bytes:
    tag = {"f64": 0, "u32": 1}[dtype]
    frames = np.asarray(stack.frames)
    if tag == 1:
        if np.any(frames < 0) or np.any(frames != np.round(frames)) or np.any(frames > 2**32 - 1):
            raise ValueError("u32 frame encoding needs nonnegative integer counts")
    my, mx = stack.config.plane_shape
    kv = _kv_block(stack.config)
    out = io.BytesIO()
    out.write(_header(FRAMES_MAGIC))
    out.write(struct.pack("<BB", tag, int(stack.backgrounds is not None)))
    out.write(struct.pack("<4Q", len(stack), 2, my, mx))
    out.write(struct.pack("<Q", len(kv)))
    out.write(kv)
    out.write(np.asarray(frames, _FRAME_DTYPES[tag]).tobytes())
    if stack.backgrounds is not None:
        out.write(np.asarray(stack.backgrounds, "<f8").tobytes())
    return out.getvalue()


def decode_frames(buf: bytes) -> FrameStack:
    _check_header(buf, FRAMES_MAGIC, "frames")
    off = 16
    if len(buf) < off + 2 + 32 + 8:
        raise FormatError(f"frames: truncated layout block at byte offset {len(buf)}")
    tag, has_bg = struct.unpack_from("<BB", buf, off)
    if tag not in _FRAME_DTYPES:
        raise FormatError(f"frames: unknown dtype tag {tag} at byte offset {off}")
    n, planes, my, mx = struct.unpack_from("<4Q", buf, off + 2)
    if planes != 2:
        raise FormatError(f"frames: expected 2 planes, got {planes} at byte offset {off + 10}")
    (kv_len,) = struct.unpack_from("<Q", buf, off + 34)
    off += 42
    if len(buf) < off + kv_len:
        raise FormatError(f"frames: truncated configuration block at byte offset {len(buf)}")
    try:
        items = {}
        for line in buf[off:off + kv_len].decode("utf-8").splitlines():
            k, v = line.split("=", 1)
            items[k] = json.loads(v)
        config = BiplaneConfig.from_dict(items)
    except (ValueError, KeyError) as exc:
        raise FormatError(f"frames: bad configuration block at byte offset {off}: {exc}") from None
    off += kv_len
    m = 2 * my * mx
    if (my, mx) != config.plane_shape:
        raise FormatError(f"frames: camera layout disagrees with configuration at byte offset {off}")
    dtype = _FRAME_DTYPES[tag]
    fbytes = n * m * dtype.itemsize
    bbytes = n * m * 8 if has_bg else 0
    if len(buf) != off + fbytes + bbytes:
        raise FormatError(
            f"frames: expected {off + fbytes + bbytes} bytes, data ends at byte offset {len(buf)}")
    frames = np.frombuffer(buf, dtype, count=n * m, offset=off).reshape(n, m)
    frames = frames.astype(np.int64) if tag == 1 else frames.astype(float)
    bg = None
    if has_bg:
        bg = np.frombuffer(buf, "<f8", count=n * m, offset=off + fbytes).reshape(n, m).copy()
    return FrameStack(config, frames, bg)


def write_frames(path, stack: FrameStack, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_frames(stack, dtype))


def read_frames(path) -> FrameStack:
    return decode_frames(Path(path).read_bytes())


CSV_HEADER = ["id", "x_um", "y_um", "z_um", "amplitude"]


def write_fluorophores(path, fset: FluorophoreSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, (p, a) in enumerate(zip(fset.positions, fset.amplitudes)):
            w.writerow([i, *(format(float(v), ".17g") for v in p), format(float(a), ".17g")])


def read_fluorophores(path) -> FluorophoreSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
    body = rows[1:]
    try:
        pos = [[float(r[1]), float(r[2]), float(r[3])] for r in body]
        amp = [float(r[4]) for r in body]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed row: {exc}") from None
    return FluorophoreSet(np.reshape(pos, (-1, 3)), amp)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
