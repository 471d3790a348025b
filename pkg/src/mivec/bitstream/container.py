"""The ``.mvb`` container: fixed header, three checksummed segments, trailing CRC.

Layout (big-endian)::

    "MVB1" u8 version
    u16 N, u16 T, u16 H, u16 W, u16 basic view, u8 backend id, u8 qp
    u32 len + UTF-8 grid/architecture JSON
    3 x (u32 len, bytes, u32 CRC-32)      metadata, explicit, implicit
    u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from ..errors import CorruptModelError, CorruptStreamError
from ..seqdata import CameraParams
from .expgolomb import BitReader, BitWriter

MAGIC = b"MVB1"
VERSION = 1
CAMERA_SCALE = 10_000
SEGMENTS = ("metadata", "explicit", "implicit")
_HEADER = struct.Struct(">4sBHHHHHBB")


@dataclass(frozen=True)
class BitstreamContainer:
    num_views: int
    num_frames: int
    height: int
    width: int
    basic_index: int
    backend_id: int
    qp: int
    grid_config: str
    metadata: bytes
    explicit: bytes
    implicit: bytes

    def to_bytes(self) -> bytes:
        out = bytearray(
            _HEADER.pack(
                MAGIC, VERSION, self.num_views, self.num_frames, self.height, self.width,
                self.basic_index, self.backend_id, self.qp,
            )
        )
        grid = self.grid_config.encode("utf-8")
        out += struct.pack(">I", len(grid)) + grid
        for name in SEGMENTS:
            seg = getattr(self, name)
            out += struct.pack(">I", len(seg)) + seg + struct.pack(">I", zlib.crc32(seg))
        out += struct.pack(">I", zlib.crc32(out))
        return bytes(out)

    @property
    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def segment_sizes(self) -> dict[str, int]:
        header = _HEADER.size + 4 + len(self.grid_config.encode("utf-8")) + 4
        sizes = {"header": header + 8 * len(SEGMENTS)}
        sizes.update({name: len(getattr(self, name)) for name in SEGMENTS})
        return sizes

    @classmethod
    def from_bytes(cls, data: bytes, allow_corrupt: tuple[str, ...] = ()) -> "BitstreamContainer":
        """Parse and verify; segments named in ``allow_corrupt`` come back empty instead of raising."""
        data = bytes(data)
        if len(data) < _HEADER.size + 4:
            raise CorruptStreamError("container shorter than its header", segment="header")
        magic, version, n, t, h, w, basic, backend, qp = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError("bad magic: not an .mvb container", segment="header")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported container version {version}", segment="header")
        if basic >= n:
            raise CorruptStreamError(f"basic view {basic} outside [0, {n})", segment="header")
        pos = _HEADER.size
        (glen,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + glen > len(data):
            raise CorruptStreamError("grid config block truncated", segment="header")
        try:
            grid = data[pos:pos + glen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStreamError(f"grid config is not UTF-8: {exc}", segment="header") from exc
        pos += glen

        segments = {}
        for name in SEGMENTS:
            error = CorruptModelError if name == "implicit" else CorruptStreamError
            try:
                if pos + 4 > len(data):
                    raise error(f"{name} segment missing", segment=name)
                (slen,) = struct.unpack_from(">I", data, pos)
                pos += 4
                if pos + slen + 4 > len(data):
                    raise error(f"{name} segment truncated ({len(data) - pos} of {slen + 4} bytes)", segment=name)
                seg = data[pos:pos + slen]
                (crc,) = struct.unpack_from(">I", data, pos + slen)
                pos += slen + 4
                if zlib.crc32(seg) != crc:
                    raise error(f"{name} segment CRC-32 mismatch", segment=name)
            except CorruptStreamError:
                if name not in allow_corrupt:
                    raise
                seg = b""
                pos = len(data)
            segments[name] = seg

        if not allow_corrupt:
            if pos + 4 != len(data):
                raise CorruptStreamError(f"{len(data) - pos - 4} unexpected trailing bytes", segment="header")
            (crc,) = struct.unpack_from(">I", data, pos)
            if zlib.crc32(data[:pos]) != crc:
                raise CorruptStreamError("container CRC-32 mismatch", segment="header")
        return cls(n, t, h, w, basic, backend, qp, grid, segments["metadata"], segments["explicit"], segments["implicit"])


def encode_cameras(cameras) -> bytes:
    """Camera rig as Exp-Golomb codes with positions/orientations at 1e-4 fixed point."""
    bw = BitWriter()
    cameras = list(cameras)
    bw.write_ue(len(cameras))
    for cam in cameras:
        bw.write_ue(cam.view_id)
        for v in cam.position + cam.orientation:
            bw.write_se(int(round(v * CAMERA_SCALE)))
    return bw.getvalue()


def decode_cameras(data: bytes) -> tuple[CameraParams, ...]:
    br = BitReader(data, segment="metadata")
    count = br.read_ue()
    cams = []
    for _ in range(count):
        vid = br.read_ue()
        vals = [br.read_se() / CAMERA_SCALE for _ in range(6)]
        cams.append(CameraParams(vid, tuple(vals[:3]), tuple(vals[3:])))
    if br.remaining >= 8:
        raise CorruptStreamError(f"{br.remaining} trailing bits in camera metadata", segment="metadata")
    return tuple(cams)
