"""Explicit 2D coding of the basic view.

Two backends: a built-in intra-only 8x8 block-DCT codec (integer levels coded
as zero-run/level pairs with Exp-Golomb codes) and an adapter that shells out
to an external encoder/decoder pair.
"""

from __future__ import annotations

import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .bitstream.expgolomb import BitReader, exp_golomb_encode_signed, exp_golomb_encode_unsigned, pack_bits
from .errors import BackendError, ConfigurationError, CorruptStreamError
from .seqdata import FRAME_FILE, from_bytes, to_bytes

BLOCK = 8
EOB_RUN = 63
BACKENDS = ("builtin_dct", "external")
_HEADER = struct.Struct(">HHH")


@dataclass(frozen=True)
class ExplicitCodecConfig:
    backend: str = "builtin_dct"
    qp: int = 22
    external_command_template: str | None = None
    external_decode_template: str | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown explicit backend {self.backend!r}")
        if not 0 <= self.qp <= 51:
            raise ConfigurationError(f"qp {self.qp} outside [0, 51]")
        if self.backend == "external" and not (
            self.external_command_template and self.external_decode_template
        ):
            raise ConfigurationError("external backend needs encode and decode command templates")

    @property
    def backend_id(self) -> int:
        return BACKENDS.index(self.backend)


@dataclass(frozen=True, eq=False)
class ExplicitResult:
    reconstructed: np.ndarray  # (T, H, W, 3) float32
    payload: bytes

    @property
    def bit_count(self) -> int:
        return 8 * len(self.payload)


def qstep(qp: int) -> float:
    """Quantizer step doubling every 6 QP, 1.0 at QP 4."""
    return 2.0 ** ((qp - 4) / 6.0)


@lru_cache(maxsize=None)
def dct_matrix() -> np.ndarray:
    k = np.arange(BLOCK)[:, None]
    n = np.arange(BLOCK)[None, :]
    mat = np.cos(np.pi * (2 * n + 1) * k / (2 * BLOCK)) * np.sqrt(2.0 / BLOCK)
    mat[0] /= np.sqrt(2.0)
    return mat


@lru_cache(maxsize=None)
def zigzag_order() -> np.ndarray:
    """Raster indices of the 8x8 block in zigzag scan order."""
    cells = sorted(
        ((y, x) for y in range(BLOCK) for x in range(BLOCK)),
        key=lambda p: (p[0] + p[1], p[0] if (p[0] + p[1]) % 2 else p[1]),
    )
    return np.array([y * BLOCK + x for y, x in cells])


def forward_dct(blocks: np.ndarray) -> np.ndarray:
    c = dct_matrix()
    return c @ blocks @ c.T


def inverse_dct(coefs: np.ndarray) -> np.ndarray:
    c = dct_matrix()
    return c.T @ coefs @ c


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2).reshape(-1, BLOCK, BLOCK)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // BLOCK, w // BLOCK, BLOCK, BLOCK).swapaxes(1, 2).reshape(h, w)


def _padding(height: int, width: int) -> tuple[int, int]:
    return -width % BLOCK, -height % BLOCK


def quantize_levels(frames: np.ndarray, qp: int) -> np.ndarray:
    """Zigzag-ordered integer levels, shape (T, 3, blocks, 64)."""
    t, h, w, _ = frames.shape
    pad_r, pad_b = _padding(h, w)
    padded = np.pad(frames.astype(np.float64), ((0, 0), (0, pad_b), (0, pad_r), (0, 0)), mode="edge")
    step = qstep(qp)
    zz = zigzag_order()
    out = []
    for frame in padded:
        chans = []
        for ch in range(3):
            coefs = forward_dct(_to_blocks(255.0 * frame[..., ch] - 128.0))
            scaled = coefs.reshape(-1, BLOCK * BLOCK)[:, zz] / step
            chans.append(np.sign(scaled) * np.floor(np.abs(scaled) + 0.5))
        out.append(chans)
    return np.asarray(out, dtype=np.int64).reshape(t, 3, -1, BLOCK * BLOCK)


def reconstruct_levels(levels: np.ndarray, qp: int, height: int, width: int) -> np.ndarray:
    pad_r, pad_b = _padding(height, width)
    ph, pw = height + pad_b, width + pad_r
    step = qstep(qp)
    raster = np.empty_like(levels, dtype=np.float64)
    raster[..., zigzag_order()] = levels * step
    frames = np.empty((levels.shape[0], ph, pw, 3))
    for t in range(levels.shape[0]):
        for ch in range(3):
            blocks = inverse_dct(raster[t, ch].reshape(-1, BLOCK, BLOCK))
            frames[t, ..., ch] = _from_blocks(blocks, ph, pw)
    frames = (frames[:, :height, :width] + 128.0) / 255.0
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


@lru_cache(maxsize=4096)
def _ue(v: int) -> str:
    return exp_golomb_encode_unsigned(v)


@lru_cache(maxsize=4096)
def _se(v: int) -> str:
    return exp_golomb_encode_signed(v)


def _code_levels(levels: np.ndarray) -> str:
    chunks = []
    eob = _ue(EOB_RUN)
    for block in levels.reshape(-1, BLOCK * BLOCK):
        pos = 0
        for idx in np.flatnonzero(block):
            run = int(idx) - pos
            if run == EOB_RUN:
                # a lone last coefficient would collide with the EOB sentinel
                chunks.append(_ue(EOB_RUN - 1) + _se(0))
                run = 0
            chunks.append(_ue(run) + _se(int(block[idx])))
            pos = int(idx) + 1
        chunks.append(eob)
    return "".join(chunks)


def _parse_levels(reader: BitReader, shape: tuple[int, ...]) -> np.ndarray:
    levels = np.zeros(shape, dtype=np.int64)
    flat = levels.reshape(-1, BLOCK * BLOCK)
    for b in range(flat.shape[0]):
        pos = 0
        while True:
            run = reader.read_ue()
            if run == EOB_RUN:
                break
            pos += run
            if pos >= BLOCK * BLOCK:
                reader._fail(f"coefficient index {pos} past end of block {b}")
            flat[b, pos] = reader.read_se()
            pos += 1
    return levels


def _builtin_encode(frames: np.ndarray, qp: int) -> ExplicitResult:
    t, h, w, _ = frames.shape
    pad_r, pad_b = _padding(h, w)
    header = _HEADER.pack(qp, pad_r, pad_b)
    if t == 0:
        return ExplicitResult(np.zeros((0, h, w, 3), np.float32), header)
    levels = quantize_levels(frames, qp)
    payload = header + pack_bits(_code_levels(levels))
    return ExplicitResult(reconstruct_levels(levels, qp, h, w), payload)


def _builtin_decode(payload: bytes, qp: int, height: int, width: int, num_frames: int) -> np.ndarray:
    if num_frames == 0:
        return np.zeros((0, height, width, 3), np.float32)
    if len(payload) < _HEADER.size:
        raise CorruptStreamError("explicit payload shorter than its header", segment="explicit")
    qp_echo, pad_r, pad_b = _HEADER.unpack_from(payload)
    if qp_echo != qp or (pad_r, pad_b) != _padding(height, width):
        raise CorruptStreamError(
            f"explicit header (qp={qp_echo}, pad={pad_r},{pad_b}) does not match stream parameters",
            segment="explicit",
        )
    ph, pw = height + pad_b, width + pad_r
    nblocks = (ph // BLOCK) * (pw // BLOCK)
    reader = BitReader(payload[_HEADER.size:], segment="explicit")
    levels = _parse_levels(reader, (num_frames, 3, nblocks, BLOCK * BLOCK))
    if reader.remaining >= 8:
        reader._fail(f"{reader.remaining} trailing bits")
    return reconstruct_levels(levels, qp, height, width)


def _run(template: str, **fields) -> None:
    args = [a.format(**fields) for a in shlex.split(template)]
    try:
        proc = subprocess.run(args, capture_output=True, text=True)
    except OSError as exc:
        raise BackendError(f"cannot start external codec {args[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise BackendError(
            f"external codec exited with {proc.returncode}: {' '.join(args)}\n{proc.stderr.strip()}"
        )


def _external_decode(payload: bytes, cfg: ExplicitCodecConfig, height: int, width: int, num_frames: int):
    with tempfile.TemporaryDirectory(prefix="mivec-dec-") as tmp:
        src = Path(tmp) / "stream.bin"
        out = Path(tmp) / "recon"
        out.mkdir()
        src.write_bytes(payload)
        _run(cfg.external_decode_template, input=src, output=out, qp=cfg.qp)
        frames = []
        for t in range(num_frames):
            path = out / FRAME_FILE.format(t=t)
            if not path.is_file():
                raise BackendError(f"external decoder produced no frame {t}")
            with Image.open(path) as im:
                frames.append(np.asarray(im.convert("RGB")))
    recon = from_bytes(np.stack(frames)) if frames else np.zeros((0, height, width, 3), np.float32)
    if recon.shape[1:3] != (height, width):
        raise BackendError(f"external decoder returned {recon.shape[1:3]}, expected {(height, width)}")
    return recon


def _external_encode(frames: np.ndarray, cfg: ExplicitCodecConfig) -> ExplicitResult:
    with tempfile.TemporaryDirectory(prefix="mivec-enc-") as tmp:
        src = Path(tmp) / "input"
        src.mkdir()
        for t, frame in enumerate(to_bytes(frames)):
            Image.fromarray(frame).save(src / FRAME_FILE.format(t=t))
        out = Path(tmp) / "stream.bin"
        _run(cfg.external_command_template, input=src, output=out, qp=cfg.qp)
        if not out.is_file():
            raise BackendError(f"external encoder wrote no output at {out}")
        payload = out.read_bytes()
    t, h, w = frames.shape[:3]
    return ExplicitResult(_external_decode(payload, cfg, h, w, t), payload)


def encode_view(view_frames: np.ndarray, cfg: ExplicitCodecConfig) -> ExplicitResult:
    frames = np.asarray(view_frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (T, H, W, 3) frames, got {frames.shape}")
    if cfg.backend == "external":
        return _external_encode(frames, cfg)
    return _builtin_encode(frames, cfg.qp)


def decode_view(payload: bytes, cfg: ExplicitCodecConfig, height: int, width: int, num_frames: int) -> np.ndarray:
    if cfg.backend == "external":
        return _external_decode(payload, cfg, height, width, num_frames)
    return _builtin_decode(payload, cfg.qp, height, width, num_frames)
