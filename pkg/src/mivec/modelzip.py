"""Model compression: quantile pruning, tanh 8-bit quantization, canonical Huffman.

Serialized layout (big-endian)::

    "MVIC"  u8 version
    u32 len + UTF-8 architecture JSON
    u32 tensor count, per tensor: u8 kind (0 quantized, 1 float), u8 rank, u32 dims...
    u64 quantizable parameter count
    u8 mask mode (0: everything kept, 1: packed MSB-first bitmap follows)
    [mask bytes]
    u32 kept count
    255 x u8 code lengths for symbols -127..127
    u64 payload bit length, payload bytes
    u32 float count, float32 values
    u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import heapq
import struct
import zlib
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .bitstream.expgolomb import BitReader, pack_bits
from .errors import CorruptModelError, ValidationError
from .inrnet import ImplicitModel, ModelConfig

MAGIC = b"MVIC"
VERSION = 1
QMAX = 127
ALPHABET = 2 * QMAX + 1
KIND_QUANT = 0
KIND_FLOAT = 1


@dataclass(frozen=True, eq=False)
class PruneResult:
    mask: np.ndarray  # bool, True = kept
    threshold: float
    pruned_fraction: float


def prune(params, fraction: float) -> PruneResult:
    """Zero every entry whose magnitude is below the ``fraction`` nearest-rank quantile."""
    if not 0.0 <= fraction < 1.0:
        raise ValidationError(f"prune fraction must lie in [0, 1), got {fraction}")
    values = np.asarray(params, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("cannot prune an empty parameter list")
    mags = np.abs(values)
    threshold = float(np.sort(mags)[int(np.floor(fraction * values.size))])
    mask = mags >= threshold
    return PruneResult(mask, threshold, int(mask.size - mask.sum()) / mask.size)


def quantize(params, mask=None, qmax: int = QMAX) -> np.ndarray:
    """sign(d) * floor(|tanh(d)| * qmax) for the kept entries, as int8."""
    d = np.asarray(params, dtype=np.float64).ravel()
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool).ravel()]
    return (np.sign(d) * np.floor(np.abs(np.tanh(d)) * qmax)).astype(np.int8)


def dequantize(levels, qmax: int = QMAX) -> np.ndarray:
    lv = np.asarray(levels)
    if lv.size and (lv.min() < -qmax or lv.max() > qmax):
        raise CorruptModelError(f"quantized level outside [-{qmax}, {qmax}]")
    return lv.astype(np.float32) / np.float32(qmax)


# ---------------------------------------------------------------------------
# Canonical Huffman
# ---------------------------------------------------------------------------


def _symbol_index(sym: int) -> int:
    return int(sym) + QMAX


def huffman_code_lengths(symbols) -> list[int]:
    """Code length per alphabet slot (index = symbol + 127); 0 for absent symbols."""
    counts = Counter(int(s) for s in np.asarray(symbols).ravel())
    if not counts:
        raise ValidationError("cannot build a Huffman code for an empty stream")
    lengths = [0] * ALPHABET
    for s in counts:
        if not -QMAX <= s <= QMAX:
            raise ValidationError(f"symbol {s} outside [-{QMAX}, {QMAX}]")
    if len(counts) == 1:
        lengths[_symbol_index(next(iter(counts)))] = 1
        return lengths
    # heap items: (weight, tiebreak, leaf symbols)
    heap = [(n, _symbol_index(s), [s]) for s, n in sorted(counts.items())]
    heapq.heapify(heap)
    tiebreak = ALPHABET
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        for s in a + b:
            lengths[_symbol_index(s)] += 1
        heapq.heappush(heap, (w1 + w2, tiebreak, a + b))
        tiebreak += 1
    return lengths


def fixed_length_table() -> list[int]:
    """All 255 symbols at 8 bits: plain fixed-length coding through the same container."""
    return [8] * ALPHABET


def canonical_codes(lengths) -> dict[int, str]:
    """Symbol -> code string; shorter codes first, ties by ascending symbol value."""
    order = sorted((l, i - QMAX) for i, l in enumerate(lengths) if l > 0)
    codes = {}
    code = 0
    prev = order[0][0] if order else 0
    for length, sym in order:
        code <<= length - prev
        codes[sym] = format(code, f"0{length}b")
        code += 1
        prev = length
    return codes


def kraft_ok(lengths) -> bool:
    return sum(2.0 ** -l for l in lengths if l > 0) <= 1.0 + 1e-12


def huffman_encode(symbols, lengths=None) -> tuple[list[int], str]:
    symbols = np.asarray(symbols).ravel()
    if lengths is None:
        lengths = huffman_code_lengths(symbols)
    codes = canonical_codes(lengths)
    try:
        bits = "".join(codes[int(s)] for s in symbols)
    except KeyError as exc:
        raise ValidationError(f"symbol {exc} has no code in the table") from exc
    return list(lengths), bits


def huffman_decode(lengths, payload, count: int, bit_length: int | None = None) -> np.ndarray:
    """Decode ``count`` symbols from ``payload`` (bytes or a '0'/'1' string)."""
    if len(lengths) != ALPHABET or any(l < 0 for l in lengths):
        raise CorruptModelError("Huffman table must hold 255 non-negative lengths")
    if not kraft_ok(lengths):
        raise CorruptModelError("Huffman table violates the Kraft inequality")
    bits = payload if isinstance(payload, str) else BitReader(payload, bit_length, segment="implicit").bits
    if count == 0:
        return np.zeros(0, dtype=np.int8)
    order = sorted((l, i - QMAX) for i, l in enumerate(lengths) if l > 0)
    if not order:
        raise CorruptModelError("empty Huffman table for a non-empty stream")
    max_len = order[-1][0]
    # canonical decoding tables: first code and symbol offset per length
    first = [0] * (max_len + 2)
    counts = [0] * (max_len + 2)
    offset = [0] * (max_len + 2)
    for l, _ in order:
        counts[l] += 1
    code = 0
    pos = 0
    for l in range(1, max_len + 1):
        code <<= 1
        first[l] = code
        offset[l] = pos
        code += counts[l]
        pos += counts[l]
    syms = [s for _, s in order]

    out = np.empty(count, dtype=np.int8)
    n = len(bits)
    i = 0
    for k in range(count):
        code = 0
        l = 0
        while True:
            if i >= n:
                raise CorruptModelError(f"payload ended after {k} of {count} symbols")
            code = (code << 1) | (bits[i] == "1")
            i += 1
            l += 1
            idx = code - first[l] if l <= max_len else -1
            if 0 <= idx < counts[l]:
                out[k] = syms[offset[l] + idx]
                break
            if l >= max_len:
                raise CorruptModelError(f"invalid prefix code at bit {i}")
    return out


# ---------------------------------------------------------------------------
# Compressed model container
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CompressedModel:
    architecture: str
    tensors: tuple[tuple[int, tuple[int, ...]], ...]  # (kind, shape) in canonical order
    total_quantizable: int
    mask: np.ndarray | None  # bool over quantizable entries; None = all kept
    levels: np.ndarray  # int8, kept entries only
    code_lengths: tuple[int, ...]
    floats: np.ndarray  # float32 biases, canonical order

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_json(self.architecture)

    @property
    def kept_count(self) -> int:
        return int(self.levels.size)

    @property
    def total_params(self) -> int:
        return self.total_quantizable + int(self.floats.size)

    def payload_bits(self) -> str:
        return huffman_encode(self.levels, self.code_lengths)[1]

    def __eq__(self, other):
        if not isinstance(other, CompressedModel):
            return NotImplemented
        masks_equal = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask)
        )
        return (
            self.architecture == other.architecture
            and self.tensors == other.tensors
            and self.total_quantizable == other.total_quantizable
            and masks_equal
            and np.array_equal(self.levels, other.levels)
            and tuple(self.code_lengths) == tuple(other.code_lengths)
            and np.array_equal(self.floats.view(np.uint32), other.floats.view(np.uint32))
        )


def flatten_quantizable(model: ImplicitModel) -> np.ndarray:
    return np.concatenate(
        [p.detach().double().reshape(-1).numpy() for n, p in model.named_parameters() if model.is_quantizable(n)]
    )


def split_mask(model: ImplicitModel, mask: np.ndarray) -> dict[str, torch.Tensor]:
    out = {}
    pos = 0
    for name, p in model.named_parameters():
        if model.is_quantizable(name):
            n = p.numel()
            out[name] = torch.from_numpy(mask[pos:pos + n].reshape(p.shape).astype(np.float32)).to(p.dtype)
            pos += n
    return out


def compress_model(model: ImplicitModel, mask: np.ndarray | None = None, entropy: bool = True) -> CompressedModel:
    flat = flatten_quantizable(model)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != flat.size:
            raise ValidationError(f"mask covers {mask.size} entries, model has {flat.size}")
        if mask.all():
            mask = None
    levels = quantize(flat, mask)
    if entropy and levels.size:
        lengths = huffman_code_lengths(levels)
    else:
        lengths = fixed_length_table()
    tensors = tuple(
        (KIND_QUANT if model.is_quantizable(n) else KIND_FLOAT, tuple(p.shape)) for n, p in model.named_parameters()
    )
    floats = [p.detach().float().reshape(-1).numpy() for n, p in model.named_parameters() if not model.is_quantizable(n)]
    return CompressedModel(
        model.config.to_json(),
        tensors,
        int(flat.size),
        mask,
        levels,
        tuple(lengths),
        np.concatenate(floats).astype(np.float32) if floats else np.zeros(0, np.float32),
    )


def decompress_model(cm: CompressedModel) -> ImplicitModel:
    """Rebuild the dequantized model a decoder would run."""
    model = ImplicitModel(cm.config)
    expected = tuple(
        (KIND_QUANT if model.is_quantizable(n) else KIND_FLOAT, tuple(p.shape)) for n, p in model.named_parameters()
    )
    if expected != cm.tensors:
        raise CorruptModelError("tensor table does not match the architecture block")
    values = np.zeros(cm.total_quantizable, dtype=np.float32)
    if cm.mask is None:
        values[:] = dequantize(cm.levels)
    else:
        values[cm.mask] = dequantize(cm.levels)
    qpos = fpos = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            n = p.numel()
            if model.is_quantizable(name):
                src = values[qpos:qpos + n]
                qpos += n
            else:
                src = cm.floats[fpos:fpos + n]
                fpos += n
            p.copy_(torch.from_numpy(src.reshape(p.shape).copy()))
    model.eval()
    return model


def serialize(cm: CompressedModel) -> bytes:
    arch = cm.architecture.encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack(">BI", VERSION, len(arch)) + arch
    out += struct.pack(">I", len(cm.tensors))
    for kind, shape in cm.tensors:
        out += struct.pack(">BB", kind, len(shape)) + struct.pack(f">{len(shape)}I", *shape)
    out += struct.pack(">Q", cm.total_quantizable)
    if cm.mask is None:
        out += struct.pack(">B", 0)
    else:
        out += struct.pack(">B", 1) + np.packbits(cm.mask.astype(np.uint8)).tobytes()
    out += struct.pack(">I", cm.kept_count)
    out += bytes(cm.code_lengths)
    bits = cm.payload_bits()
    out += struct.pack(">Q", len(bits)) + pack_bits(bits)
    out += struct.pack(">I", cm.floats.size) + cm.floats.astype(">f4").tobytes()
    out += struct.pack(">I", zlib.crc32(out))
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptModelError(f"model segment truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def deserialize(data: bytes) -> CompressedModel:
    data = bytes(data)
    if len(data) < len(MAGIC) + 5 or data[:4] != MAGIC:
        raise CorruptModelError("bad magic: not a compressed model")
    body, (crc,) = data[:-4], struct.unpack(">I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptModelError("CRC-32 mismatch in compressed model")
    cur = _Cursor(body)
    cur.take(4)
    version, arch_len = cur.unpack(">BI")
    if version != VERSION:
        raise CorruptModelError(f"unsupported model version {version}")
    try:
        architecture = cur.take(arch_len).decode("utf-8")
        ModelConfig.from_json(architecture)
    except (UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
        raise CorruptModelError(f"unreadable architecture block: {exc}") from exc
    (ntensors,) = cur.unpack(">I")
    tensors = []
    for _ in range(ntensors):
        kind, rank = cur.unpack(">BB")
        tensors.append((kind, tuple(cur.unpack(f">{rank}I"))))
    (total,) = cur.unpack(">Q")
    quant_total = sum(int(np.prod(s)) for k, s in tensors if k == KIND_QUANT)
    if quant_total != total:
        raise CorruptModelError(f"tensor table holds {quant_total} quantized entries, header says {total}")
    (mask_mode,) = cur.unpack(">B")
    if mask_mode == 0:
        mask = None
        expected_kept = total
    elif mask_mode == 1:
        raw = np.frombuffer(cur.take((total + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(raw)[:total].astype(bool)
        expected_kept = int(mask.sum())
    else:
        raise CorruptModelError(f"unknown mask mode {mask_mode}")
    (kept,) = cur.unpack(">I")
    if kept != expected_kept:
        raise CorruptModelError(f"kept count {kept} disagrees with mask ({expected_kept})")
    lengths = tuple(cur.take(ALPHABET))
    (nbits,) = cur.unpack(">Q")
    payload = cur.take((nbits + 7) // 8)
    levels = huffman_decode(lengths, payload, kept, nbits)
    (nfloats,) = cur.unpack(">I")
    floats = np.frombuffer(cur.take(4 * nfloats), dtype=">f4").astype(np.float32)
    float_total = sum(int(np.prod(s)) for k, s in tensors if k == KIND_FLOAT)
    if nfloats != float_total:
        raise CorruptModelError(f"float block holds {nfloats} values, tensor table needs {float_total}")
    if cur.pos != len(body):
        raise CorruptModelError(f"{len(body) - cur.pos} trailing bytes in model segment")
    dequantize(levels)
    return CompressedModel(architecture, tuple(tensors), int(total), mask, levels, lengths, floats)


def compression_ratio(cm: CompressedModel, serialized: bytes | None = None) -> float:
    """32-bit float model size over serialized size."""
    size = len(serialize(cm) if serialized is None else serialized)
    return 4.0 * cm.total_params / size
