"""MSB-first bit packing and order-0 Exp-Golomb codes."""

from __future__ import annotations

from ..errors import CorruptStreamError

MAX_PREFIX = 32


def signed_to_unsigned(v: int) -> int:
    return 2 * v - 1 if v > 0 else -2 * v


def unsigned_to_signed(u: int) -> int:
    return (u + 1) // 2 if u & 1 else -(u // 2)


def exp_golomb_encode_unsigned(v: int) -> str:
    if v < 0:
        raise ValueError(f"unsigned Exp-Golomb needs v >= 0, got {v}")
    body = bin(v + 1)[2:]
    return "0" * (len(body) - 1) + body


def exp_golomb_encode_signed(v: int) -> str:
    return exp_golomb_encode_unsigned(signed_to_unsigned(v))


def exp_golomb_decode_unsigned(bits: str, pos: int = 0) -> tuple[int, int]:
    """Decode one code from a '0'/'1' string; returns (value, next position)."""
    reader = BitReader.from_bitstring(bits)
    reader.pos = pos
    return reader.read_ue(), reader.pos


def exp_golomb_decode_signed(bits: str, pos: int = 0) -> tuple[int, int]:
    value, pos = exp_golomb_decode_unsigned(bits, pos)
    return unsigned_to_signed(value), pos


class BitWriter:
    def __init__(self):
        self._chunks: list[str] = []
        self.bit_length = 0

    def write_bits(self, bits: str) -> None:
        self._chunks.append(bits)
        self.bit_length += len(bits)

    def write(self, value: int, nbits: int) -> None:
        if nbits:
            self.write_bits(format(value, f"0{nbits}b"))

    def write_ue(self, v: int) -> None:
        self.write_bits(exp_golomb_encode_unsigned(v))

    def write_se(self, v: int) -> None:
        self.write_bits(exp_golomb_encode_signed(v))

    def bitstring(self) -> str:
        return "".join(self._chunks)

    def getvalue(self) -> bytes:
        return pack_bits(self.bitstring())


def pack_bits(bits: str) -> bytes:
    if not bits:
        return b""
    pad = -len(bits) % 8
    return int(bits + "0" * pad, 2).to_bytes((len(bits) + pad) // 8, "big")


def unpack_bits(data: bytes, bit_length: int | None = None) -> str:
    bits = format(int.from_bytes(data, "big"), f"0{8 * len(data)}b") if data else ""
    if bit_length is not None:
        if bit_length > len(bits):
            raise CorruptStreamError(f"payload holds {len(bits)} bits, header claims {bit_length}")
        bits = bits[:bit_length]
    return bits


class BitReader:
    def __init__(self, data: bytes, bit_length: int | None = None, segment: str = "bitstream"):
        self.segment = segment
        self.bits = unpack_bits(data, bit_length)
        self.pos = 0

    @classmethod
    def from_bitstring(cls, bits: str, segment: str = "bitstream") -> "BitReader":
        reader = cls(b"", segment=segment)
        reader.bits = bits
        return reader

    @property
    def remaining(self) -> int:
        return len(self.bits) - self.pos

    def _fail(self, msg: str):
        raise CorruptStreamError(f"{msg} at bit {self.pos}", segment=self.segment)

    def read(self, nbits: int) -> int:
        if nbits == 0:
            return 0
        end = self.pos + nbits
        if end > len(self.bits):
            self._fail("unexpected end of stream")
        value = int(self.bits[self.pos:end], 2)
        self.pos = end
        return value

    def read_ue(self) -> int:
        one = self.bits.find("1", self.pos, self.pos + MAX_PREFIX + 1)
        if one < 0:
            if len(self.bits) - self.pos <= MAX_PREFIX:
                self._fail("truncated Exp-Golomb prefix")
            self._fail("Exp-Golomb prefix longer than 32 bits")
        zeros = one - self.pos
        self.pos = one + 1
        return (1 << zeros) - 1 + self.read(zeros)

    def read_se(self) -> int:
        return unsigned_to_signed(self.read_ue())
