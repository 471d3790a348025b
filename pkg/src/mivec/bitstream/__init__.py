"""Prefix codes and the ``.mvb`` container.  Top-level encode/decode lives in :mod:`mivec.bitstream.codec`."""

from .container import BitstreamContainer, decode_cameras, encode_cameras
from .expgolomb import (
    BitReader,
    BitWriter,
    exp_golomb_decode_signed,
    exp_golomb_decode_unsigned,
    exp_golomb_encode_signed,
    exp_golomb_encode_unsigned,
    pack_bits,
    unpack_bits,
)

__all__ = [
    "BitReader",
    "BitWriter",
    "BitstreamContainer",
    "decode_cameras",
    "encode_cameras",
    "exp_golomb_decode_signed",
    "exp_golomb_decode_unsigned",
    "exp_golomb_encode_signed",
    "exp_golomb_encode_unsigned",
    "pack_bits",
    "unpack_bits",
]
