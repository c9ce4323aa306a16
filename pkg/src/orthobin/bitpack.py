"""Bit packing of sign patterns into little-endian 64-bit words.

Layout contract: signs are encoded one bit per element (1 = +1, 0 = -1),
LSB-first within each word. Matrices are packed row-major with each row
padded up to a word boundary, so row ``i`` starts at word ``i * words_per_row``.
Padding bits are always zero.
"""
from __future__ import annotations

import numpy as np

WORD_BITS = 64


def words_per_row(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


def sign_bits(values: np.ndarray) -> np.ndarray:
    """Sign convention shared with the training path: bit 1 iff value >= 0."""
    return (np.asarray(values) >= 0.0).astype(np.uint8)


def pack_vector(bits: np.ndarray) -> np.ndarray:
    """Pack a 1-D 0/1 array into uint64 words, LSB-first, zero padded."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    if bits.ndim != 1:
        raise ValueError(f"pack_vector expects 1-D bits, got {bits.shape}")
    nwords = words_per_row(bits.size)
    raw = np.packbits(bits, bitorder="little")
    buf = np.zeros(nwords * 8, dtype=np.uint8)
    buf[: raw.size] = raw
    return buf.view("<u8").copy()


def unpack_vector(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack_vector`; returns a 0/1 uint8 array of length n."""
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    return bits[:n].copy()


def pack_matrix(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 matrix row-major into shape (rows, words_per_row(cols))."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    if bits.ndim != 2:
        raise ValueError(f"pack_matrix expects 2-D bits, got {bits.shape}")
    rows, cols = bits.shape
    out = np.zeros((rows, words_per_row(cols)), dtype=np.uint64)
    for i in range(rows):
        out[i] = pack_vector(bits[i])
    return out


def unpack_matrix(words: np.ndarray, rows: int, cols: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    if words.shape != (rows, words_per_row(cols)):
        raise ValueError(
            f"packed shape {words.shape} does not match {rows}x{cols}")
    out = np.zeros((rows, cols), dtype=np.uint8)
    for i in range(rows):
        out[i] = unpack_vector(words[i], cols)
    return out


def bits_to_signs(bits: np.ndarray) -> np.ndarray:
    """Decode 0/1 bits to float64 values in {-1.0, +1.0}."""
    return np.where(np.asarray(bits) != 0, 1.0, -1.0)


def popcount(words: np.ndarray) -> int:
    """Total number of set bits across an array of uint64 words."""
    return int(np.bitwise_count(np.asarray(words, dtype=np.uint64)).sum())
