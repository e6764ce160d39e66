"""Bit-packing of unsigned quantization codes and LEB128 varints.

Layouts (all little-endian):

* 2-bit: four codes per byte, code i at bits 2*(i % 4).
* 3-bit: ten codes per 32-bit word, code i at bits 3*(i % 10); the top two
  bits of each word are zero padding.
* 4-bit: two codes per byte, low nibble first.
* 8-bit: one code per byte.

A short final byte or word is zero-filled.
"""

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 8)


def packed_size(count: int, bits: int) -> int:
    if bits == 3:
        return 4 * (-(-count // 10))
    if bits in (2, 4, 8):
        per_byte = 8 // bits
        return -(-count // per_byte)
    raise ValueError(f"unsupported bit width {bits}")


def pack_codes(codes, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint32)
    if codes.size and int(codes.max()) >= (1 << bits):
        raise ValueError(f"code {int(codes.max())} does not fit in {bits} bits")
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    if bits == 3:
        words = -(-codes.size // 10)
        padded = np.zeros(words * 10, dtype=np.uint32)
        padded[: codes.size] = codes
        shifts = np.arange(10, dtype=np.uint32) * np.uint32(3)
        packed = np.bitwise_or.reduce(padded.reshape(words, 10) << shifts, axis=1)
        return packed.astype("<u4").tobytes()
    if bits in (2, 4):
        per_byte = 8 // bits
        nbytes = -(-codes.size // per_byte)
        padded = np.zeros(nbytes * per_byte, dtype=np.uint32)
        padded[: codes.size] = codes
        shifts = np.arange(per_byte, dtype=np.uint32) * np.uint32(bits)
        packed = np.bitwise_or.reduce(padded.reshape(nbytes, per_byte) << shifts, axis=1)
        return packed.astype(np.uint8).tobytes()
    raise ValueError(f"unsupported bit width {bits}")


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    if len(data) != packed_size(count, bits):
        raise ValueError(f"expected {packed_size(count, bits)} bytes for {count} {bits}-bit codes, got {len(data)}")
    if bits == 8:
        return np.frombuffer(data, dtype=np.uint8).astype(np.uint32)
    if bits == 3:
        words = np.frombuffer(data, dtype="<u4").astype(np.uint32)
        shifts = np.arange(10, dtype=np.uint32) * np.uint32(3)
        codes = (words[:, None] >> shifts) & np.uint32(7)
        return codes.reshape(-1)[:count]
    per_byte = 8 // bits
    raw = np.frombuffer(data, dtype=np.uint8).astype(np.uint32)
    shifts = np.arange(per_byte, dtype=np.uint32) * np.uint32(bits)
    codes = (raw[:, None] >> shifts) & np.uint32((1 << bits) - 1)
    return codes.reshape(-1)[:count]


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varints are unsigned")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(data: bytes, pos: int) -> tuple[int, int]:
    """Decode one varint at ``pos``; return (value, next position)."""
    value = shift = 0
    while True:
        if pos >= len(data):
            raise ValueError(f"truncated varint at byte {pos}")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


def varint_size(value: int) -> int:
    return len(encode_varint(value))
