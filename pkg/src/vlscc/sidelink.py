"""Error-free side link: canonical Huffman coding of quant levels / maps.

Packet layout (all multi-byte fields big-endian)::

    offset  size  field
    0       1     magic  0xB5
    1       1     version (1)
    2       1     L, number of levels (2..255)
    3       2     rows
    5       2     cols
    7       L     canonical code length of each level (0 = unused)
    7+L     ...   payload, codes packed MSB-first, zero-padded to a byte
    end-4   4     CRC-32 of every preceding byte

A scalar level is carried as a 1x1 map.
"""
from __future__ import annotations

import heapq
import struct
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

__all__ = [
    "SideLinkPacket",
    "SideLinkError",
    "huffman_code_lengths",
    "canonical_codes",
    "sidelink_encode",
    "sidelink_decode",
    "MAGIC",
    "VERSION",
]

MAGIC = 0xB5
VERSION = 1
_HEADER = struct.Struct(">BBBHH")
_CRC = struct.Struct(">I")


class SideLinkError(ValueError):
    """Raised for malformed or corrupted side-link packets."""


def huffman_code_lengths(freqs: Dict[int, int]) -> Dict[int, int]:
    """Huffman code length per symbol. A lone symbol gets a 1-bit code."""
    items = [(f, s) for s, f in freqs.items() if f > 0]
    if not items:
        return {}
    if len(items) == 1:
        return {items[0][1]: 1}
    # (weight, tiebreak, symbols-in-subtree)
    heap = [(f, s, [s]) for f, s in sorted(items, key=lambda t: (t[0], t[1]))]
    heapq.heapify(heap)
    lengths = {s: 0 for _, s in items}
    while len(heap) > 1:
        f1, t1, s1 = heapq.heappop(heap)
        f2, t2, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (f1 + f2, min(t1, t2), s1 + s2))
    return lengths


def canonical_codes(lengths: Dict[int, int]) -> Dict[int, Tuple[int, int]]:
    """Assign canonical codes: symbol -> (code, length), ordered by (length, symbol)."""
    code = 0
    prev_len = 0
    out = {}
    for sym, ln in sorted(((s, l) for s, l in lengths.items() if l > 0), key=lambda t: (t[1], t[0])):
        code <<= ln - prev_len
        out[sym] = (code, ln)
        code += 1
        prev_len = ln
    return out


@dataclass(frozen=True)
class SideLinkPacket:
    levels: int
    shape: Tuple[int, int]
    code_lengths: Tuple[int, ...]
    payload: bytes
    payload_bits: int

    @property
    def table_bits(self) -> int:
        return 8 * self.levels

    @property
    def total_bits(self) -> int:
        """Payload plus code table, the cost charged per packet."""
        return self.payload_bits + self.table_bits

    def to_bytes(self) -> bytes:
        body = _HEADER.pack(MAGIC, VERSION, self.levels, *self.shape)
        body += bytes(self.code_lengths) + self.payload
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "SideLinkPacket":
        if len(data) < _HEADER.size + _CRC.size:
            raise SideLinkError("packet too short")
        body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size:])
        if zlib.crc32(body) != crc:
            raise SideLinkError("CRC mismatch")
        magic, version, levels, rows, cols = _HEADER.unpack_from(body)
        if magic != MAGIC:
            raise SideLinkError(f"bad magic byte 0x{magic:02x}")
        if version != VERSION:
            raise SideLinkError(f"unsupported version {version}")
        if levels < 2:
            raise SideLinkError(f"bad level count {levels}")
        start = _HEADER.size
        if len(body) < start + levels:
            raise SideLinkError("truncated code table")
        lengths = tuple(body[start: start + levels])
        payload = bytes(body[start + levels:])
        nbits = _payload_bit_count(lengths, rows * cols, payload)
        return cls(levels, (rows, cols), lengths, payload, nbits)


def _payload_bit_count(lengths, count, payload) -> int:
    # exact payload length is only known after decoding; decode to measure
    _, used = _decode_symbols(lengths, count, payload)
    return used


def sidelink_encode(quant, levels: int) -> SideLinkPacket:
    """Huffman-encode a quant level or ``(rows, cols)`` quant map."""
    if not 2 <= levels <= 255:
        raise ValueError(f"levels must be in [2, 255], got {levels}")
    q = np.asarray(quant)
    if q.ndim == 0:
        q = q.reshape(1, 1)
    elif q.ndim == 1:
        q = q.reshape(1, -1)
    if q.ndim != 2:
        raise ValueError(f"quant must be a scalar, vector or 2-D map, got shape {q.shape}")
    rows, cols = q.shape
    if rows > 0xFFFF or cols > 0xFFFF:
        raise ValueError("map too large for 16-bit shape fields")
    flat = q.reshape(-1)
    if flat.size and (np.any(flat < 0) or np.any(flat >= levels) or np.any(flat != np.round(flat))):
        raise ValueError("quant values out of range")
    symbols = flat.astype(np.int64).tolist()
    lengths = huffman_code_lengths(Counter(symbols))
    if lengths and max(lengths.values()) > 255:
        raise ValueError("code length overflow")
    codes = {s: format(c, f"0{ln}b") for s, (c, ln) in canonical_codes(lengths).items()}
    bitstr = "".join(codes[s] for s in symbols)
    nbits = len(bitstr)
    bitstr += "0" * ((-nbits) % 8)
    payload = int(bitstr, 2).to_bytes(len(bitstr) // 8, "big") if bitstr else b""
    table = tuple(lengths.get(s, 0) for s in range(levels))
    return SideLinkPacket(levels, (rows, cols), table, payload, nbits)


def _decode_symbols(lengths, count, payload) -> Tuple[List[int], int]:
    table = {s: l for s, l in enumerate(lengths) if l > 0}
    if count and not table:
        raise SideLinkError("empty code table for non-empty map")
    # Kraft check rejects tables that cannot come from a prefix code
    if table and sum(2.0 ** -l for l in table.values()) > 1.0 + 1e-12:
        raise SideLinkError("code table violates the Kraft inequality")
    codes = canonical_codes(table)
    maxlen = max(table.values(), default=0)
    bitstr = "".join(format(b, "08b") for b in payload)
    total = len(bitstr)
    pos = 0
    out = []
    if maxlen <= 16:
        # direct lookup on a maxlen-bit window
        lut = [None] * (1 << maxlen)
        for s, (c, ln) in codes.items():
            base = c << (maxlen - ln)
            for k in range(1 << (maxlen - ln)):
                lut[base + k] = (s, ln)
        padded = bitstr + "0" * maxlen
        for _ in range(count):
            hit = lut[int(padded[pos: pos + maxlen], 2)] if maxlen else None
            if hit is None:
                raise SideLinkError("invalid code word in payload")
            s, ln = hit
            pos += ln
            if pos > total:
                raise SideLinkError("payload exhausted before all symbols were decoded")
            out.append(s)
    else:
        decode = {(ln, c): s for s, (c, ln) in codes.items()}
        for _ in range(count):
            code = ln = 0
            while True:
                if pos >= total:
                    raise SideLinkError("payload exhausted before all symbols were decoded")
                code = (code << 1) | (bitstr[pos] == "1")
                pos += 1
                ln += 1
                sym = decode.get((ln, code))
                if sym is not None:
                    out.append(sym)
                    break
                if ln >= maxlen:
                    raise SideLinkError("invalid code word in payload")
    if total - pos >= 8:
        raise SideLinkError("trailing bytes after payload")
    if "1" in bitstr[pos:]:
        raise SideLinkError("non-zero padding bits")
    return out, pos


def sidelink_decode(packet) -> np.ndarray:
    """Decode a :class:`SideLinkPacket` (or its serialized bytes) to a level map.

    Returns a ``(rows, cols)`` int64 array; callers carrying a scalar level read
    element ``[0, 0]``.
    """
    if isinstance(packet, (bytes, bytearray)):
        packet = SideLinkPacket.from_bytes(bytes(packet))
    if len(packet.code_lengths) != packet.levels:
        raise SideLinkError("code table length does not match level count")
    rows, cols = packet.shape
    symbols, _ = _decode_symbols(packet.code_lengths, rows * cols, packet.payload)
    if any(s >= packet.levels for s in symbols):
        raise SideLinkError("decoded level out of range")
    return np.asarray(symbols, dtype=np.int64).reshape(rows, cols)
