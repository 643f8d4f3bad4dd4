"""Lossless octree coding of voxel coordinate sets.

Breadth-first occupancy bytes: one byte per internal node, bit ``0x80 >> b``
set iff child ``b`` is non-empty, with child index b = 4*(x bit) + 2*(y bit)
+ (z bit).  The byte stream is optionally wrapped by the range coder with an
adaptive byte model.

Substream layout: u8 depth, u8 flags (bit0 = range-coded), u32 point count,
payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DecodeError
from .rangecoder import encode_bytes_adaptive
from .sparse import lex_order

FLAG_RANGE_CODED = 0x01


@dataclass
class OctreeStream:
    depth: int
    count: int
    payload: bytes
    range_coded: bool


def _morton(coords: np.ndarray, depth: int) -> np.ndarray:
    """Interleave coordinate bits, x most significant within each level."""
    c = coords.astype(np.uint64)
    code = np.zeros(coords.shape[0], dtype=np.uint64)
    for b in range(depth):
        bb = np.uint64(b)
        code |= ((c[:, 0] >> bb) & np.uint64(1)) << np.uint64(3 * b + 2)
        code |= ((c[:, 1] >> bb) & np.uint64(1)) << np.uint64(3 * b + 1)
        code |= ((c[:, 2] >> bb) & np.uint64(1)) << np.uint64(3 * b)
    return code


def _unmorton(codes: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros((codes.shape[0], 3), dtype=np.int64)
    for b in range(depth):
        out[:, 0] |= ((codes >> np.uint64(3 * b + 2)) & np.uint64(1)).astype(np.int64) << b
        out[:, 1] |= ((codes >> np.uint64(3 * b + 1)) & np.uint64(1)).astype(np.int64) << b
        out[:, 2] |= ((codes >> np.uint64(3 * b)) & np.uint64(1)).astype(np.int64) << b
    return out


def octree_encode(coords: np.ndarray, depth: int, range_coded: bool = True) -> OctreeStream:
    """Encode a coordinate set losslessly; all coords must lie in [0, 2^depth)^3."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise ContractViolation("cannot octree-encode an empty set")
    if not 1 <= depth <= 21:
        raise ContractViolation(f"depth {depth} outside [1, 21]")
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise ContractViolation(f"coordinates outside the depth-{depth} cube")
    codes = np.unique(_morton(coords, depth))
    occupancy = bytearray()
    # level l has one byte per distinct prefix of 3l bits, in ascending
    # (breadth-first) order; children pack into bits 0x80 >> child
    for level in range(depth):
        shift = np.uint64(3 * (depth - level - 1))
        child_codes = np.unique(codes >> shift)
        parents = child_codes >> np.uint64(3)
        child = (child_codes & np.uint64(7)).astype(np.int64)
        uniq_parents, parent_idx = np.unique(parents, return_inverse=True)
        level_bytes = np.zeros(uniq_parents.size, dtype=np.uint8)
        np.bitwise_or.at(level_bytes, parent_idx, (0x80 >> child).astype(np.uint8))
        occupancy.extend(level_bytes.tobytes())
    raw = bytes(occupancy)
    payload = encode_bytes_adaptive(raw) if range_coded else raw
    return OctreeStream(depth, int(codes.size), payload, range_coded)


def octree_decode(stream: OctreeStream) -> np.ndarray:
    """Decode back to the exact original lexicographically sorted set."""
    depth, count = stream.depth, stream.count
    if count < 1:
        raise DecodeError("octree stream declares zero points")
    if stream.range_coded:
        # byte count per level is only known progressively; decode lazily
        reader = _AdaptiveReader(stream.payload)
    else:
        reader = _RawReader(stream.payload)
    nodes = np.zeros(1, dtype=np.uint64)
    for _ in range(depth):
        bits = np.frombuffer(reader.read(nodes.size), dtype=np.uint8)
        if np.any(bits == 0):
            raise DecodeError("empty occupancy byte in octree stream")
        children = []
        for b in range(8):
            has = (bits & (0x80 >> b)) != 0
            children.append((nodes[has] << np.uint64(3)) | np.uint64(b))
        nodes = np.sort(np.concatenate(children))
    reader.finish()
    if nodes.size != count:
        raise DecodeError(f"decoded {nodes.size} points, header says {count}")
    coords = _unmorton(nodes, depth)
    return coords[lex_order(coords)].astype(np.int32)


class _RawReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("octree occupancy stream is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def finish(self):
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes after octree occupancy stream")


class _AdaptiveReader:
    def __init__(self, data: bytes):
        from .rangecoder import AdaptiveByteModel, RangeDecoder

        self.model = AdaptiveByteModel()
        self.dec = RangeDecoder(data)

    def read(self, n: int) -> bytes:
        out = bytearray()
        for _ in range(n):
            cum = self.model.cumulative()
            t = self.dec.decode_target(self.model.total)
            b = int(np.searchsorted(cum, t, side="right")) - 1
            self.dec.consume(int(cum[b]), int(self.model.freq[b]))
            self.model.update(b)
            out.append(b)
        return bytes(out)

    def finish(self):
        pass


def serialize_stream(stream: OctreeStream) -> bytes:
    flags = FLAG_RANGE_CODED if stream.range_coded else 0
    return struct.pack("<BBI", stream.depth, flags, stream.count) + stream.payload


def parse_stream(data: bytes) -> OctreeStream:
    if len(data) < 6:
        raise DecodeError("octree substream shorter than its header")
    depth, flags, count = struct.unpack_from("<BBI", data, 0)
    return OctreeStream(depth, count, data[6:], bool(flags & FLAG_RANGE_CODED))
