"""Scalable stream container, truncation and upgrade deltas.

Stream layout (little-endian; ``varint`` is unsigned LEB128)::

    b"SQBS" | u16 version | u16 layer count
    per layer:  varint layer_index | varint n | u8 kind_tag | u8 ndim | varint dims...
    per layer, per stage (base first):
                f32 c0 | f32 c1 | plane, ceil(N/8) bytes, LSB-first bit order

Every offset follows from the header, and within a layer the first k stages
occupy the same bytes whatever the layer's depth, so truncation is a pure
byte-range copy.

Delta layout::

    b"SQDL" | u16 version | u64 base fingerprint | u64 target fingerprint | u16 layer count
    per layer:  varint layer_index | varint N
                varint update count, then per update: varint stage | f32 c0 | f32 c1
                varint added count, then per added stage: f32 c0 | f32 c1 | plane
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, FingerprintMismatchError, FormatError, PlaneMismatchError,
                     TruncatedFileError, UnsupportedVersionError)
from .hquant import STORAGE_BITS, Stage, StageStack
from .io import TAG_CODES, TAG_NAMES, read_bytes, write_bytes

STREAM_MAGIC = b"SQBS"
DELTA_MAGIC = b"SQDL"
STREAM_VERSION = 1
DELTA_VERSION = 1
FIXED_HEADER_BYTES = 8
CENTROID_BYTES = 2 * STORAGE_BITS // 8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fingerprint(data):
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _varint(value):
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


class _Cursor:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"truncated {self.what} at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def varint(self):
        shift = value = 0
        while True:
            (byte,) = self.take(1)
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise FormatError(f"varint too long in {self.what}")


def plane_nbytes(N):
    return (N + 7) // 8


def _pack_plane(plane):
    return np.packbits(plane, bitorder="little").tobytes()


def _unpack_plane(raw, N, what):
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits[N:].any():
        raise FormatError(f"nonzero padding bits in {what}")
    return bits[:N].astype(bool)


def _pack_centroids(c0, c1):
    return struct.pack("<ff", c0, c1)


def _stage_bytes(stage):
    return _pack_centroids(*stage.centroids) + _pack_plane(stage.plane)


def _read_stage(cur, N):
    c0, c1 = cur.unpack("<ff")
    plane = _unpack_plane(cur.take(plane_nbytes(N)), N, cur.what)
    return Stage((c0, c1), plane, degenerate=bool(c0 == c1 and not plane.any()))


@dataclass(frozen=True)
class LayerRecord:
    layer_index: int
    N: int
    n: int
    kind_tag: str | None
    original_shape: tuple

    def to_bytes(self):
        dims = b"".join(_varint(d) for d in self.original_shape)
        return (_varint(self.layer_index) + _varint(self.n)
                + struct.pack("<BB", TAG_CODES[self.kind_tag], len(self.original_shape)) + dims)

    @property
    def stage_nbytes(self):
        return CENTROID_BYTES + plane_nbytes(self.N)


@dataclass(frozen=True)
class StreamHeader:
    version: int
    layers: tuple
    payload_offset: int

    @property
    def L(self):
        return len(self.layers)

    @property
    def allocation(self):
        return [rec.n for rec in self.layers]

    def layer_offsets(self):
        """Byte offset of every layer's first stage."""
        offsets, pos = [], self.payload_offset
        for rec in self.layers:
            offsets.append(pos)
            pos += rec.n * rec.stage_nbytes
        return offsets


def _record(stack):
    return LayerRecord(stack.layer_index, stack.N, stack.n, stack.kind_tag, stack.original_shape)


def _header_bytes(records):
    return (STREAM_MAGIC + struct.pack("<HH", STREAM_VERSION, len(records))
            + b"".join(rec.to_bytes() for rec in records))


def read_header(data):
    cur = _Cursor(data, "stream")
    if data[:4] != STREAM_MAGIC:
        raise BadMagicError("not a scalable stream (bad magic)")
    cur.take(4)
    version, count = cur.unpack("<HH")
    if version != STREAM_VERSION:
        raise UnsupportedVersionError(f"stream version {version} not supported")
    if count < 1:
        raise FormatError("stream has no layers")
    records = []
    for _ in range(count):
        index = cur.varint()
        n = cur.varint()
        tag, ndim = cur.unpack("<BB")
        if tag not in TAG_NAMES:
            raise FormatError(f"unknown kind tag {tag}")
        shape = tuple(cur.varint() for _ in range(ndim))
        N = int(np.prod(shape)) if shape else 0
        if n < 1 or N < 1:
            raise FormatError(f"layer {index}: empty layer or zero stages")
        records.append(LayerRecord(index, N, n, TAG_NAMES[tag], shape))
    return StreamHeader(version, tuple(records), cur.pos)


def serialize(stacks):
    """Encode stacks as a scalable stream (bytes)."""
    if not stacks:
        raise ValueError("nothing to serialize")
    parts = [_header_bytes([_record(s) for s in stacks])]
    for stack in stacks:
        parts.extend(_stage_bytes(stage) for stage in stack.stages)
    return b"".join(parts)


def deserialize(data):
    header = read_header(data)
    cur = _Cursor(data, "stream")
    cur.pos = header.payload_offset
    stacks = []
    for rec in header.layers:
        stages = [_read_stage(cur, rec.N) for _ in range(rec.n)]
        stacks.append(StageStack(rec.layer_index, stages, rec.original_shape, rec.kind_tag))
    if cur.pos != len(data):
        raise FormatError(f"{len(data) - cur.pos} trailing bytes after stream payload")
    return stacks


def write_stream(stacks, path):
    return write_bytes(path, serialize(stacks))


def read_stream(path):
    return deserialize(read_bytes(path))


def truncate(data, allocation):
    """Cut every layer of an encoded stream to ``allocation[i]`` stages.

    Pure byte-range copy; no stage is decoded or re-quantized.
    """
    header = read_header(data)
    allocation = [int(k) for k in allocation]
    if len(allocation) != header.L:
        raise ValueError(f"allocation has {len(allocation)} entries, stream has {header.L}")
    for rec, k in zip(header.layers, allocation):
        if not 1 <= k <= rec.n:
            raise ValueError(f"layer {rec.layer_index}: depth {k} outside [1, {rec.n}]")
    expected = header.layer_offsets()[-1] + header.layers[-1].n * header.layers[-1].stage_nbytes
    if len(data) < expected:
        raise TruncatedFileError("stream payload shorter than its header declares")
    records = [LayerRecord(r.layer_index, r.N, k, r.kind_tag, r.original_shape)
               for r, k in zip(header.layers, allocation)]
    parts = [_header_bytes(records)]
    for rec, start, k in zip(header.layers, header.layer_offsets(), allocation):
        parts.append(data[start:start + k * rec.stage_nbytes])
    return b"".join(parts)


def eq4_bits(allocation, layer_sizes, b=STORAGE_BITS):
    return sum((N + 2 * b) * n for N, n in zip(layer_sizes, allocation))


def layer_record_bytes(stack):
    return len(_record(stack).to_bytes())


def layer_on_disk_bits(stack):
    """Bits one layer occupies in a stream: its header record plus its stages."""
    rec = _record(stack)
    return 8 * (len(rec.to_bytes()) + rec.n * rec.stage_nbytes)


def stream_report(data):
    """Storage accounting for an encoded stream.

    ``eq4_bits`` is the ideal cost (indices plus float32 centroids) and
    ``padding_bits`` the byte-alignment slack, so that
    ``on_disk_bits == eq4_bits + padding_bits + 8 * header_bytes``.
    """
    header = read_header(data)
    sizes = [rec.N for rec in header.layers]
    ideal = eq4_bits(header.allocation, sizes)
    padding = sum(rec.n * (8 * plane_nbytes(rec.N) - rec.N) for rec in header.layers)
    return {
        "L": header.L,
        "allocation": header.allocation,
        "layer_sizes": sizes,
        "eq4_bits": ideal,
        "padding_bits": padding,
        "header_bytes": header.payload_offset,
        "on_disk_bits": 8 * len(data),
        "fingerprint": fingerprint(data),
    }


@dataclass
class LayerDelta:
    layer_index: int
    N: int
    centroid_updates: list = field(default_factory=list)  # (stage index, (c0, c1))
    added_stages: list = field(default_factory=list)

    def to_bytes(self):
        out = [_varint(self.layer_index), _varint(self.N), _varint(len(self.centroid_updates))]
        for k, (c0, c1) in self.centroid_updates:
            out.append(_varint(k) + _pack_centroids(c0, c1))
        out.append(_varint(len(self.added_stages)))
        out.extend(_stage_bytes(stage) for stage in self.added_stages)
        return b"".join(out)


@dataclass
class DeltaPayload:
    base_fingerprint: int
    target_fingerprint: int
    layers: list

    @property
    def added_plane_bits(self):
        return sum(8 * plane_nbytes(d.N) * len(d.added_stages) for d in self.layers)

    @property
    def centroid_bits(self):
        """Bits spent on centroids: new stages' pairs plus refreshed pairs."""
        return sum(2 * STORAGE_BITS * (len(d.added_stages) + len(d.centroid_updates))
                   for d in self.layers)

    @property
    def updated_centroid_bits(self):
        return sum(2 * STORAGE_BITS * len(d.centroid_updates) for d in self.layers)

    @property
    def payload_bits(self):
        return self.added_plane_bits + self.centroid_bits


def _centroid_key(stage):
    return _pack_centroids(*stage.centroids)


def make_delta(old, new):
    """Upgrade payload turning encoded stream ``old`` into encoded stream ``new``.

    Carries the planes and centroids of stages ``new`` has beyond ``old``, and
    replacement centroids for shared stages whose float32 bits changed.
    """
    old_stacks, new_stacks = deserialize(old), deserialize(new)
    if len(old_stacks) != len(new_stacks):
        raise PlaneMismatchError("streams have different layer counts")
    layers = []
    for a, b in zip(old_stacks, new_stacks):
        if (a.layer_index, a.original_shape, a.kind_tag) != (b.layer_index, b.original_shape,
                                                             b.kind_tag):
            raise PlaneMismatchError(f"layer {a.layer_index}: layer structure differs")
        if b.n < a.n:
            raise ValueError(f"layer {a.layer_index}: target has fewer stages ({b.n} < {a.n})")
        delta = LayerDelta(a.layer_index, a.N)
        for k, (sa, sb) in enumerate(zip(a.stages, b.stages)):
            if not np.array_equal(sa.plane, sb.plane):
                raise PlaneMismatchError(
                    f"layer {a.layer_index} stage {k}: planes differ, streams do not share "
                    "a quantization")
            if _centroid_key(sa) != _centroid_key(sb):
                delta.centroid_updates.append((k, sb.centroids))
        delta.added_stages = list(b.stages[a.n:])
        layers.append(delta)
    return DeltaPayload(fingerprint(old), fingerprint(new), layers)


def apply_delta(old, delta):
    """Apply a ``DeltaPayload`` to encoded stream ``old``; returns the new stream."""
    if fingerprint(old) != delta.base_fingerprint:
        raise FingerprintMismatchError("delta does not apply to this stream (fingerprint)")
    stacks = deserialize(old)
    if len(stacks) != len(delta.layers):
        raise FormatError("delta layer count does not match stream")
    out = []
    for stack, d in zip(stacks, delta.layers):
        if d.layer_index != stack.layer_index or d.N != stack.N:
            raise FormatError(f"delta record for layer {d.layer_index} does not match stream")
        stages = list(stack.stages)
        for k, (c0, c1) in d.centroid_updates:
            if not 0 <= k < len(stages):
                raise FormatError(f"layer {d.layer_index}: update for missing stage {k}")
            stages[k] = stages[k].with_centroids(c0, c1)
        stages.extend(d.added_stages)
        out.append(StageStack(stack.layer_index, stages, stack.original_shape, stack.kind_tag))
    result = serialize(out)
    if fingerprint(result) != delta.target_fingerprint:
        raise FingerprintMismatchError("upgraded stream does not match the delta's target")
    return result


def encode_delta(delta):
    return (DELTA_MAGIC + struct.pack("<HQQH", DELTA_VERSION, delta.base_fingerprint,
                                      delta.target_fingerprint, len(delta.layers))
            + b"".join(d.to_bytes() for d in delta.layers))


def decode_delta(data):
    cur = _Cursor(data, "delta")
    if data[:4] != DELTA_MAGIC:
        raise BadMagicError("not a delta file (bad magic)")
    cur.take(4)
    version, base, target, count = cur.unpack("<HQQH")
    if version != DELTA_VERSION:
        raise UnsupportedVersionError(f"delta version {version} not supported")
    layers = []
    for _ in range(count):
        d = LayerDelta(cur.varint(), cur.varint())
        for _ in range(cur.varint()):
            k = cur.varint()
            d.centroid_updates.append((k, cur.unpack("<ff")))
        d.added_stages = [_read_stage(cur, d.N) for _ in range(cur.varint())]
        layers.append(d)
    if cur.pos != len(data):
        raise FormatError(f"{len(data) - cur.pos} trailing bytes after delta")
    return DeltaPayload(base, target, layers)


def write_delta(delta, path):
    return write_bytes(path, encode_delta(delta))


def read_delta(path):
    return decode_delta(read_bytes(path))
