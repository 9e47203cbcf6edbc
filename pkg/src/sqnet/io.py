"""Model files (``SQNM``) and MNIST-style IDX datasets.

Model file layout, little-endian::

    b"SQNM" | u16 version | u16 layer count | u8 ndim | u32 input dims...
    per layer: u8 kind | u8 kind_tag | u8 ndim | u32 weight dims...
               f32 weights (row-major) | f32 bias (dims[0] values)

Weights are held as float64 in memory and stored as float32, so a save/load
round trip is bit-exact for any model whose values are float32-representable
(every model that was itself loaded from a file).
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import (BadMagicError, FileAccessError, FormatError, ShapeError, TruncatedFileError,
                     UnsupportedVersionError)
from .nn import KINDS, Dataset, Layer, NetworkModel

MODEL_MAGIC = b"SQNM"
MODEL_VERSION = 1
KB = 1024

_KIND_CODES = {kind: i for i, kind in enumerate(KINDS)}
TAG_CODES = {None: 0, "CONV": 1, "FC": 2}
TAG_NAMES = {v: k for k, v in TAG_CODES.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated {self.what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)

    def at_end(self):
        return self.pos == len(self.data)


def read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileAccessError(f"cannot read {path}: {exc.strerror}") from exc


def write_bytes(path, data):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise FileAccessError(f"cannot write {path}: {exc.strerror}") from exc
    return len(data)


def model_to_bytes(model):
    out = [MODEL_MAGIC, struct.pack("<HH", MODEL_VERSION, len(model.layers))]
    out.append(struct.pack("<B", len(model.input_shape)))
    out.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for layer in model.layers:
        shape = layer.weights.shape if layer.is_weighted else ()
        out.append(struct.pack("<BBB", _KIND_CODES[layer.kind], TAG_CODES[layer.kind_tag],
                               len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        if layer.is_weighted:
            out.append(layer.weights.astype("<f4").tobytes())
            out.append(layer.bias.astype("<f4").tobytes())
    return b"".join(out)


def model_from_bytes(data):
    r = _Reader(data, "model file")
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    r.take(4)
    version, count = r.unpack("<HH")
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model file version {version} not supported")
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    layers = []
    for i in range(count):
        kind_code, tag_code, ndim = r.unpack("<BBB")
        if kind_code >= len(KINDS) or tag_code not in TAG_NAMES:
            raise ShapeError(f"layer {i}: unknown kind/tag code", layer_index=i)
        kind = KINDS[kind_code]
        shape = r.unpack(f"<{ndim}I")
        if kind in ("dense", "conv2d"):
            if not shape or 0 in shape:
                raise ShapeError(f"layer {i}: empty weight shape", layer_index=i)
            w = r.floats(int(np.prod(shape))).reshape(shape)
            b = r.floats(shape[0])
            try:
                layer = Layer(kind, w, b)
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}", layer_index=i) from None
        else:
            if ndim:
                raise ShapeError(f"layer {i}: {kind} must not carry weights", layer_index=i)
            layer = Layer(kind)
        if TAG_CODES[layer.kind_tag] != tag_code:
            raise ShapeError(f"layer {i}: kind_tag does not match kind {kind}", layer_index=i)
        layers.append(layer)
    if not r.at_end():
        raise ShapeError(f"{len(data) - r.pos} trailing bytes after last layer")
    return NetworkModel(layers, input_shape)


def save_model(model, path):
    """Write ``model`` to ``path``; returns the byte count."""
    return write_bytes(path, model_to_bytes(model))


def load_model(path):
    return model_from_bytes(read_bytes(path))


def model_info(model):
    """Summary dict: layer count, per-layer weight counts, float32 weight payload size."""
    layers = []
    for i, layer in enumerate(model.weighted_layers()):
        layers.append({"index": i, "kind": layer.kind, "kind_tag": layer.kind_tag,
                       "shape": tuple(layer.weights.shape), "N": layer.weights.size})
    # biases travel uncompressed; the weight payload is what gets quantized
    payload_bytes = 4 * sum(model.weight_counts())
    return {
        "L": model.L,
        "input_shape": model.input_shape,
        "layers": layers,
        "n_params": model.n_params(),
        "payload_bytes": payload_bytes,
        "payload_kb": payload_bytes / KB,
        "bias_bytes": 4 * (model.n_params() - sum(model.weight_counts())),
        "file_bytes": len(model_to_bytes(model)),
    }


def _open_maybe_gz(path):
    try:
        return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")
    except OSError as exc:
        raise FileAccessError(f"cannot read {path}: {exc.strerror}") from exc


def _read_idx(path, magic, what):
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    r = _Reader(data, what)
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    r.take(4)
    ndim = magic & 0xFF
    dims = r.unpack(f">{ndim}I")
    body = r.take(int(np.prod(dims)))
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None):
    """Load an IDX image/label pair into a ``Dataset``.

    Images become ``[count, 1, rows, cols]`` floats in ``[0, 1]``.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "IDX image file")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "IDX label file")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("IDX images must be [count, rows, cols]")
    header = struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape)
    return write_bytes(os.fspath(path), header + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    header = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0])
    return write_bytes(os.fspath(path), header + labels.tobytes())
