"""A small numpy network engine: forward, fused softmax cross-entropy, backward.

Only what the compression pipeline needs is supported: dense layers,
valid-padding stride-1 convolutions, ReLU, 2x2 max pooling and flatten.
All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten")
WEIGHTED_KINDS = ("dense", "conv2d")


@dataclass
class Layer:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in WEIGHTED_KINDS:
            if self.weights is None or self.bias is None:
                raise ValueError(f"{self.kind} layer needs weights and bias")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            want = 2 if self.kind == "dense" else 4
            if self.weights.ndim != want:
                raise ShapeError(
                    f"{self.kind} weights must be {want}-D, got shape {self.weights.shape}")
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError(
                    f"bias length {self.bias.shape[0]} != output count {self.weights.shape[0]}")
        elif self.weights is not None or self.bias is not None:
            raise ValueError(f"{self.kind} layer carries no parameters")

    @property
    def kind_tag(self):
        """'CONV' for conv2d, 'FC' for dense, None for parameter-free layers."""
        return {"conv2d": "CONV", "dense": "FC"}.get(self.kind)

    @property
    def is_weighted(self):
        return self.kind in WEIGHTED_KINDS

    def output_shape(self, in_shape):
        """Per-sample output shape for a per-sample input shape, or raise ShapeError."""
        in_shape = tuple(in_shape)
        if self.kind == "dense":
            if in_shape != (self.weights.shape[1],):
                raise ShapeError(f"dense expects ({self.weights.shape[1]},), got {in_shape}")
            return (self.weights.shape[0],)
        if self.kind == "conv2d":
            o, c, kh, kw = self.weights.shape
            if len(in_shape) != 3 or in_shape[0] != c:
                raise ShapeError(f"conv2d expects ({c}, H, W), got {in_shape}")
            h, w = in_shape[1] - kh + 1, in_shape[2] - kw + 1
            if h < 1 or w < 1:
                raise ShapeError(f"kernel {kh}x{kw} larger than input {in_shape[1:]}")
            return (o, h, w)
        if self.kind == "maxpool2x2":
            if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
                raise ShapeError(f"maxpool2x2 expects (C, H>=2, W>=2), got {in_shape}")
            return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape

    def copy(self):
        if not self.is_weighted:
            return Layer(self.kind)
        return Layer(self.kind, self.weights.copy(), self.bias.copy())


@dataclass
class NetworkModel:
    layers: list
    input_shape: tuple

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not any(layer.is_weighted for layer in self.layers):
            raise ShapeError("model has no weighted layer")
        self.layer_shapes()

    def layer_shapes(self):
        """Per-sample input shape of every layer, followed by the output shape."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}", layer_index=i) from None
        return shapes

    @property
    def num_classes(self):
        out = self.layer_shapes()[-1]
        if len(out) != 1:
            raise ShapeError(f"model output {out} is not a logit vector")
        return out[0]

    def weighted_layers(self):
        return [layer for layer in self.layers if layer.is_weighted]

    @property
    def L(self):
        return len(self.weighted_layers())

    def kind_tags(self):
        return [layer.kind_tag for layer in self.weighted_layers()]

    def weight_counts(self):
        return [layer.weights.size for layer in self.weighted_layers()]

    def n_params(self):
        return sum(layer.weights.size + layer.bias.size for layer in self.weighted_layers())

    def with_weights(self, weights):
        """Copy of the model with weighted-layer weights replaced (biases shared)."""
        weights = list(weights)
        if len(weights) != self.L:
            raise ValueError(f"expected {self.L} weight arrays, got {len(weights)}")
        it = iter(weights)
        layers = []
        for layer in self.layers:
            if layer.is_weighted:
                w = np.asarray(next(it), dtype=np.float64).reshape(layer.weights.shape)
                layers.append(Layer(layer.kind, w, layer.bias))
            else:
                layers.append(layer)
        return NetworkModel(layers, self.input_shape)

    def copy(self):
        return NetworkModel([layer.copy() for layer in self.layers], self.input_shape)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n):
        """First n samples, fixed order."""
        return Dataset(self.inputs[:n], self.labels[:n], self.num_classes)


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == len(model.input_shape):
        batch = batch[None]
    if batch.shape[1:] != model.input_shape:
        raise ShapeError(
            f"layer 0: batch per-sample shape {batch.shape[1:]} != model input {model.input_shape}",
            layer_index=0)
    return batch


def _conv_forward(x, w, b):
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # S, C, H', W', kh, kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # S, H', W', O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv_backward(x, w, grad):
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    db = grad.sum(axis=(0, 2, 3))
    padded = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # S, O, H, W, kh, kw
    dx = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return dx.transpose(0, 3, 1, 2), dw, db


def _pool_blocks(x):
    s, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(s, c, h2, 2, w2, 2)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(s, c, h2, w2, 4)


def _run(model, batch, keep):
    x = batch
    cache = []
    for i, layer in enumerate(model.layers):
        if keep:
            cache.append(x)
        if layer.kind == "dense":
            x = x @ layer.weights.T + layer.bias
        elif layer.kind == "conv2d":
            x = _conv_forward(x, layer.weights, layer.bias)
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "maxpool2x2":
            x = _pool_blocks(x).max(axis=-1)
        else:
            x = x.reshape(x.shape[0], -1)
    return x, cache


def forward(model, batch):
    """Logits ``[samples, classes]`` for a batch with a leading sample axis."""
    batch = _check_batch(model, batch)
    model.layer_shapes()
    logits, _ = _run(model, batch, keep=False)
    return logits


def _log_softmax(logits):
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("cross_entropy needs a non-empty [samples, classes] batch")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def loss_and_gradients(model, batch, labels):
    """Mean cross-entropy and ``[(dW, db), ...]`` for each weighted layer in order."""
    batch = _check_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    model.layer_shapes()
    logits, cache = _run(model, batch, keep=True)
    loss = cross_entropy(logits, labels)

    n = logits.shape[0]
    grad = np.exp(_log_softmax(logits))
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads = []
    for layer, x in zip(reversed(model.layers), reversed(cache)):
        if layer.kind == "dense":
            grads.append((grad.T @ x, grad.sum(axis=0)))
            grad = grad @ layer.weights
        elif layer.kind == "conv2d":
            grad, dw, db = _conv_backward(x, layer.weights, grad)
            grads.append((dw, db))
        elif layer.kind == "relu":
            grad = grad * (x > 0)
        elif layer.kind == "maxpool2x2":
            blocks = _pool_blocks(x)
            onehot = np.zeros_like(blocks)
            np.put_along_axis(onehot, blocks.argmax(axis=-1)[..., None], 1.0, axis=-1)
            onehot *= grad[..., None]
            s, c, h2, w2, _ = onehot.shape
            dx = np.zeros_like(x)
            dx[:, :, :2 * h2, :2 * w2] = (
                onehot.reshape(s, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                .reshape(s, c, 2 * h2, 2 * w2))
            grad = dx
        else:
            grad = grad.reshape(x.shape)
    grads.reverse()
    return loss, grads


def backward(model, batch, labels):
    """Gradients of the mean cross-entropy, one ``(dW, db)`` pair per weighted layer."""
    return loss_and_gradients(model, batch, labels)[1]


def evaluate_model(model, dataset):
    """``(cross_entropy, top1_accuracy)`` over a dataset."""
    logits = forward(model, dataset.inputs)
    return cross_entropy(logits, dataset.labels), accuracy(logits, dataset.labels)


def build_model(arch, input_shape, seed=0):
    """Build a He-initialised model from a compact description.

    ``arch`` items are ``("dense", units)``, ``("conv2d", channels, kernel)``,
    ``("relu",)``, ``("maxpool2x2",)`` or ``("flatten",)``.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for item in arch:
        kind = item[0]
        if kind == "dense":
            fan_in = shape[0]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(item[1], fan_in))
            layer = Layer("dense", w, np.zeros(item[1]))
        elif kind == "conv2d":
            k = item[2]
            fan_in = shape[0] * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(item[1], shape[0], k, k))
            layer = Layer("conv2d", w, np.zeros(item[1]))
        else:
            layer = Layer(kind)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return NetworkModel(layers, input_shape)


def synthesize_dataset(seed, samples, input_dim, num_classes, margin=1.0):
    """Seeded, linearly separable classification data.

    Class centres are spread on a sphere and every sample sits inside a ball
    around its centre that is at least ``margin`` away from every other
    class's ball. ``input_dim`` may be an int or a per-sample shape tuple.
    """
    shape = (input_dim,) if np.isscalar(input_dim) else tuple(input_dim)
    dim = int(np.prod(shape))
    if samples < 1 or dim < 1:
        raise ValueError("samples and input_dim must be positive")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(num_classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    gaps = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
    min_gap = gaps[~np.eye(num_classes, dtype=bool)].min()
    scale = 2.0 * margin / min_gap * 2.0
    centres *= scale
    radius = (min_gap * scale - margin) / 2.0

    labels = rng.integers(0, num_classes, size=samples)
    noise = rng.normal(size=(samples, dim))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= radius * rng.uniform(0.0, 1.0, size=(samples, 1)) ** (1.0 / dim)
    inputs = centres[labels] + noise
    return Dataset(inputs.reshape((samples,) + shape), labels, num_classes)


def train_toy(model, dataset, epochs, lr, seed=0, batch_size=None):
    """Plain SGD on every weight and bias.

    ``batch_size=None`` means full-batch gradient descent. Returns the trained
    copy and the list of full-dataset losses measured after each epoch.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    model = model.copy()
    rng = np.random.default_rng(seed)
    n = len(dataset)
    bs = n if batch_size is None else int(batch_size)
    params = model.weighted_layers()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, grads = loss_and_gradients(model, dataset.inputs[idx], dataset.labels[idx])
            for layer, (dw, db) in zip(params, grads):
                layer.weights -= lr * dw
                layer.bias -= lr * db
        loss = cross_entropy(forward(model, dataset.inputs), dataset.labels)
        losses.append(loss)
        if not np.isfinite(loss):
            raise NumericalError("training diverged", trajectory=losses)
    return model, losses
