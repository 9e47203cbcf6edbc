"""Hierarchical residual quantization with 1-bit (two-centroid) stages.

Stage 1 clusters a layer's weights into two groups; every following stage
clusters what the previous stages failed to represent. A weight is rebuilt
as the sum of the centroids it selected, so dropping trailing stages yields
exactly the quantization that a shallower run would have produced.

Centroids are computed in float64 but rounded to float32 before the residual
is formed, which keeps reconstruction from a serialized stream bit-identical
to reconstruction from memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

MAX_LLOYD_ITER = 100
STORAGE_BITS = 32


def _f32(x):
    return float(np.float32(x))


@dataclass(frozen=True, eq=False)
class Stage:
    """One 1-bit quantization stage: two centroids and a bit-plane of indices."""

    centroids: tuple
    plane: np.ndarray
    mse: float = float("nan")
    degenerate: bool = False

    def __post_init__(self):
        plane = np.asarray(self.plane, dtype=bool).reshape(-1)
        plane.setflags(write=False)
        object.__setattr__(self, "plane", plane)
        object.__setattr__(self, "centroids", (float(self.centroids[0]),
                                               float(self.centroids[1])))

    @property
    def N(self):
        return self.plane.shape[0]

    def values(self):
        """The centroid selected by each weight."""
        return np.where(self.plane, self.centroids[1], self.centroids[0])

    def __eq__(self, other):
        # mse is bookkeeping from quantization time and is not stored in streams
        if not isinstance(other, Stage):
            return NotImplemented
        return (self.centroids == other.centroids
                and np.array_equal(self.plane, other.plane))

    def with_centroids(self, c0, c1, mse=float("nan")):
        return Stage((_f32(c0), _f32(c1)), self.plane, mse, self.degenerate)


@dataclass(eq=False)
class StageStack:
    """All quantization stages of one network layer, base stage first."""

    layer_index: int
    stages: list
    original_shape: tuple
    kind_tag: str | None = None

    def __post_init__(self):
        self.stages = list(self.stages)
        self.original_shape = tuple(int(d) for d in self.original_shape)
        if not self.stages:
            raise ValueError("a StageStack needs at least one stage")
        n = int(np.prod(self.original_shape))
        for stage in self.stages:
            if stage.N != n:
                raise ValueError(f"plane length {stage.N} != weight count {n}")

    @property
    def N(self):
        return self.stages[0].N

    @property
    def n(self):
        return len(self.stages)

    def truncated(self, k):
        if not 1 <= k <= self.n:
            raise ValueError(f"depth {k} outside [1, {self.n}]")
        return StageStack(self.layer_index, self.stages[:k], self.original_shape, self.kind_tag)

    def __eq__(self, other):
        if not isinstance(other, StageStack):
            return NotImplemented
        return (self.layer_index == other.layer_index
                and self.original_shape == other.original_shape
                and self.kind_tag == other.kind_tag
                and self.stages == other.stages)


def kmeans2(values):
    """Two-means clustering of a 1-D array by Lloyd iteration.

    Starts from (min, max), assigns ties to cluster 0, stops when the
    assignment repeats or after 100 rounds. Returns a ``Stage`` whose
    centroids are already rounded to float32 and whose ``mse`` is measured
    against those rounded centroids.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("kmeans2 needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("kmeans2 input must be finite")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        c = _f32(lo)
        return Stage((c, c), np.zeros(x.size, dtype=bool), float(np.mean((x - c) ** 2)), True)

    c0, c1 = lo, hi
    assign = None
    for _ in range(MAX_LLOYD_ITER):
        new = np.abs(x - c1) < np.abs(x - c0)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        ones = int(assign.sum())
        if ones == 0:
            # empty cluster 1: reseed at the point farthest from c0
            assign = assign.copy()
            assign[np.argmax(np.abs(x - c0))] = True
        elif ones == x.size:
            assign = assign.copy()
            assign[np.argmax(np.abs(x - c1))] = False
        c0 = float(x[~assign].mean())
        c1 = float(x[assign].mean())

    c0, c1 = _f32(c0), _f32(c1)
    resid = x - np.where(assign, c1, c0)
    return Stage((c0, c1), assign, float(np.mean(resid ** 2)), False)


def hierarchical_quantize(weights, n, layer_index=0, kind_tag=None):
    """Quantize a weight tensor into ``n`` residual stages."""
    if n < 1:
        raise ValueError(f"stage count must be >= 1, got {n}")
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty weight tensor")
    shape = w.shape if w.ndim else (1,)
    resid = w.reshape(-1).copy()
    stages = []
    for _ in range(n):
        stage = kmeans2(resid)
        resid = resid - stage.values()
        stages.append(stage)
    return StageStack(layer_index, stages, shape, kind_tag)


def reconstruct(stack, k=None):
    """Weights rebuilt from the first ``k`` stages (all stages by default), flat."""
    k = stack.n if k is None else k
    if not 1 <= k <= stack.n:
        raise ValueError(f"depth {k} outside [1, {stack.n}]")
    out = np.zeros(stack.N, dtype=np.float64)
    for stage in stack.stages[:k]:
        out += stage.values()
    return out


@dataclass(frozen=True)
class RateReport:
    N: int
    n: int
    b: int
    index_bits: int
    centroid_bits: int
    ratio: Fraction
    conventional_ratio: Fraction
    on_disk_bits: int | None = field(default=None)

    @property
    def payload_bits(self):
        return self.index_bits + self.centroid_bits


def compression_rate(N, n, b=STORAGE_BITS, on_disk_bits=None):
    """Exact rate ``N*b / (N*n + 2*n*b)`` plus the plain K-means comparator.

    The comparator stores ``2**n`` centroids instead of ``2*n``.
    """
    for name, v in (("N", N), ("n", n), ("b", b)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    N, n, b = int(N), int(n), int(b)
    index_bits = N * n
    centroid_bits = 2 * n * b
    return RateReport(N, n, b, index_bits, centroid_bits,
                      Fraction(N * b, index_bits + centroid_bits),
                      Fraction(N * b, index_bits + (2 ** n) * b),
                      on_disk_bits)


def initial_allocation(model, conv_bits=8, fc_bits=5):
    """Starting depths: ``conv_bits`` per CONV layer, ``fc_bits`` per FC layer."""
    if conv_bits < 1 or fc_bits < 1:
        raise ValueError("initial bit depths must be >= 1")
    return [conv_bits if tag == "CONV" else fc_bits for tag in model.kind_tags()]


def quantize_model(model, allocation):
    """One ``StageStack`` per weighted layer, with ``allocation[i]`` stages."""
    allocation = [int(a) for a in allocation]
    if len(allocation) != model.L:
        raise ValueError(f"allocation has {len(allocation)} entries, model has {model.L} "
                         "weighted layers")
    if min(allocation) < 1:
        raise ValueError("every layer needs at least one stage")
    return [hierarchical_quantize(layer.weights, n, i, layer.kind_tag)
            for i, (layer, n) in enumerate(zip(model.weighted_layers(), allocation))]


def reconstruct_model(model, stacks, allocation=None):
    """Copy of ``model`` whose weights are rebuilt from ``stacks``.

    Biases are never quantized and are taken from ``model`` unchanged.
    """
    if allocation is None:
        allocation = [s.n for s in stacks]
    return model.with_weights(reconstruct(s, k) for s, k in zip(stacks, allocation))
