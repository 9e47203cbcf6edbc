"""scikit-learn style wrappers around the compression pipeline.

Each estimator takes its hyperparameters in ``__init__``, learns in ``fit``
and exposes fitted state through trailing-underscore attributes, so it
supports ``get_params``/``set_params``/``clone`` like any sklearn object.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import allocator, bitstream
from ._validation import check_allocation, check_weights, parse_budget
from .finetune import FineTuneConfig, fine_tune
from .hquant import (compression_rate, hierarchical_quantize, initial_allocation,
                     quantize_model, reconstruct, reconstruct_model)


class HierarchicalQuantizer(TransformerMixin, BaseEstimator):
    """Residual two-centroid quantizer for a single weight tensor.

    ``transform`` encodes values against the fitted centroids as an
    ``[n_values, n_stages]`` boolean code matrix; ``inverse_transform`` sums
    the selected centroids back up.
    """

    def __init__(self, n_stages=8):
        self.n_stages = n_stages

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        check_weights(X)
        self.stack_ = hierarchical_quantize(X, self.n_stages)
        self.shape_ = self.stack_.original_shape
        return self

    def transform(self, X):
        check_is_fitted(self, "stack_")
        resid = check_weights(X).copy()
        codes = np.zeros((resid.size, self.stack_.n), dtype=bool)
        for k, stage in enumerate(self.stack_.stages):
            c0, c1 = stage.centroids
            codes[:, k] = np.abs(resid - c1) < np.abs(resid - c0)
            resid -= np.where(codes[:, k], c1, c0)
        return codes

    def inverse_transform(self, codes):
        check_is_fitted(self, "stack_")
        codes = np.asarray(codes, dtype=bool)
        out = np.zeros(codes.shape[0])
        for k in range(codes.shape[1]):
            c0, c1 = self.stack_.stages[k].centroids
            out += np.where(codes[:, k], c1, c0)
        return out

    def reconstruct(self, depth=None):
        """Fitted tensor rebuilt from the first ``depth`` stages, original shape."""
        check_is_fitted(self, "stack_")
        return reconstruct(self.stack_, depth).reshape(self.shape_)

    def rate_report(self, depth=None):
        check_is_fitted(self, "stack_")
        depth = self.stack_.n if depth is None else depth
        return compression_rate(self.stack_.N, depth)


class ModelQuantizer(BaseEstimator):
    """Quantize every weighted layer of a ``NetworkModel``.

    Depths come from ``allocation`` when given, else ``conv_bits`` per CONV
    layer and ``fc_bits`` per FC layer.
    """

    def __init__(self, conv_bits=8, fc_bits=5, allocation=None):
        self.conv_bits = conv_bits
        self.fc_bits = fc_bits
        self.allocation = allocation

    def fit(self, model, y=None):
        if self.allocation is None:
            alloc = initial_allocation(model, self.conv_bits, self.fc_bits)
        else:
            alloc = check_allocation(self.allocation)
        self.allocation_ = alloc
        self.stacks_ = quantize_model(model, alloc)
        self.layer_sizes_ = [s.N for s in self.stacks_]
        self.total_bits_ = allocator.total_bits(alloc, self.layer_sizes_)
        return self

    def transform(self, model, allocation=None):
        """Copy of ``model`` with weights rebuilt at ``allocation`` (default: full depth)."""
        check_is_fitted(self, "stacks_")
        if allocation is not None:
            allocation = check_allocation(allocation, self.allocation_)
        return reconstruct_model(model, self.stacks_, allocation)

    def rate_reports(self):
        check_is_fitted(self, "stacks_")
        return [compression_rate(s.N, s.n, on_disk_bits=bitstream.layer_on_disk_bits(s))
                for s in self.stacks_]

    def to_stream(self):
        check_is_fitted(self, "stacks_")
        return bitstream.serialize(self.stacks_)


class BitAllocator(BaseEstimator):
    """Choose per-layer depths under a bit budget.

    ``strategy`` is ``"greedy"`` (backward greedy), ``"grid"`` or ``"random"``.
    ``budget`` accepts bits or strings like ``"200KB"``.
    """

    def __init__(self, budget, strategy="greedy", count=120, seed=0, max_bits=None,
                 grid_cap=allocator.DEFAULT_GRID_CAP, threads=1):
        self.budget = budget
        self.strategy = strategy
        self.count = count
        self.seed = seed
        self.max_bits = max_bits
        self.grid_cap = grid_cap
        self.threads = threads

    def fit(self, stacks, model, dataset, oracle=None):
        bits = parse_budget(self.budget)
        self.oracle_ = oracle or allocator.CostOracle(stacks, model, dataset)
        if self.strategy == "greedy":
            initial = None if self.max_bits is None else self.max_bits
            trace = allocator.backward_greedy(self.oracle_, bits, initial, threads=self.threads)
        elif self.strategy == "grid":
            trace = allocator.grid_search(self.oracle_, bits, self.max_bits, self.grid_cap,
                                          threads=self.threads)
        elif self.strategy == "random":
            trace = allocator.random_search(self.oracle_, bits, self.count, self.seed,
                                            self.max_bits, self.grid_cap)
        else:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.budget_bits_ = bits
        self.trace_ = trace
        self.allocation_ = list(trace.chosen)
        self.f_ = trace.chosen_f
        self.total_bits_ = trace.chosen_B
        return self

    def transform(self, stacks):
        """Stacks cut to the chosen allocation."""
        check_is_fitted(self, "allocation_")
        return [s.truncated(k) for s, k in zip(stacks, self.allocation_)]


class CentroidFineTuner(BaseEstimator):
    """SGD on the centroids of quantized stacks, assignments frozen."""

    def __init__(self, lr=0.01, epochs=10, batch_size=32, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, stacks, model, train, val=None):
        config = FineTuneConfig(self.lr, self.epochs, self.batch_size, self.seed)
        self.stacks_, self.trajectory_ = fine_tune(stacks, model, train, config, val)
        return self

    def transform(self, model):
        check_is_fitted(self, "stacks_")
        return reconstruct_model(model, self.stacks_)
