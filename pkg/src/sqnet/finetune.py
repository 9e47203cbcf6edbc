"""Centroid fine-tuning with frozen cluster assignments.

A reconstructed weight is the sum of the centroids its stages selected, so
the loss gradient of one centroid is the sum of the weight gradients over
the weights that selected it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .hquant import StageStack, reconstruct
from .nn import cross_entropy, forward, loss_and_gradients


@dataclass
class FineTuneConfig:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    layers: tuple = None  # indices of layers to tune; None tunes all

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr and epochs must be non-negative, batch_size positive")


def centroid_params(stacks):
    """Per layer, a ``[stages, 2]`` float64 array of the stacks' centroids."""
    return [np.array([s.centroids for s in stack.stages], dtype=np.float64)
            for stack in stacks]


def _planes(stacks):
    return [np.stack([s.plane for s in stack.stages]) for stack in stacks]


def _weights_from(params, planes):
    # sum over stages of the selected centroid, stage order matches reconstruct()
    out = []
    for c, p in zip(params, planes):
        w = np.zeros(p.shape[1])
        for k in range(p.shape[0]):
            w += np.where(p[k], c[k, 1], c[k, 0])
        out.append(w)
    return out


def _scatter(weight_grads, planes):
    grads = []
    for g, p in zip(weight_grads, planes):
        g = g.reshape(-1)
        total = g.sum()
        ones = p @ g
        grads.append(np.stack([total - ones, ones], axis=1))
    return grads


def _scatter_exact(weight_grads, planes):
    grads = []
    for g, p in zip(weight_grads, planes):
        g = g.reshape(-1)
        grads.append(np.array([[g[~row].sum(), g[row].sum()] for row in p]))
    return grads


def centroid_gradients(stacks, model, batch, labels):
    """Loss gradient for every centroid, as per-layer ``[stages, 2]`` arrays.

    ``model`` supplies the architecture and biases; its weights are replaced
    by the stacks' full-depth reconstruction.
    """
    if len(stacks) != model.L:
        raise ValueError(f"{len(stacks)} stacks for a model with {model.L} weighted layers")
    for stack, layer in zip(stacks, model.weighted_layers()):
        if stack.N != layer.weights.size:
            raise ValueError(f"layer {stack.layer_index}: {stack.N} assignments for "
                             f"{layer.weights.size} weights")
    qmodel = model.with_weights(reconstruct(s) for s in stacks)
    _, grads = loss_and_gradients(qmodel, batch, labels)
    return _scatter_exact([dw for dw, _ in grads], _planes(stacks))


def _rebuild(stacks, params, ref_weights):
    out = []
    for stack, c, ref in zip(stacks, params, ref_weights):
        resid = ref.reshape(-1).astype(np.float64)
        stages = []
        for stage, (c0, c1) in zip(stack.stages, c):
            new = stage.with_centroids(c0, c1)
            resid = resid - new.values()
            stages.append(stage.with_centroids(c0, c1, float(np.mean(resid ** 2))))
        out.append(StageStack(stack.layer_index, stages, stack.original_shape, stack.kind_tag))
    return out


def fine_tune(stacks, model, train, config=None, val=None):
    """Plain SGD on the centroids; bit-planes never change.

    Returns ``(new_stacks, trajectory)`` where trajectory rows are
    ``(epoch, train_loss, val_loss)`` starting with epoch 0 (before any
    update). ``val_loss`` is None without a validation set. Centroids are
    trained in float64 and rounded to float32 once, at the end. Stage
    ``mse`` is re-measured against ``model``'s weights.
    """
    config = config or FineTuneConfig()
    params = centroid_params(stacks)
    planes = _planes(stacks)
    tuned = range(len(stacks)) if config.layers is None else config.layers
    rng = np.random.default_rng(config.seed)
    n = len(train)

    def losses():
        m = model.with_weights(_weights_from(params, planes))
        tr = cross_entropy(forward(m, train.inputs), train.labels)
        va = None if val is None else cross_entropy(forward(m, val.inputs), val.labels)
        return tr, va

    trajectory = [(0, *losses())]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            m = model.with_weights(_weights_from(params, planes))
            _, grads = loss_and_gradients(m, train.inputs[idx], train.labels[idx])
            cgrads = _scatter([dw for dw, _ in grads], planes)
            for i in tuned:
                params[i] -= config.lr * cgrads[i]
        trajectory.append((epoch, *losses()))
        if not np.isfinite(trajectory[-1][1]):
            raise NumericalError("fine-tuning diverged", trajectory=trajectory)
    limit = float(np.finfo(np.float32).max)
    if any(not np.all(np.abs(p) <= limit) for p in params):
        raise NumericalError("fine-tuned centroids overflow float32", trajectory=trajectory)
    ref = [layer.weights for layer in model.weighted_layers()]
    return _rebuild(stacks, params, ref), trajectory


def trajectory_csv(trajectory):
    lines = ["epoch,train_loss,val_loss"]
    for epoch, tr, va in trajectory:
        lines.append(f"{epoch},{tr!r},{'' if va is None else repr(va)}")
    return "\n".join(lines) + "\n"
