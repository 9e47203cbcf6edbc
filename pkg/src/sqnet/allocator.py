"""Budgeted per-layer bit allocation over a fixed hierarchical quantization.

The cost of an allocation ``n`` is the validation cross-entropy of the model
rebuilt at depths ``n``; its price is ``B = sum((N_i + 2b) * n_i)`` bits.
Three searches minimise cost subject to ``B <= budget``: exhaustive grid,
random sampling, and backward greedy removal of one stage at a time.
"""

from __future__ import annotations

import csv
import io
import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (InfeasibleBudgetError, SamplingStallError, SearchSpaceTooLargeError)
from .hquant import STORAGE_BITS, reconstruct
from .nn import cross_entropy, forward

DEFAULT_GRID_CAP = 10 ** 6
MAX_CONSECUTIVE_REJECTS = 10 ** 6


def total_bits(n, layer_sizes, b=STORAGE_BITS):
    """``sum((N_i + 2b) * n_i)`` in exact integer arithmetic."""
    n, layer_sizes = list(n), list(layer_sizes)
    if len(n) != len(layer_sizes):
        raise ValueError(f"{len(n)} depths but {len(layer_sizes)} layer sizes")
    return sum((int(N) + 2 * b) * int(k) for N, k in zip(layer_sizes, n))


@dataclass(frozen=True)
class OracleResult:
    allocation: tuple
    f_value: float
    eval_index: int


class CostOracle:
    """Memoised validation cross-entropy of the model rebuilt at a given allocation.

    Reconstructions are cached per (layer, depth); results are cached per
    allocation and only fresh evaluations advance ``n_evaluations``. Safe to
    call from several threads.
    """

    def __init__(self, stacks, model, dataset, b=STORAGE_BITS):
        if len(stacks) != model.L:
            raise ValueError(f"{len(stacks)} stacks for a model with {model.L} weighted layers")
        self.stacks = list(stacks)
        self.model = model
        self.dataset = dataset
        self.b = b
        self.layer_sizes = [s.N for s in self.stacks]
        self.max_bits = [s.n for s in self.stacks]
        self._memo = {}
        self._weights = {}
        self._lock = threading.Lock()
        self._count = 0

    @property
    def L(self):
        return len(self.stacks)

    @property
    def n_evaluations(self):
        return self._count

    def bits(self, n):
        return total_bits(n, self.layer_sizes, self.b)

    def _check(self, n):
        n = tuple(int(k) for k in n)
        if len(n) != self.L:
            raise ValueError(f"allocation has {len(n)} entries, expected {self.L}")
        for i, (k, hi) in enumerate(zip(n, self.max_bits)):
            if not 1 <= k <= hi:
                raise ValueError(f"layer {i}: depth {k} outside [1, {hi}]")
        return n

    def _layer_weights(self, i, k):
        key = (i, k)
        w = self._weights.get(key)
        if w is None:
            w = reconstruct(self.stacks[i], k)
            with self._lock:
                w = self._weights.setdefault(key, w)
        return w

    def loss(self, n):
        """Uncached cost of allocation ``n``."""
        n = self._check(n)
        model = self.model.with_weights(self._layer_weights(i, k) for i, k in enumerate(n))
        return cross_entropy(forward(model, self.dataset.inputs), self.dataset.labels)

    def evaluate(self, n):
        n = self._check(n)
        with self._lock:
            hit = self._memo.get(n)
        if hit is not None:
            return hit
        f = self.loss(n)
        with self._lock:
            hit = self._memo.get(n)
            if hit is None:
                self._count += 1
                hit = self._memo[n] = OracleResult(n, f, self._count)
        return hit

    def evaluate_many(self, allocations, threads=1):
        """Evaluate several allocations; results come back in input order."""
        allocations = list(allocations)
        if threads <= 1 or len(allocations) <= 1:
            return [self.evaluate(n) for n in allocations]
        # fresh evaluations race for eval_index; pre-reserving keeps the numbering
        # identical to the sequential path
        losses = {}
        with ThreadPoolExecutor(max_workers=threads) as pool:
            todo = [n for n in map(self._check, allocations) if n not in self._memo]
            for n, f in zip(todo, pool.map(self.loss, todo)):
                losses[n] = f
        out = []
        for n in map(self._check, allocations):
            with self._lock:
                hit = self._memo.get(n)
                if hit is None:
                    self._count += 1
                    hit = self._memo[n] = OracleResult(n, losses[n], self._count)
            out.append(hit)
        return out


@dataclass
class TraceEntry:
    step: int
    allocation: tuple
    B: int
    f: float
    eval_index: int


@dataclass
class SearchTrace:
    strategy: str
    budget: int
    visited: list = field(default_factory=list)
    chosen: tuple = None
    chosen_f: float = None
    chosen_B: int = None
    iterations: int = 0

    @property
    def evaluations(self):
        return len(self.visited)

    def record(self, step, result, B):
        self.visited.append(TraceEntry(step, result.allocation, B, result.f_value,
                                       result.eval_index))

    def to_csv(self, fh=None):
        """Write ``strategy,step,allocation,B_bits,f,eval_index`` rows; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "step", "allocation", "B_bits", "f", "eval_index"])
        for e in self.visited:
            w.writerow([self.strategy, e.step, "-".join(map(str, e.allocation)), e.B,
                        repr(e.f), e.eval_index])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _rank(entry):
    return (entry.f, entry.B, entry.allocation)


def _finish(trace, candidates):
    best = min(candidates, key=_rank)
    trace.chosen, trace.chosen_f, trace.chosen_B = best.allocation, best.f, best.B
    if trace.chosen_B > trace.budget:
        raise AssertionError("search returned an infeasible allocation")
    return trace


def _require_feasible(oracle, budget, box):
    floor = oracle.bits([1] * len(box))
    if floor > budget:
        raise InfeasibleBudgetError(
            f"infeasible budget: {budget} bits is below the all-ones cost of {floor} bits")


def _box(oracle, max_bits):
    box = list(oracle.max_bits if max_bits is None else max_bits)
    if len(box) != oracle.L:
        raise ValueError(f"max_bits has {len(box)} entries, expected {oracle.L}")
    for k, hi in zip(box, oracle.max_bits):
        if not 1 <= k <= hi:
            raise ValueError(f"max depth {k} outside the available [1, {hi}]")
    return box


def grid_search(oracle, budget, max_bits=None, cap=DEFAULT_GRID_CAP, threads=1):
    """Evaluate every feasible allocation in ``[1..max_i]^L``; return the best.

    Ties go to the smaller bit cost, then the lexicographically smaller vector.
    """
    box = _box(oracle, max_bits)
    size = int(np.prod(box, dtype=object))
    if size > cap:
        raise SearchSpaceTooLargeError(
            f"grid of {size} configurations exceeds the cap of {cap}", size)
    _require_feasible(oracle, budget, box)
    trace = SearchTrace("grid", budget)
    feasible = []
    for n in itertools.product(*(range(1, k + 1) for k in box)):
        B = oracle.bits(n)
        if B <= budget:
            feasible.append((n, B))
    results = oracle.evaluate_many([n for n, _ in feasible], threads)
    for step, ((n, B), res) in enumerate(zip(feasible, results)):
        trace.record(step, res, B)
    return _finish(trace, trace.visited)


def feasible_count(oracle, budget, max_bits=None):
    box = _box(oracle, max_bits)
    return sum(oracle.bits(n) <= budget
               for n in itertools.product(*(range(1, k + 1) for k in box)))


def random_search(oracle, budget, count, seed=0, max_bits=None, cap=DEFAULT_GRID_CAP,
                  max_rejects=MAX_CONSECUTIVE_REJECTS):
    """Uniform rejection sampling of ``count`` distinct feasible allocations.

    When the box is small enough to enumerate (``<= cap``) and holds fewer
    feasible points than ``count``, every feasible point is visited instead.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    box = _box(oracle, max_bits)
    _require_feasible(oracle, budget, box)
    if int(np.prod(box, dtype=object)) <= cap:
        count = min(count, feasible_count(oracle, budget, box))
    rng = np.random.default_rng(seed)
    high = np.asarray(box) + 1
    trace = SearchTrace("random", budget)
    seen = set()
    rejects = 0
    while len(seen) < count:
        n = tuple(int(k) for k in rng.integers(1, high))
        B = oracle.bits(n)
        if B > budget or n in seen:
            rejects += 1
            if rejects >= max_rejects:
                raise SamplingStallError(
                    f"{rejects} consecutive rejections after {len(seen)} samples; "
                    "tighten max_bits or lower count")
            continue
        rejects = 0
        seen.add(n)
        trace.record(len(trace.visited), oracle.evaluate(n), B)
    return _finish(trace, trace.visited)


def backward_greedy(oracle, budget, initial=None, b=STORAGE_BITS, threads=1):
    """Remove one stage per iteration until the allocation fits ``budget``.

    Each iteration tries dropping a stage from every layer still above one
    stage and keeps the candidate maximising
    ``(f(candidate) - f(current)) / (B(candidate) - B(current))``, i.e. the
    smallest loss increase per bit saved. Ties prefer the larger saving, then
    the lower layer index. The first visited entry is the starting point.
    """
    current = tuple(oracle.max_bits if initial is None else initial)
    res = oracle.evaluate(current)
    B = oracle.bits(current)
    trace = SearchTrace("greedy", budget)
    trace.record(0, res, B)
    f = res.f_value
    t = 0
    while B > budget:
        layers = [j for j in range(len(current)) if current[j] > 1]
        if not layers:
            raise InfeasibleBudgetError(
                f"budget unreachable: all layers at 1 stage still cost {B} bits > {budget}")
        cands = [current[:j] + (current[j] - 1,) + current[j + 1:] for j in layers]
        results = oracle.evaluate_many(cands, threads)
        t += 1
        best = None
        for j, cand, r in zip(layers, cands, results):
            Bc = oracle.bits(cand)
            trace.record(t, r, Bc)
            saving = B - Bc
            key = ((r.f_value - f) / (Bc - B), saving, -j)
            if best is None or key > best[0]:
                best = (key, cand, r.f_value, Bc)
        _, current, f, B = best
    trace.iterations = t
    trace.chosen, trace.chosen_f, trace.chosen_B = current, f, B
    return trace


def candidate_count_bound(trace, initial):
    """``L * (stages removed)``: the most candidates greedy may have evaluated."""
    return len(initial) * (sum(initial) - sum(trace.chosen))


def read_trace_csv(fh):
    rows = list(csv.DictReader(fh))
    for row in rows:
        row["step"] = int(row["step"])
        row["allocation"] = tuple(int(k) for k in row["allocation"].split("-"))
        row["B_bits"] = int(row["B_bits"])
        row["f"] = float(row["f"])
        row["eval_index"] = int(row["eval_index"])
    return rows
