"""Command-line front end: ``sqnet <command> [--config FILE] [flags]``.

Config files are flat ``key = value`` text; ``#`` starts a comment, keys use
the long flag names with ``-`` or ``_``. Flags override the file.

Exit codes: 0 ok, 2 configuration, 3 file access, 4 malformed input,
5 infeasible budget or search, 6 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import os
import sys

import numpy as np

from . import allocator, bitstream
from ._validation import parse_allocation, parse_budget
from .errors import ConfigError, SqnetError
from .finetune import FineTuneConfig, fine_tune, trajectory_csv
from .hquant import compression_rate, initial_allocation, quantize_model, reconstruct_model
from .io import (KB, load_idx, load_model, model_info, read_bytes, save_model, write_bytes,
                 write_idx_images, write_idx_labels)
from .nn import build_model, evaluate_model, synthesize_dataset, train_toy

DEFAULTS = {
    "conv_bits": 8, "fc_bits": 5, "strategy": "greedy", "count": 120, "seed": 0,
    "grid_cap": allocator.DEFAULT_GRID_CAP, "threads": 1, "ft_lr": 0.01, "ft_epochs": 5,
    "ft_batch_size": 32, "ft_seed": 0,
}
_INT_KEYS = {"conv_bits", "fc_bits", "count", "seed", "grid_cap", "threads", "ft_epochs",
             "ft_batch_size", "ft_seed", "val_samples", "train_samples", "samples", "size",
             "epochs"}
_FLOAT_KEYS = {"ft_lr", "lr"}


def load_config(path):
    """Parse a flat ``key = value`` file into a dict of strings."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class Job(dict):
    """Merged settings: defaults < config file < flags."""

    def need(self, key):
        if self.get(key) in (None, ""):
            raise ConfigError(f"missing setting {key!r} (flag --{key.replace('_', '-')})")
        return self[key]

    def int(self, key):
        try:
            return int(self.need(key))
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {self[key]!r}") from None

    def float(self, key):
        try:
            return float(self.need(key))
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {self[key]!r}") from None


def _job(args):
    job = Job(DEFAULTS)
    if getattr(args, "config", None):
        job.update(load_config(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "func"):
            job[key] = value
    return job


def _out(text=""):
    print(text)


def _fmt_rate(r):
    return f"{float(r):.4f}"


def _dataset(job, prefix):
    images, labels = job.get(f"{prefix}_images"), job.get(f"{prefix}_labels")
    if not images or not labels:
        raise ConfigError(f"{prefix} dataset needs --{prefix}-images and --{prefix}-labels")
    ds = load_idx(images, labels)
    limit = job.get(f"{prefix}_samples")
    if limit not in (None, ""):
        ds = ds.subset(int(limit))
    return ds


def _stream_bytes(path):
    data = read_bytes(path)
    bitstream.read_header(data)
    return data


def _original_bits(model):
    return 32 * sum(model.weight_counts())


def _print_layers(stacks):
    _out("layer  kind  N        n   index_bits  centroid_bits  on_disk_bits  ratio     kmeans_ratio")
    for s in stacks:
        rep = compression_rate(s.N, s.n, on_disk_bits=bitstream.layer_on_disk_bits(s))
        _out(f"{s.layer_index:<6} {str(s.kind_tag):<5} {s.N:<8} {s.n:<3} {rep.index_bits:<11} "
             f"{rep.centroid_bits:<14} {rep.on_disk_bits:<13} {_fmt_rate(rep.ratio):<9} "
             f"{_fmt_rate(rep.conventional_ratio)}")


def cmd_quantize(job):
    model = load_model(job.need("model"))
    alloc = initial_allocation(model, job.int("conv_bits"), job.int("fc_bits"))
    stacks = quantize_model(model, alloc)
    data = bitstream.serialize(stacks)
    write_bytes(job.need("out"), data)
    E = allocator.total_bits(alloc, [s.N for s in stacks])
    _print_layers(stacks)
    _out(f"allocation {'-'.join(map(str, alloc))}")
    _out(f"E (initial network bits) {E} = {E / 8 / KB:.3f} KB")
    _out(f"on-disk {len(data)} bytes -> {job['out']}")
    return 0


def _summary_row(strategy, budget_bits, model, data, trace):
    rep = bitstream.stream_report(data)
    orig = _original_bits(model)
    return {
        "strategy": strategy,
        "budget_bits": budget_bits,
        "budget_kb": f"{budget_bits / 8 / KB:.4f}",
        "nominal_rate": f"{orig / budget_bits:.4f}",
        "achieved_rate": f"{orig / rep['on_disk_bits']:.4f}",
        "evaluations": trace.evaluations,
        "allocation": "-".join(map(str, trace.chosen)),
        "B_bits": trace.chosen_B,
        "on_disk_bits": rep["on_disk_bits"],
        "f": repr(trace.chosen_f),
    }


def run_allocate(job, model, data):
    stacks = bitstream.deserialize(data)
    val = _dataset(job, "val")
    budget = parse_budget(job.need("budget"))
    oracle = allocator.CostOracle(stacks, model, val)
    strategy = job.need("strategy")
    threads = job.int("threads")
    max_bits = parse_allocation(job["max_bits"]) if job.get("max_bits") else None
    if strategy == "greedy":
        trace = allocator.backward_greedy(oracle, budget, max_bits, threads=threads)
    elif strategy == "grid":
        trace = allocator.grid_search(oracle, budget, max_bits, job.int("grid_cap"), threads)
    elif strategy == "random":
        trace = allocator.random_search(oracle, budget, job.int("count"), job.int("seed"),
                                        max_bits, job.int("grid_cap"))
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; use greedy, grid or random")
    out = bitstream.truncate(data, trace.chosen)
    return trace, out, _summary_row(strategy, budget, model, out, trace)


def _write_summary(path, row):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    write_bytes(path, buf.getvalue().encode())


def cmd_allocate(job):
    model = load_model(job.need("model"))
    trace, out, row = run_allocate(job, model, _stream_bytes(job.need("stream")))
    write_bytes(job.need("out"), out)
    if job.get("trace"):
        write_bytes(job["trace"], trace.to_csv().encode())
    if job.get("summary"):
        _write_summary(job["summary"], row)
    budget = row["budget_bits"]
    _out(f"strategy {row['strategy']}, budget {budget} bits = {budget / 8 / KB:.3f} KB "
         "(1 KB = 1024 bytes)")
    _out(f"configurations tested {row['evaluations']}")
    _out(f"allocation {row['allocation']}  B {row['B_bits']} bits  f {float(row['f']):.6f}")
    _out(f"compression rate (original / budget) {row['nominal_rate']}")
    _out(f"compression rate (original / on-disk) {row['achieved_rate']}")
    if row["on_disk_bits"] > budget:
        _out(f"note: on-disk size {row['on_disk_bits']} bits includes headers and padding "
             "beyond the budget")
    return 0


def cmd_truncate(job):
    data = _stream_bytes(job.need("stream"))
    out = bitstream.truncate(data, parse_allocation(job.need("allocation")))
    n = write_bytes(job.need("out"), out)
    _out(f"wrote {n} bytes -> {job['out']}")
    return 0


def cmd_delta(job):
    delta = bitstream.make_delta(_stream_bytes(job.need("old")), _stream_bytes(job.need("new")))
    n = bitstream.write_delta(delta, job.need("out"))
    _out(f"added planes {delta.added_plane_bits} bits, centroids {delta.centroid_bits} bits "
         f"(refreshed {delta.updated_centroid_bits}), file {n} bytes -> {job['out']}")
    return 0


def cmd_apply_delta(job):
    delta = bitstream.read_delta(job.need("delta"))
    out = bitstream.apply_delta(_stream_bytes(job.need("stream")), delta)
    n = write_bytes(job.need("out"), out)
    _out(f"wrote {n} bytes -> {job['out']}")
    return 0


def run_finetune(job, model, data):
    stacks = bitstream.deserialize(data)
    train = _dataset(job, "train")
    val = _dataset(job, "val") if job.get("val_images") else None
    cfg = FineTuneConfig(job.float("ft_lr"), job.int("ft_epochs"), job.int("ft_batch_size"),
                         job.int("ft_seed"))
    tuned, trajectory = fine_tune(stacks, model, train, cfg, val)
    return bitstream.serialize(tuned), trajectory


def cmd_finetune(job):
    model = load_model(job.need("model"))
    out, trajectory = run_finetune(job, model, _stream_bytes(job.need("stream")))
    write_bytes(job.need("out"), out)
    if job.get("trajectory"):
        write_bytes(job["trajectory"], trajectory_csv(trajectory).encode())
    _out(f"train loss {trajectory[0][1]:.6f} -> {trajectory[-1][1]:.6f}")
    _out(f"wrote {len(out)} bytes -> {job['out']}")
    return 0


def eval_lines(job, model, data):
    stacks = bitstream.deserialize(data)
    val = _dataset(job, "val")
    f, acc = evaluate_model(reconstruct_model(model, stacks), val)
    rep = bitstream.stream_report(data)
    return [f"f {f!r}", f"top1 {acc!r}", f"B_bits {rep['eq4_bits']}",
            f"on_disk_bytes {rep['on_disk_bits'] // 8}"]


def cmd_eval(job):
    model = load_model(job.need("model"))
    for line in eval_lines(job, model, _stream_bytes(job.need("stream"))):
        _out(line)
    return 0


def info_lines(path):
    data = read_bytes(path)
    magic = data[:4]
    if magic == bitstream.STREAM_MAGIC:
        stacks = bitstream.deserialize(data)
        rep = bitstream.stream_report(data)
        lines = [f"stream {path}", f"L {rep['L']}", "layer  kind  N  n  ratio"]
        for s in stacks:
            r = compression_rate(s.N, s.n)
            lines.append(f"{s.layer_index} {s.kind_tag} {s.N} {s.n} {_fmt_rate(r.ratio)} "
                         f"({r.ratio.numerator}/{r.ratio.denominator})")
        lines += [f"B_bits {rep['eq4_bits']}", f"padding_bits {rep['padding_bits']}",
                  f"header_bytes {rep['header_bytes']}", f"on_disk_bits {rep['on_disk_bits']}",
                  f"fingerprint {rep['fingerprint']:016x}"]
        return lines
    if magic == bitstream.DELTA_MAGIC:
        d = bitstream.decode_delta(data)
        lines = [f"delta {path}", f"base {d.base_fingerprint:016x}",
                 f"target {d.target_fingerprint:016x}"]
        for ld in d.layers:
            lines.append(f"layer {ld.layer_index} N {ld.N} added {len(ld.added_stages)} "
                         f"refreshed {len(ld.centroid_updates)}")
        lines += [f"added_plane_bits {d.added_plane_bits}", f"centroid_bits {d.centroid_bits}"]
        return lines
    info = model_info(load_model(path))
    lines = [f"model {path}", f"L {info['L']}", f"input {info['input_shape']}"]
    for layer in info["layers"]:
        lines.append(f"{layer['index']} {layer['kind']} {layer['kind_tag']} "
                     f"{layer['shape']} N {layer['N']}")
    lines += [f"weight payload {info['payload_bytes']} bytes = {info['payload_kb']:.2f} KB",
              f"bias bytes {info['bias_bytes']}", f"file bytes {info['file_bytes']}"]
    return lines


def cmd_info(job):
    for line in info_lines(job.need("file")):
        _out(line)
    return 0


def report_lines(paths):
    rows = []
    for path in paths:
        text = read_bytes(path).decode()
        rows.extend(csv.DictReader(_io.StringIO(text)))
    if not rows:
        return ["(no rows)"]
    rows.sort(key=lambda r: (r["strategy"], -int(r["budget_bits"])))
    lines = [f"{'strategy':<8} {'budget_KB':>10} {'rate':>8} {'achieved':>9} {'tested':>7} "
             f"{'allocation':<14} {'f':>10}"]
    for r in rows:
        lines.append(f"{r['strategy']:<8} {float(r['budget_kb']):>10.2f} "
                     f"{float(r['nominal_rate']):>8.2f} {float(r['achieved_rate']):>9.2f} "
                     f"{r['evaluations']:>7} {r['allocation']:<14} {float(r['f']):>10.6f}")
    return lines


def cmd_report(job):
    for line in report_lines(job.need("summaries")):
        _out(line)
    return 0


def cmd_pipeline(job):
    """quantize -> allocate -> finetune -> upgrade delta -> eval, all under ``workdir``."""
    work = job.need("workdir")
    os.makedirs(work, exist_ok=True)
    path = lambda name: os.path.join(work, name)  # noqa: E731
    model = load_model(job.need("model"))
    alloc = initial_allocation(model, job.int("conv_bits"), job.int("fc_bits"))
    initial = bitstream.serialize(quantize_model(model, alloc))
    write_bytes(path("initial.sqbs"), initial)
    trace, allocated, row = run_allocate(job, model, initial)
    write_bytes(path("allocated.sqbs"), allocated)
    write_bytes(path("trace.csv"), trace.to_csv().encode())
    _write_summary(path("summary.csv"), row)
    tuned, trajectory = run_finetune(job, model, allocated)
    write_bytes(path("finetuned.sqbs"), tuned)
    write_bytes(path("trajectory.csv"), trajectory_csv(trajectory).encode())
    delta = bitstream.make_delta(tuned, initial)
    bitstream.write_delta(delta, path("upgrade.sqdl"))
    lines = eval_lines(job, model, tuned)
    write_bytes(path("eval.txt"), ("\n".join(lines) + "\n").encode())
    _out(f"allocation {row['allocation']}  rate {row['nominal_rate']} "
         f"(achieved {row['achieved_rate']})  tested {row['evaluations']}")
    for line in lines:
        _out(line)
    return 0


def cmd_make_toy(job):
    """Write a small trained 2-CONV/2-FC model plus IDX train/val files."""
    out = job.need("out_dir")
    os.makedirs(out, exist_ok=True)
    seed, size = job.int("seed"), int(job.get("size") or 12)
    samples = int(job.get("samples") or 1024)
    ds = synthesize_dataset(seed, samples, (size, size), 4)
    lo, hi = ds.inputs.min(), ds.inputs.max()
    images = np.round((ds.inputs - lo) / (hi - lo) * 255).astype(np.uint8)
    half = samples // 2
    write_idx_images(os.path.join(out, "train-images.idx"), images[:half])
    write_idx_labels(os.path.join(out, "train-labels.idx"), ds.labels[:half])
    write_idx_images(os.path.join(out, "val-images.idx"), images[half:])
    write_idx_labels(os.path.join(out, "val-labels.idx"), ds.labels[half:])
    train = load_idx(os.path.join(out, "train-images.idx"),
                     os.path.join(out, "train-labels.idx"), 4)
    model = toy_lenet((1, size, size), seed)
    model, losses = train_toy(model, train, int(job.get("epochs") or 80),
                              float(job.get("lr") or 0.1), seed, batch_size=32)
    save_model(model, os.path.join(out, "model.sqnm"))
    _out(f"toy model {model.n_params()} params, final train loss {losses[-1]:.4f} -> {out}")
    return 0


def toy_lenet(input_shape, seed=0, classes=4):
    return build_model([("conv2d", 4, 3), ("relu",), ("maxpool2x2",),
                        ("conv2d", 8, 3), ("relu",), ("maxpool2x2",), ("flatten",),
                        ("dense", 16), ("relu",), ("dense", classes)], input_shape, seed)


def _parser():
    p = argparse.ArgumentParser(prog="sqnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, *flags):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--threads", type=int)
        for flag in flags:
            kw = {}
            key = flag.lstrip("-").replace("-", "_")
            if key in _INT_KEYS:
                kw["type"] = int
            elif key in _FLOAT_KEYS:
                kw["type"] = float
            sp.add_argument(flag, **kw)
        sp.set_defaults(func=func)
        return sp

    data = ["--val-images", "--val-labels", "--val-samples"]
    train = ["--train-images", "--train-labels", "--train-samples"]
    search = ["--budget", "--strategy", "--count", "--seed", "--max-bits", "--grid-cap"]
    ft = ["--ft-lr", "--ft-epochs", "--ft-batch-size", "--ft-seed"]
    add("quantize", cmd_quantize, "--model", "--conv-bits", "--fc-bits", "--out")
    add("allocate", cmd_allocate, "--model", "--stream", "--out", "--trace", "--summary",
        *data, *search)
    add("truncate", cmd_truncate, "--stream", "--allocation", "--out")
    add("delta", cmd_delta, "--old", "--new", "--out")
    add("apply-delta", cmd_apply_delta, "--stream", "--delta", "--out")
    add("finetune", cmd_finetune, "--model", "--stream", "--out", "--trajectory",
        *train, *data, *ft)
    add("eval", cmd_eval, "--model", "--stream", *data)
    sp = add("info", cmd_info)
    sp.add_argument("file")
    sp = add("report", cmd_report)
    sp.add_argument("summaries", nargs="+")
    add("pipeline", cmd_pipeline, "--model", "--workdir", "--conv-bits", "--fc-bits",
        *data, *train, *search, *ft)
    add("make-toy", cmd_make_toy, "--out-dir", "--seed", "--samples", "--size", "--epochs",
        "--lr")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.func(_job(args))
    except SqnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
