"""Command-line entry point: ``igcnet <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
format error.
"""
import argparse
import contextlib
import csv
import dataclasses
import glob
import io
import json
import logging
import os
import sys

import numpy as np

from . import algebra, budget, tables
from .arch import resolve_arch
from .block import IgcConfig, init_igc_params
from .errors import CheckpointError, ConfigError, FormatError, IgcError
from .rng import CounterRNG

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("igcnet")


class UsageError(Exception):
    pass


def _print_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("# config: " + json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(fh, header, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])


def _figure_path(args):
    return getattr(args, "figure", None)


# -- analyze -----------------------------------------------------------------

def cmd_analyze(args):
    if args.arch:
        arch = resolve_arch(args.arch)
        if args.depth:
            arch = arch.with_depth(args.depth)
        nb = budget.network_budget(arch, args.input_hw)
        with _output(args.out) as fh:
            if args.format == "json":
                json.dump(dataclasses.asdict(nb), fh, indent=2)
                fh.write("\n")
            else:
                _write_csv(fh, ["stage", "params", "flops"],
                           nb.per_stage + [{"stage": "total", "params": nb.total_params, "flops": nb.flops}])
        return EXIT_OK
    if args.target is None:
        raise UsageError("analyze needs --target (block budget) or --arch (network budget)")
    report = budget.enumerate_configs(args.target, args.s, args.tol, args.block)
    with _output(args.out) as fh:
        if args.markdown:
            fh.write(_report_markdown(report))
        elif args.format == "json":
            json.dump({"target_params": report.target_params, "S": report.S,
                       "block_type": report.block_type, "tol_fraction": report.tol_fraction,
                       "widest": budget.widest_config(args.target, args.s, args.tol, args.block),
                       "entries": [e._asdict() for e in report.entries]}, fh, indent=2)
            fh.write("\n")
        else:
            _write_csv(fh, ["L", "M", "params", "width"], [e._asdict() for e in report.entries])
    if _figure_path(args):
        from .plotting import plot_budget_report
        plot_budget_report(report, args.figure)
    return EXIT_OK


def _report_markdown(report):
    e = report.entries
    lines = [f"{report.block_type.upper()} blocks, #params ~ {report.target_params}, S = {report.S}", "",
             "| L | " + " | ".join(str(x.L) for x in e) + " |",
             "|" + "---|" * (len(e) + 1),
             "| M | " + " | ".join(str(x.M) for x in e) + " |",
             "| #params | " + " | ".join(str(x.params) for x in e) + " |",
             "| Width | " + " | ".join(str(x.width) for x in e) + " |", ""]
    return "\n".join(lines)


# -- verify ------------------------------------------------------------------

def equivalence_rows(grid, ks, trials, seed):
    rows = []
    for L in grid:
        for M in grid:
            for k in ks:
                cfg = IgcConfig(L, M, k)
                params = init_igc_params(cfg, CounterRNG(seed, "params", L, M, k))
                err = algebra.verify_equivalence(cfg, params, trials, seed)
                tol = algebra.tolerance_for(k)
                rows.append({"check": "compose", "L": L, "M": M, "k": k, "trials": trials,
                             "max_abs_error": err, "tolerance": tol, "passed": err < tol})
    return rows


def special_case_rows(trials, seed, C=4, k=3, hw=5):
    """Worst errors of the regular-conv, summation-fusion and channel-wise
    constructions.  These are exact rearrangements, so they are held to the
    tight 1e-12 bound even at k = 3."""
    from . import tensor as tc

    rng = CounterRNG(seed, "special")
    worst = {"regular_conv": 0.0, "sum_fusion": 0.0, "channelwise": 0.0}
    shapes = {}
    for t in range(trials):
        r = rng.child(t)
        W = r.child("W").normal((C, C, k, k))
        x = r.child("x").normal((2, C, hw, hw))
        dense = tc.conv2d_forward(x, W)
        c = algebra.regular_conv_as_igc(W, L=4)
        out = c.forward(x)
        worst["regular_conv"] = max(worst["regular_conv"], float(np.abs(out - algebra.replicate(dense, 2)).max()))
        shapes["regular_conv"] = c.config
        c = algebra.channelwise_extreme_as_igc(W)
        out = c.forward(x)
        worst["channelwise"] = max(worst["channelwise"], float(np.abs(out - algebra.replicate(dense, C)).max()))
        shapes["channelwise"] = c.config
        branches = r.child("branches").normal((4, C, C, k, k))
        c = algebra.summation_fusion_as_igc(list(branches))
        out = c.forward(x)
        ref = sum(tc.conv2d_forward(x, b) for b in branches)
        worst["sum_fusion"] = max(worst["sum_fusion"], float(np.abs(out - algebra.replicate(ref, 4)).max()))
        shapes["sum_fusion"] = c.config
    return [{"check": name, "L": shapes[name].L, "M": shapes[name].M, "k": k, "trials": trials,
             "max_abs_error": err, "tolerance": algebra.TOLERANCE_K1, "passed": err < algebra.TOLERANCE_K1}
            for name, err in worst.items()]


def cmd_verify(args):
    if args.grid_max < 1 or args.trials < 1:
        raise UsageError("--grid-max and --trials must be >= 1")
    grid = [int(v) for v in args.grid.split(",")] if args.grid else list(range(1, args.grid_max + 1))
    ks = [int(v) for v in args.ks.split(",")]
    rows = equivalence_rows(grid, ks, args.trials, args.seed)
    if not args.no_special:
        rows += special_case_rows(args.trials, args.seed)
    with _output(args.out) as fh:
        _write_csv(fh, ["check", "L", "M", "k", "trials", "max_abs_error", "tolerance", "passed"], rows)
    if _figure_path(args):
        from .plotting import plot_equivalence
        plot_equivalence(rows, args.figure)
    failed = [r for r in rows if not r["passed"]]
    if failed:
        print(f"verification failed for {len(failed)} of {len(rows)} checks", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- train / eval ------------------------------------------------------------

def load_data(ref, class_count, split, data_seed, per_class, hw, normalization=None):
    """``synth`` or a directory of CIFAR binary batches."""
    from .data import load_cifar_binary, synth_dataset

    if ref == "synth":
        return synth_dataset(data_seed, class_count, per_class if split == "train" else max(per_class // 2, 1),
                             hw, split=split)
    if not os.path.isdir(ref):
        raise FileNotFoundError(f"data directory {ref!r} does not exist")
    if split == "train":
        files = sorted(glob.glob(os.path.join(ref, "data_batch_*.bin"))) or \
            [p for p in [os.path.join(ref, "train.bin")] if os.path.exists(p)]
    else:
        files = [p for p in [os.path.join(ref, "test_batch.bin"), os.path.join(ref, "test.bin")]
                 if os.path.exists(p)]
    if not files:
        raise FileNotFoundError(f"no CIFAR {split} batches found in {ref!r}")
    return load_cifar_binary(files, class_count=class_count, normalization=normalization)


def _history_rows_csv(history):
    buf = io.StringIO()
    _write_csv(buf, ["epoch", "lr", "train_loss", "train_acc", "eval_acc"], history)
    return buf.getvalue()


def cmd_train(args):
    from .data import save_checkpoint
    from .network import TrainConfig, build_network, train

    arch = resolve_arch(args.arch)
    if args.depth:
        arch = arch.with_depth(args.depth)
    train_set = load_data(args.data, arch.n_classes, "train", args.data_seed, args.synth_per_class, args.synth_hw)
    norm = (train_set.mean, train_set.std)
    eval_set = load_data(args.data, arch.n_classes, "test", args.data_seed, args.synth_per_class,
                         args.synth_hw, normalization=norm)
    augment = args.augment if args.augment is not None else args.data != "synth"
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
                      momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
                      augment=augment)
    net = build_network(arch, seed=args.seed, precision=args.precision)
    log.info("training %s (%d params, depth %d) on %d samples", arch.name or arch.block_type,
             net.count_params(), arch.depth, len(train_set))
    result = train(net, train_set, cfg, eval_set)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "history.csv"), "w", newline="") as fh:
        fh.write(_history_rows_csv(result.history))
    meta = {"normalization": {"mean": [float(v) for v in norm[0]], "std": [float(v) for v in norm[1]]},
            "data": args.data, "data_seed": args.data_seed, "synth_hw": args.synth_hw,
            "synth_per_class": args.synth_per_class}
    save_checkpoint(net, os.path.join(args.out_dir, "model.ckpt"), meta)
    if args.figure or not args.no_figure:
        from .plotting import plot_history
        if result.history:
            plot_history(result.history, args.figure or os.path.join(args.out_dir, "history.png"))
    if result.diverged:
        print(f"training aborted: {result.message}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_eval(args):
    from .data import load_checkpoint
    from .network import evaluate

    net = load_checkpoint(args.ckpt)
    meta = getattr(net, "meta", {})
    norm = meta.get("normalization")
    norm = (norm["mean"], norm["std"]) if norm else None
    data = load_data(args.data, net.arch.n_classes, args.split, args.data_seed,
                     args.synth_per_class or meta.get("synth_per_class", 30),
                     args.synth_hw or meta.get("synth_hw", 32), normalization=norm)
    acc = evaluate(net, data)
    with _output(args.out) as fh:
        fh.write(f"accuracy,{acc!r}\n")
    return EXIT_OK


# -- compose / tables --------------------------------------------------------

def cmd_compose(args):
    cfg = IgcConfig(args.l, args.m, args.k)
    params = init_igc_params(cfg, CounterRNG(args.seed, "compose"))
    factors = algebra.assemble_factors(cfg, params)
    kernel = algebra.composite_conv_kernel(factors)
    if args.kernel_out:
        if args.kernel_out.endswith(".npy"):
            np.save(args.kernel_out, kernel)
        else:
            np.savetxt(args.kernel_out, kernel.reshape(cfg.G, -1), delimiter=",", fmt="%.17g")
    l0p, l0d = algebra.l0_norm(factors.Wp), algebra.l0_norm(factors.Wd)
    with _output(args.out) as fh:
        _write_csv(fh, ["quantity", "value"], [
            {"quantity": "composite_shape", "value": "x".join(str(d) for d in kernel.shape)},
            {"quantity": "l0_primary", "value": l0p},
            {"quantity": "l0_secondary", "value": l0d},
            {"quantity": "l0_total", "value": l0p + l0d},
            {"quantity": "param_count", "value": budget.igc_param_count(cfg.L, cfg.M, cfg.S)},
        ])
    return EXIT_OK


def cmd_tables(args):
    with _output(args.out) as fh:
        fh.write(tables.all_tables_markdown())
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="igcnet", description="Interleaved group convolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="block or network parameter budgets")
    a.add_argument("--target", type=int)
    a.add_argument("--s", type=int, default=9, help="spatial kernel size k*k")
    a.add_argument("--block", choices=["igc", "gpc"], default="igc")
    a.add_argument("--tol", type=float, default=0.03)
    a.add_argument("--format", choices=["csv", "json"], default="csv")
    a.add_argument("--markdown", action="store_true")
    a.add_argument("--arch", help="preset name or ArchSpec JSON for a network budget")
    a.add_argument("--depth", type=int)
    a.add_argument("--input-hw", type=int, default=32)
    a.add_argument("--out")
    a.add_argument("--figure", help="write a width plot to this path")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="path form vs composed kernel, plus special cases")
    v.add_argument("--grid-max", type=int, default=4)
    v.add_argument("--grid", help="explicit comma-separated L/M values (overrides --grid-max)")
    v.add_argument("--ks", default="1,3")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--no-special", action="store_true")
    v.add_argument("--out")
    v.add_argument("--figure")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train a network and write history + checkpoint")
    t.add_argument("--arch", required=True)
    t.add_argument("--data", required=True, help="'synth' or a CIFAR binary directory")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--depth", type=int)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--precision", choices=["single", "double"], default="single")
    t.add_argument("--augment", dest="augment", action="store_true", default=None)
    t.add_argument("--no-augment", dest="augment", action="store_false")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--synth-per-class", type=int, default=30)
    t.add_argument("--synth-hw", type=int, default=32)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--figure")
    t.add_argument("--no-figure", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--synth-per-class", type=int)
    e.add_argument("--synth-hw", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compose", help="composite dense kernel of a random block")
    c.add_argument("--l", type=int, required=True)
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--k", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--kernel-out", default="composite_kernel.csv",
                   help="where to write the (G, G*k*k) kernel; .npy or CSV")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compose)

    tb = sub.add_parser("tables", help="markdown width and cost tables")
    tb.add_argument("--out")
    tb.set_defaults(func=cmd_tables)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _print_config(args)
    threads = os.environ.get("IGC_THREADS")
    limiter = contextlib.nullcontext()
    if threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(int(threads))
    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (FormatError, CheckpointError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IgcError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
