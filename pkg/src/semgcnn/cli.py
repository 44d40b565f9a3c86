"""Command-line entry point: ``semgcnn {synth,run,gradcheck,report}``.

Options may also come from a ``key = value`` file given with ``--config``;
command-line flags override file values. Exit codes: 0 success, 1 failed
jobs or checks, 2 usage or configuration errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dataio import SourceId, read_manifest
from .simulation import GeneratorConfig, GestureProtocol, export_dataset
from .training import TrainConfig

DATA_ENV = "SEMGCNN_DATA"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("semgcnn")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, args_list):
    """Two-pass parse: file values become defaults, flags override them."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(args_list)
    if known.config:
        values = read_config_file(known.config)
        actions = {a.dest: a for a in parser._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in actions or key in ("help", "config"):
                raise ConfigError(f"unknown config key {key!r}")
            defaults[key] = _coerce(actions[key], raw)
        parser.set_defaults(**defaults)
    return parser.parse_args(args_list)


def _coerce(action, raw):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"{action.dest}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    conv = action.type or str
    try:
        if action.nargs in ("+", "*"):
            return [conv(v) for v in raw.replace(",", " ").split()]
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{action.dest}: invalid value {raw!r}") from None


def derive_seeds(master):
    """Per-purpose seeds split deterministically from the master seed."""
    names = ("generator", "holdout", "training")
    states = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(s.generate_state(1)[0]) for n, s in zip(names, states)}


def provenance(args, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    record = {
        "command": args.command,
        "config": cfg,
        "config_file": getattr(args, "config", None),
        "versions": {"semgcnn": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if "seed" in cfg:
        record["seeds"] = derive_seeds(cfg["seed"])
    record.update(extra or {})
    return record


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_data_dir():
    return os.environ.get(DATA_ENV, "data")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out or default_data_dir())
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    seeds = derive_seeds(args.seed)
    gen = GeneratorConfig(fs=args.fs, n_postures=max(args.postures, 4), n_days=max(args.days, 8))
    protocol = GestureProtocol(args.repetitions, args.contraction_s, args.rest_s, force_level=args.force_level)
    sources = [SourceId(u, d, p) for u in range(1, args.subjects + 1)
               for d in range(1, args.days + 1) for p in range(1, args.postures + 1)]
    if args.extra_days:
        sources += [SourceId(u, d, p) for u in range(1, args.subjects + 1) for d in args.extra_days
                    for p in args.extra_postures if SourceId(u, d, p) not in sources]
    rows = export_dataset(sources, out, protocol, gen, args.pool_size, seeds["generator"])
    manifest_hash = sha256_file(out / "manifest.csv")
    write_json(out / "config.json", provenance(args, {"manifest_sha256": manifest_hash}))
    n_samples = sum(r["n_samples"] for r in rows)
    print(f"wrote {len(rows)} sessions to {out} ({n_samples} samples, manifest sha256 {manifest_hash[:16]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _specs(args):
    from .protocol import KINDS, StrategySpec

    kinds = KINDS if args.strategy == "all" else (args.strategy,)
    sel = dict(subjects=tuple(args.subjects) if args.subjects else None,
               days=tuple(args.days) if args.days else None,
               postures=tuple(args.postures) if args.postures else None)
    return [StrategySpec(k, **sel) for k in kinds]


def _train_config(args):
    return TrainConfig(lr=args.lr, n_minibatches=args.minibatches, epochs=args.epochs,
                       lr_step_size=args.lr_step, lr_gamma=args.lr_gamma,
                       weight_decay=args.weight_decay, decay_all_params=not args.decay_weights_only,
                       seed=0, dtype=args.dtype)


def cmd_run(args):
    from .protocol import Dataset, default_workers, execute, plan_jobs

    data = Path(args.data or default_data_dir())
    if not (data / "manifest.csv").exists():
        print(f"error: {data} has no manifest.csv", file=sys.stderr)
        return EXIT_USAGE
    try:
        specs = _specs(args)
        config = _train_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = read_manifest(data / "manifest.csv")
    available = [row["source"] for row in manifest]
    jobs = plan_jobs(available, specs)
    test_jobs = plan_jobs(available, specs, folds=("both",)) if args.test else []
    if args.dry_run:
        for inst, fold in jobs + test_jobs:
            print(f"{inst.strategy}\t{inst.id}\tfold={fold}\ttargets={len(inst.targets)}")
        print(f"{len(jobs) + len(test_jobs)} planned jobs")
        return EXIT_OK
    if not jobs:
        print("error: the selection matches no strategy instance in this dataset", file=sys.stderr)
        return EXIT_USAGE

    seeds = derive_seeds(args.seed)
    needed = set()
    for inst, _ in jobs:
        needed.update(inst.train_sources)
        needed.update(t.source for t in inst.targets)
    dataset = Dataset.from_directory(data, split_seed=seeds["holdout"], sources=needed)
    workers = args.jobs or default_workers()
    results = execute(dataset, jobs, config, seeds["training"], workers, curves=not args.no_curves)
    if test_jobs:
        results += execute(dataset, test_jobs, config, seeds["training"], workers, curves=False)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    failures = write_run_outputs(out, results)
    write_json(out / "config.json", provenance(args, {
        "resolved_train_config": config.to_dict(),
        "data_dir": str(data),
        "manifest_sha256": sha256_file(data / "manifest.csv"),
        "n_jobs": len(results),
        "n_failed": failures,
    }))
    print(f"{len(results) - failures}/{len(results)} jobs succeeded; outputs in {out}")
    print(render_report(out))
    return EXIT_FAILED if failures else EXIT_OK


def write_run_outputs(out, results):
    import csv

    from .protocol import write_cells

    cells = [c for r in results for c in r.cells]
    write_cells(cells, out / "cells.csv")
    curve_dir = out / "curves"
    for r in results:
        if r.curve is not None and len(r.curve):
            curve_dir.mkdir(exist_ok=True)
            r.curve.to_csv(curve_dir / f"{r.strategy}_{r.instance}_fold{r.fold}.csv")
    failed = [r for r in results if r.error]
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "instance", "fold", "error"])
        for r in failed:
            w.writerow([r.strategy, r.instance, r.fold, r.error])
    write_tables(out, cells)
    return len(failed)


def write_tables(out, cells):
    """Per-strategy tables, grouped aggregates and paired comparisons."""
    import csv

    from .protocol import compare, select, strategy_table, write_table
    from .stats import aggregate

    out = Path(out)
    for strategy in sorted({c.strategy for c in cells}):
        sub = select(cells, strategy=strategy, fold={"1", "2"})
        for kind in ("inter-posture", "inter-day"):
            if any(c.eval_kind == kind for c in sub):
                write_table(strategy_table(sub, kind), out / f"table_{strategy}_{kind}.csv")
        test = select(cells, strategy=strategy, fold="both")
        if test:
            with open(out / f"test_{strategy}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["eval_kind", "mu_se", "sigma", "n"])
                for (kind,), st in aggregate(test, "eval_kind").items():
                    w.writerow([kind, st.pm(), "" if not st.available else f"{100 * st.std:.1f}", st.n])
    with open(out / "aggregates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "eval_kind", "group_by", "group", "mean", "std", "se", "n"])
        for group_by in ("subject", "day", "posture"):
            for (strategy, kind, g), st in aggregate(cells, ("strategy", "eval_kind", group_by)).items():
                w.writerow([strategy, kind, group_by, g, repr(st.mean), repr(st.std), repr(st.se), st.n])
    rows = []
    val = select(cells, fold={"1", "2"})
    two_day = select(val, strategy="two-day", eval_kind="inter-day")
    five = select(val, strategy="five-day", eval_kind="inter-day")
    for label in sorted({c.train_set for c in two_day}):
        rows.append(_comparison_row("five-day", label, five, select(two_day, train_set=label), "inter-day", compare))
    two_posture = select(val, strategy="two-posture", eval_kind="inter-posture")
    single_p1 = select(val, strategy="single-session", eval_kind="inter-posture", instance=lambda i: i.endswith("P1"))
    if two_posture and single_p1:
        rows.append(_comparison_row("two-posture", "single-session P1", two_posture, single_p1, "inter-posture",
                                    compare, key=("subject", "day", "fold", "target")))
    with open(out / "comparisons.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "eval_kind", "n_pairs", "mean_a", "mean_b", "p_value"])
        for row in rows:
            if row:
                w.writerow(row)


def _comparison_row(a_name, b_name, a, b, kind, compare, key=("subject", "fold", "target")):
    try:
        res = compare(a, b, kind, key)
    except ValueError as exc:
        logger.warning("comparison %s vs %s skipped: %s", a_name, b_name, exc)
        return None
    return [a_name, b_name, kind, res["n"], repr(res["mean_a"]), repr(res["mean_b"]), repr(res["p_value"])]


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    from .nn import build_network, grad_check

    rng = np.random.default_rng(args.seed)
    net = build_network(seed=args.seed, dtype=np.float64)
    x = rng.standard_normal((args.batch, net.spec.in_channels, net.spec.window_length))
    y = rng.integers(0, net.spec.n_classes, args.batch)
    only = args.layer or None
    if only:
        names = {name for name, _ in net.named_params()}
        unknown = [p for p in only if not any(n.startswith(p) for n in names)]
        if unknown:
            print(f"error: no parameters match {', '.join(unknown)}", file=sys.stderr)
            return EXIT_USAGE
    res = grad_check(net, x, y, h=args.h, samples_per_tensor=args.samples, seed=args.seed, only=only)
    for name, err in res.errors.items():
        print(f"{name:24s} {err:.3e}")
    for name, (a, n) in res.structural_zero.items():
        print(f"{name:24s} structural zero (|analytic| {a:.1e}, |numeric| {n:.1e})")
    ok = res.passed(args.tol)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} entries "
          f"({res.n_kink_skipped} skipped at ReLU kinks): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILED


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def render_report(out):
    from .protocol import read_cells, select, strategy_table

    cells = read_cells(Path(out) / "cells.csv")
    lines = []
    for strategy in sorted({c.strategy for c in cells}):
        sub = select(cells, strategy=strategy, fold={"1", "2"})
        for kind in ("inter-posture", "inter-day"):
            rows = strategy_table(sub, kind) if any(c.eval_kind == kind for c in sub) else []
            if not rows:
                continue
            lines.append(f"{strategy} ({kind})")
            lines.append(f"  {'train set':12s} {'intra':>16s} {'inter':>16s} {'drop':>7s}")
            for r in rows:
                intra = r["intra"].pm() if r["intra"] else "-"
                inter = r["inter"].pm() if r["inter"] else "-"
                drop = f"{100 * r['drop'].mean:.1f}%" if r["drop"] else "-"
                lines.append(f"  {r['train_set']:12s} {intra:>16s} {inter:>16s} {drop:>7s}")
    return "\n".join(lines)


def cmd_report(args):
    out = Path(args.results)
    if not (out / "cells.csv").exists():
        print(f"error: {out} has no cells.csv", file=sys.stderr)
        return EXIT_USAGE
    from .protocol import read_cells

    write_tables(out, read_cells(out / "cells.csv"))
    print(render_report(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="semgcnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"semgcnn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-source dataset")
    s.add_argument("--config")
    s.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./data)")
    s.add_argument("--subjects", type=int, default=7)
    s.add_argument("--days", type=int, default=8)
    s.add_argument("--postures", type=int, default=4)
    s.add_argument("--extra-days", type=int, nargs="*", default=[],
                   help="additional days recorded only for --extra-postures")
    s.add_argument("--extra-postures", type=int, nargs="*", default=[1])
    s.add_argument("--repetitions", type=int, default=10)
    s.add_argument("--contraction-s", type=float, default=3.0)
    s.add_argument("--rest-s", type=float, default=3.0)
    s.add_argument("--force-level", type=float, default=1.0)
    s.add_argument("--fs", type=float, default=500.0)
    s.add_argument("--pool-size", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="train and evaluate training strategies")
    r.add_argument("--config")
    r.add_argument("--data", help=f"dataset directory (default ${DATA_ENV} or ./data)")
    r.add_argument("--out", default="results")
    r.add_argument("--strategy", default="single-session",
                   choices=["single-session", "two-posture", "two-day", "five-day", "all"])
    r.add_argument("--subjects", type=int, nargs="*")
    r.add_argument("--days", type=int, nargs="*", help="restrict training days (selector)")
    r.add_argument("--postures", type=int, nargs="*", help="restrict training postures (selector)")
    r.add_argument("--lr", type=float, default=0.001)
    r.add_argument("--minibatches", type=int, default=50)
    r.add_argument("--epochs", type=int, default=20)
    r.add_argument("--lr-step", type=int, default=19)
    r.add_argument("--lr-gamma", type=float, default=0.1)
    r.add_argument("--weight-decay", type=float, default=0.1)
    r.add_argument("--decay-weights-only", action="store_true")
    r.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--jobs", type=int, default=0, help="worker processes (default: available cores)")
    r.add_argument("--test", action="store_true", help="also retrain on both folds and score holdouts")
    r.add_argument("--dry-run", action="store_true")
    r.add_argument("--no-curves", action="store_true", help="skip per-epoch validation passes")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    g.add_argument("--config")
    g.add_argument("--layer", nargs="*", help="parameter name prefixes, e.g. conv1 fc2")
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--samples", type=int, default=12, help="entries checked per tensor")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="rebuild tables from a results directory")
    rep.add_argument("--config")
    rep.add_argument("results", nargs="?", default="results")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # config files belong to a subcommand; resolve that subparser first
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            subparser = parser._subparsers._group_actions[0].choices[args.command]
            sub_args = _apply_config(subparser, argv[argv.index(args.command) + 1:])
            for k, v in vars(sub_args).items():
                setattr(args, k, v)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
