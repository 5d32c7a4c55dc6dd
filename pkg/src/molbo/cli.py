"""Command-line entry point: ``molbo {fingerprint,run,random,eval}``.

Exit codes: 0 on success, 1 if any campaign aborted, 2 on input errors.
"""

import argparse
import csv
import glob
import os
import re
import sys

import numpy as np

from . import __version__
from .chem import SmilesError, morgan_fingerprint, parse_smiles
from .config import PRESETS, parse_overrides, read_config, resolve
from .loop import (ConfigError, aggregate_traces, default_threads, read_trace_csv, replay,
                   run_replicates, write_outputs)
from .pool import FeatureFileError, PoolError, load_features, load_pool, write_mbof

TOY_POOL = "@toy"
INPUT_ERRORS = (ConfigError, PoolError, FeatureFileError, SmilesError, OSError, ValueError)


def toy_pool_path():
    return os.path.join(os.path.dirname(__file__), "data", "toy_pool.csv")


def _pool_path(path):
    return toy_pool_path() if path == TOY_POOL else path


def _threads(value):
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_fingerprint(args):
    pool = load_pool(_pool_path(args.pool), args.directions)
    rows = np.zeros((pool.n, args.width), dtype=np.float32)
    for r, (cid, smi) in enumerate(zip(pool.ids, pool.smiles)):
        try:
            fp = morgan_fingerprint(parse_smiles(smi), args.radius, args.width)
        except SmilesError as exc:
            raise PoolError(f"candidate {cid!r}: {exc}") from exc
        rows[r] = fp.to_array()
    write_mbof(args.output, rows)
    print(f"wrote {pool.n} x {args.width} fingerprints to {args.output}")
    return 0


def _settings(args):
    file_values = read_config(args.config) if args.config else {}
    overrides = parse_overrides(args.set)
    for key, value in (("pool", args.pool), ("features", args.features),
                       ("seeds", args.seeds), ("out_dir", args.out_dir), ("T", args.T),
                       ("m", args.m)):
        if value is not None:
            overrides[key] = value
    if args.directions:
        overrides["directions"] = args.directions.split(",")
    return resolve(args.preset, file_values, overrides)


def _load(settings):
    if not settings.pool:
        raise ConfigError("no pool given (use --pool PATH, or --pool @toy for the bundled pool)")
    pool = load_pool(_pool_path(settings.pool), settings.directions)
    if settings.features:
        load_features(settings.features, pool)
    settings.campaign.validate(pool)
    return pool


def _campaign(args, random_search):
    settings = _settings(args)
    pool = _load(settings)
    label = settings.label or ("random" if random_search else settings.campaign.surrogate)
    result = run_replicates(pool, settings.campaign, settings.seeds, threads=args.threads,
                            random_search=random_search, label=label)
    write_outputs(settings.out_dir, result, pool, settings.echo())
    for seed, t, cause in result.failed:
        print(f"seed {seed} aborted at iteration {t}: {cause}", file=sys.stderr)
    done = result.completed()
    if done:
        gap = result.aggregate["gap_mean"][-1]
        print(f"{label}: {len(done)}/{len(result.traces)} seeds complete, "
              f"final mean GAP {gap:.4f}; outputs in {settings.out_dir}")
    return 1 if result.failed else 0


def cmd_run(args):
    return _campaign(args, random_search=False)


def cmd_random(args):
    return _campaign(args, random_search=True)


_SEED_FILE = re.compile(r"^(?P<label>.+)_seed(?P<seed>-?\d+)\.csv$")


def _group_traces(paths):
    groups = {}
    for path in paths:
        m = _SEED_FILE.match(os.path.basename(path))
        label, seed = (m.group("label"), int(m.group("seed"))) if m else \
            (os.path.splitext(os.path.basename(path))[0], 0)
        groups.setdefault(label, []).append((seed, path))
    return groups


def cmd_eval(args):
    pool = load_pool(_pool_path(args.pool), args.directions)
    paths = []
    for pattern in args.traces:
        hits = sorted(glob.glob(pattern))
        if not hits:
            raise ConfigError(f"no trace files match {pattern!r}")
        paths.extend(hits)
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for label, items in sorted(_group_traces(paths).items()):
        traces = []
        for seed, path in sorted(items):
            traces.append(replay(pool, read_trace_csv(path, pool), seed=seed, label=label))
        lengths = {len(t.records) for t in traces}
        if len(lengths) != 1:
            raise ConfigError(f"{label}: traces have different lengths {sorted(lengths)}")
        agg = aggregate_traces(traces, pool, args.baseline)
        out = os.path.join(args.out_dir, f"{label}_curves.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["t", "n_seeds", "gap_mean", "gap_se", "incumbent_mean", "incumbent_se"]
            multi = "hypervolume_mean" in agg
            if multi:
                head += ["hypervolume_mean", "hypervolume_se"]
            w.writerow(head)
            for t in range(len(agg["gap_mean"])):
                row = [t, len(traces), agg["gap_mean"][t], agg["gap_se"][t],
                       agg["incumbent_mean"][t], agg["incumbent_se"][t]]
                if multi:
                    row += [agg["hypervolume_mean"][t], agg["hypervolume_se"][t]]
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
        written.append(out)
        print(f"{label}: {len(traces)} traces, final mean GAP {agg['gap_mean'][-1]:.4f} -> {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _campaign_args(p):
    p.add_argument("--config", help="flat key = value file, or a summary JSON to replay")
    p.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--pool", help=f"pool CSV (id,smiles,objectives...); {TOY_POOL} for the bundled pool")
    p.add_argument("--features", help="MBOF feature file aligned with the pool rows")
    p.add_argument("--directions", help="comma list of maximize/minimize per objective")
    p.add_argument("--seeds", type=int, help="number of seeds (starting at seed_start)")
    p.add_argument("--T", type=int, help="iteration budget")
    p.add_argument("--m", type=int, help="initial design size")
    p.add_argument("--out-dir", dest="out_dir", help="directory for traces and summary")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="molbo", description="Pool-based Bayesian optimization.")
    parser.add_argument("--version", action="version", version=f"molbo {__version__}")
    parser.add_argument("--threads", type=_threads, default=None,
                        help="worker threads (default: $MOLBO_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fingerprint", help="write Morgan fingerprints of a pool as MBOF")
    p.add_argument("pool")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--directions")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("run", help="surrogate-driven campaigns over several seeds")
    _campaign_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("random", help="random-search baseline with the same trace schema")
    _campaign_args(p)
    p.set_defaults(func=cmd_random)

    p = sub.add_parser("eval", help="GAP (and hypervolume) curves from trace CSVs")
    p.add_argument("traces", nargs="+", help="trace CSV files or glob patterns")
    p.add_argument("--pool", required=True)
    p.add_argument("--directions")
    p.add_argument("--baseline", choices=("best", "first"), default="best")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "directions", None) and args.command in ("fingerprint", "eval"):
        args.directions = args.directions.split(",")
    try:
        if args.threads is None:
            args.threads = default_threads()
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"molbo {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
