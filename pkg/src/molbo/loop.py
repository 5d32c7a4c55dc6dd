"""Campaign driver: initial design, refit, acquire, observe, repeat.

Every surrogate is refit from scratch at every iteration. Representations
are computed once per campaign (fingerprints, feature rows or raw strings)
and only sliced afterwards. A surrogate failure aborts the campaign and the
partial trace is returned with the failing iteration recorded.

Seeding: the initial design draws from ``SeedSequence([seed, 0])`` and
iteration ``t`` derives its fit and acquisition streams from
``SeedSequence([seed, t])``, so surrogate and random campaigns with the same
seed share the same initial design.
"""

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from . import acquisition, metrics
from .chem import SmilesError, morgan_fingerprint, pack_fingerprints, parse_smiles
from .pool import ObservationSet, PoolError, sample_initial
from .posterior import PosteriorPredictive

SURROGATES = ("gp", "laplace_mlp", "lora_transformer")
ACQUISITIONS = ("ts", "ei", "ucb")
REPRESENTATIONS = ("fingerprints", "features", "strings")
SCORE_CHUNK = 256

SURROGATE_DEFAULTS = {
    "gp": {"kernel": "matern52", "lr": 0.01, "steps": 500, "standardize": True},
    "laplace_mlp": {
        "hidden": (50, 50), "activation": "relu", "structure": "kfac", "per_layer": False,
        "tune_noise": "auto", "prior_prec": 1.0, "noise_var": 0.1, "tune_steps": 100,
        "lr": 1e-3, "epochs": 500, "batch_size": 20, "weight_decay": 5e-4,
        "gn_refine_steps": 0, "standardize": True,
    },
    "lora_transformer": {
        "rank": 4, "alpha": 16.0, "dropout": 0.1, "targets": ("k", "v"),
        "lr_adapter": 3e-4, "lr_head": 1e-3, "weight_decay": 0.01, "epochs": 50,
        "head_epochs": 100, "batch_size": 16, "tune_steps": 200, "tune_noise": False,
        "prior_prec": 1.0, "noise_var": 0.1, "warm_start": False, "base_weights": None,
        "base_seed": 0, "dim": 32, "heads": 2, "head_dim": 16, "blocks": 2, "max_len": 64,
        "standardize": True,
    },
}


class ConfigError(ValueError):
    pass


def default_threads():
    raw = os.environ.get("MOLBO_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MOLBO_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"MOLBO_THREADS must be a positive integer, got {raw!r}")
    return value


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class CampaignConfig:
    surrogate: str = "gp"
    options: dict = field(default_factory=dict)
    representation: str = "fingerprints"
    acquisition: str = "ts"
    beta: float = 2.0
    T: int = 30
    m: int = 10
    seed: int = 0
    fp_radius: int = 2
    fp_width: int = 1024
    gap_baseline: str = "best"
    wall_time: bool = True

    def resolved_options(self):
        if self.surrogate not in SURROGATES:
            raise ConfigError(f"unknown surrogate {self.surrogate!r}; valid: {', '.join(SURROGATES)}")
        defaults = SURROGATE_DEFAULTS[self.surrogate]
        unknown = sorted(set(self.options) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown option(s) for {self.surrogate}: {', '.join(unknown)}; "
                              f"valid: {', '.join(sorted(defaults))}")
        return {**defaults, **self.options}

    def validate(self, pool=None):
        opts = self.resolved_options()
        if self.acquisition not in ACQUISITIONS:
            raise ConfigError(f"unknown acquisition {self.acquisition!r}; valid: {', '.join(ACQUISITIONS)}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"unknown representation {self.representation!r}; "
                              f"valid: {', '.join(REPRESENTATIONS)}")
        if self.gap_baseline not in ("best", "first"):
            raise ConfigError("gap baseline must be 'best' or 'first'")
        if self.T < 0 or self.m < 1:
            raise ConfigError("need T >= 0 and m >= 1")
        if self.beta < 0:
            raise ConfigError("ucb beta must be non-negative")
        if self.surrogate == "gp":
            if opts["kernel"] not in ("tanimoto", "matern52"):
                raise ConfigError(f"unknown kernel {opts['kernel']!r}; valid: tanimoto, matern52")
            if opts["kernel"] == "tanimoto" and self.representation != "fingerprints":
                raise ConfigError("the tanimoto kernel needs fingerprints, not dense features")
        if self.surrogate == "lora_transformer" and self.representation != "strings":
            raise ConfigError("lora_transformer consumes raw strings (representation=strings)")
        if self.surrogate != "lora_transformer" and self.representation == "strings":
            raise ConfigError(f"{self.surrogate} cannot consume raw strings")
        if self.surrogate == "laplace_mlp" and opts["activation"] not in ("relu", "tanh"):
            raise ConfigError("activation must be relu or tanh")
        if pool is not None:
            if self.m + self.T > pool.n:
                raise ConfigError(f"m + T = {self.m + self.T} exceeds the pool size {pool.n}")
            if pool.n_objectives > 1 and self.acquisition != "ts":
                raise ConfigError("multiobjective campaigns support scalarized ts only")
            if self.representation == "features" and pool.features is None:
                raise ConfigError("representation=features but no feature file is attached")
        return opts

    def to_dict(self):
        d = asdict(self)
        d["options"] = {k: list(v) if isinstance(v, tuple) else v
                        for k, v in self.resolved_options().items()}
        return d


# --------------------------------------------------------------------------
# surrogates and inputs
# --------------------------------------------------------------------------


def build_surrogate(config):
    opts = config.resolved_options()
    if config.surrogate == "gp":
        from .gp import GPSurrogate
        s = GPSurrogate(opts["kernel"], opts["standardize"], opts["lr"], opts["steps"])
        s.joint = True
        return s
    if config.surrogate == "laplace_mlp":
        from .laplace import LaplaceSurrogate, TrainConfig
        train = TrainConfig(lr=opts["lr"], epochs=opts["epochs"], batch_size=opts["batch_size"],
                            weight_decay=opts["weight_decay"],
                            gn_refine_steps=opts["gn_refine_steps"])
        return LaplaceSurrogate(tuple(opts["hidden"]), opts["activation"], opts["structure"],
                                opts["per_layer"], opts["tune_noise"], opts["prior_prec"],
                                opts["noise_var"], opts["tune_steps"], train, opts["standardize"])
    from .lora import (AdapterConfig, LoraSurrogate, PeftTrainConfig, TransformerConfig,
                       init_base_weights, load_weights)
    tcfg = TransformerConfig(dim=opts["dim"], heads=opts["heads"], head_dim=opts["head_dim"],
                             blocks=opts["blocks"], max_len=opts["max_len"])
    acfg = AdapterConfig(rank=opts["rank"], alpha=opts["alpha"], dropout=opts["dropout"],
                         targets=tuple(opts["targets"]))
    train = PeftTrainConfig(batch_size=opts["batch_size"], lr_adapter=opts["lr_adapter"],
                            lr_head=opts["lr_head"], weight_decay=opts["weight_decay"],
                            epochs=opts["epochs"], head_epochs=opts["head_epochs"])
    if opts["base_weights"] == "@toy":
        weights = load_weights(os.path.join(os.path.dirname(__file__), "data", "toy_base.mbot"))
    elif opts["base_weights"]:
        weights = load_weights(opts["base_weights"])
    else:
        weights = init_base_weights(tcfg, opts["base_seed"])
    s = LoraSurrogate(weights, tcfg, acfg, train, opts["noise_var"], opts["prior_prec"],
                      opts["tune_steps"], opts["tune_noise"], opts["standardize"],
                      opts["warm_start"])
    s.joint = False
    return s


def prepare_inputs(pool, config):
    """Per-campaign representation of every candidate, computed once."""
    if config.representation == "strings":
        return list(pool.smiles)
    if config.representation == "features":
        return pool.features.values
    fps = []
    for cid, smi in zip(pool.ids, pool.smiles):
        try:
            fps.append(morgan_fingerprint(parse_smiles(smi), config.fp_radius, config.fp_width))
        except SmilesError as exc:
            raise PoolError(f"candidate {cid!r}: {exc}") from exc
    return pack_fingerprints(fps)


def _take(inputs, rows):
    if isinstance(inputs, list):
        return [inputs[i] for i in rows]
    return inputs[rows]


def score_candidates(surrogate, inputs, rows, workers=1):
    """Posterior over ``rows``; marginal scoring fans out over fixed-size chunks."""
    if getattr(surrogate, "joint", False):
        return surrogate.predict(_take(inputs, rows), full_cov=True)
    chunks = [rows[i:i + SCORE_CHUNK] for i in range(0, len(rows), SCORE_CHUNK)]

    def run(chunk):
        return surrogate.predict(_take(inputs, chunk), full_cov=False)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return PosteriorPredictive(np.vstack([p.means for p in parts]),
                               np.vstack([p.variances for p in parts]), None)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------


@dataclass
class IterationRecord:
    t: int
    index: int
    id: str
    values: np.ndarray  # internal maximization convention
    incumbent: float
    wall_ms: float = 0.0
    digest: str = ""
    hypervolume: float = None


@dataclass
class CampaignTrace:
    """Initial design rows (t=0) followed by one record per iteration."""

    seed: int
    label: str
    initial: list
    records: list
    T: int
    failure: str = None
    failed_at: int = None

    @property
    def complete(self):
        return self.failure is None and len(self.records) == self.T

    def rows(self):
        return self.initial + self.records

    def chosen(self):
        return [r.index for r in self.records]

    def incumbents(self):
        """Incumbent after the initial design, then after every iteration."""
        return np.array([self.initial[-1].incumbent] + [r.incumbent for r in self.records])

    def best_row(self):
        rows = self.rows()
        return max(rows, key=lambda r: (_scalar(r.values), -rows.index(r)))


def _scalar(values):
    """Single-objective value, or the uniform scalarization of several."""
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean(axis=-1)) if values.ndim else float(values)


def scalar_optimum(pool):
    return float(pool.objectives.mean(axis=1).max())


def _digest(scores):
    return hashlib.sha256(np.ascontiguousarray(scores, dtype=np.float64).tobytes()).hexdigest()[:16]


def _initial_records(pool, obs, ref):
    records, best = [], -np.inf
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        best = max(best, _scalar(y))
        hv = None
        if ref is not None:
            hv = metrics.hypervolume(np.array(obs.values[:k + 1]), ref)
        records.append(IterationRecord(0, int(idx), pool.ids[idx], np.array(y), best, 0.0, "", hv))
    return records


def _acquire(config, post, obs, seed):
    if post.n_outputs > 1:
        return acquisition.scalarized_thompson(post, seed)
    if config.acquisition == "ts":
        return acquisition.thompson_sample(post, seed)
    if config.acquisition == "ei":
        return acquisition.expected_improvement(post, float(np.max(obs.y()[:, 0])))
    return acquisition.ucb(post, config.beta)


def _iteration_seeds(seed, t):
    ss = np.random.SeedSequence([seed, t])
    fit, acq = ss.spawn(2)
    return int(fit.generate_state(1)[0]), acq


def _design(pool, config):
    ss = np.random.SeedSequence([config.seed, 0])
    return sample_initial(pool, config.m, np.random.default_rng(ss))


def run_campaign(pool, config, surrogate=None, inputs=None, workers=1, label=None,
                 on_iteration=None):
    """Surrogate-driven campaign on a fresh copy of ``pool``.

    ``on_iteration(t, pool, obs)`` is called after the initial design (t=0)
    and after every observation; it sees the live pool and data set.
    """
    config.validate(pool)
    pool = pool.fresh()
    surrogate = surrogate if surrogate is not None else build_surrogate(config)
    inputs = inputs if inputs is not None else prepare_inputs(pool, config)
    ref = metrics.reference_point(pool.objectives) if pool.n_objectives > 1 else None
    obs = _design(pool, config)
    trace = CampaignTrace(config.seed, label or config.surrogate, _initial_records(pool, obs, ref),
                          [], config.T)
    incumbent = trace.initial[-1].incumbent
    if on_iteration is not None:
        on_iteration(0, pool, obs)
    for t in range(1, config.T + 1):
        start = time.perf_counter()
        fit_seed, acq_seed = _iteration_seeds(config.seed, t)
        rows = pool.remaining()
        try:
            surrogate.fit(_take(inputs, obs.indices), obs.y(), seed=fit_seed)
            post = score_candidates(surrogate, inputs, rows, workers)
            choice = _acquire(config, post, obs, np.random.default_rng(acq_seed))
        except Exception as exc:  # abort with the partial trace
            trace.failure = f"{type(exc).__name__}: {exc}"
            trace.failed_at = t
            return trace
        idx = int(rows[choice.index])
        pool.remove(idx)
        y = pool.observe(idx)
        obs.add(idx, y)
        incumbent = max(incumbent, _scalar(y))
        hv = metrics.hypervolume(obs.y(), ref) if ref is not None else None
        wall = (time.perf_counter() - start) * 1e3 if config.wall_time else 0.0
        trace.records.append(IterationRecord(t, idx, pool.ids[idx], y, incumbent, wall,
                                             _digest(choice.scores), hv))
        if on_iteration is not None:
            on_iteration(t, pool, obs)
    return trace


def run_random_search(pool, config, label="random", on_iteration=None):
    """Uniform selection without replacement, same schema and initial design."""
    if config.m + config.T > pool.n:
        raise ConfigError(f"m + T = {config.m + config.T} exceeds the pool size {pool.n}")
    pool = pool.fresh()
    ref = metrics.reference_point(pool.objectives) if pool.n_objectives > 1 else None
    obs = _design(pool, config)
    trace = CampaignTrace(config.seed, label, _initial_records(pool, obs, ref), [], config.T)
    incumbent = trace.initial[-1].incumbent
    if on_iteration is not None:
        on_iteration(0, pool, obs)
    for t in range(1, config.T + 1):
        start = time.perf_counter()
        _, acq_seed = _iteration_seeds(config.seed, t)
        rows = pool.remaining()
        idx = int(rows[np.random.default_rng(acq_seed).integers(len(rows))])
        pool.remove(idx)
        y = pool.observe(idx)
        obs.add(idx, y)
        incumbent = max(incumbent, _scalar(y))
        hv = metrics.hypervolume(obs.y(), ref) if ref is not None else None
        wall = (time.perf_counter() - start) * 1e3 if config.wall_time else 0.0
        trace.records.append(IterationRecord(t, idx, pool.ids[idx], y, incumbent, wall, "", hv))
        if on_iteration is not None:
            on_iteration(t, pool, obs)
    return trace


# --------------------------------------------------------------------------
# replicates
# --------------------------------------------------------------------------


def trace_gap(trace, pool, baseline="best"):
    y0 = trace.initial[-1].incumbent if baseline == "best" else _scalar(trace.initial[0].values)
    return metrics.gap(trace.incumbents(), scalar_optimum(pool), y0)


def _mean_se(rows):
    arr = np.asarray(rows, dtype=np.float64)
    mean = arr.mean(axis=0)
    se = arr.std(axis=0, ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else np.zeros_like(mean)
    # columns where all seeds agree are exact (summation rounding aside)
    same = np.ptp(arr, axis=0) == 0
    mean = np.where(same, arr[0], mean)
    se = np.where(same, 0.0, se)
    return mean, se


@dataclass
class ReplicateResult:
    label: str
    traces: list
    failed: list
    aggregate: dict

    def completed(self):
        return [t for t in self.traces if t.complete]


def aggregate_traces(traces, pool, baseline="best"):
    done = [t for t in traces if t.complete]
    if not done:
        return {}
    out = {}
    out["incumbent_mean"], out["incumbent_se"] = _mean_se([t.incumbents() for t in done])
    out["gap_mean"], out["gap_se"] = _mean_se([trace_gap(t, pool, baseline) for t in done])
    if pool.n_objectives > 1:
        hv = [[t.initial[-1].hypervolume] + [r.hypervolume for r in t.records] for t in done]
        out["hypervolume_mean"], out["hypervolume_se"] = _mean_se(hv)
    return out


def run_replicates(pool, config, seeds, threads=None, random_search=False, label=None,
                   on_iteration=None):
    """Independent campaigns over ``seeds``; failures are flagged, not fatal.

    ``on_iteration``, if given, is called as ``on_iteration(seed, t, pool, obs)``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    threads = default_threads() if threads is None else threads
    if not random_search:
        config.validate(pool)
        inputs = prepare_inputs(pool, config)
    label = label or ("random" if random_search else config.surrogate)

    def one(seed):
        cfg = _with_seed(config, seed)
        hook = None if on_iteration is None else partial(on_iteration, seed)
        if random_search:
            return run_random_search(pool, cfg, label, on_iteration=hook)
        return run_campaign(pool, cfg, inputs=inputs, label=label, on_iteration=hook)

    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            traces = list(ex.map(one, seeds))
    else:
        traces = [one(s) for s in seeds]
    failed = [(t.seed, t.failed_at, t.failure) for t in traces if not t.complete]
    return ReplicateResult(label, traces, failed, aggregate_traces(traces, pool, config.gap_baseline))


def _with_seed(config, seed):
    d = dict(config.__dict__)
    d["seed"] = int(seed)
    return CampaignConfig(**d)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def trace_header(pool):
    head = ["t", "id"] + list(pool.objective_names) + ["incumbent", "wall_ms"]
    if pool.n_objectives > 1:
        head.append("hypervolume")
    return head + ["scores_digest"]


def write_trace_csv(path, trace, pool):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(pool))
        for r in trace.rows():
            row = [r.t, r.id] + [repr(float(v)) for v in pool.reported(r.values)]
            row += [repr(float(r.incumbent)), f"{r.wall_ms:.3f}"]
            if pool.n_objectives > 1:
                row.append(repr(float(r.hypervolume)))
            w.writerow(row + [r.digest])


def read_trace_csv(path, pool):
    """Rows as (t, id); values are re-read from the pool, never trusted from the file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["t", "id"]:
        raise ConfigError(f"{path}: not a trace file")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        cid = row[1]
        if cid not in pool._index:
            raise ConfigError(f"{path}:{line}: id {cid!r} is not in the pool")
        out.append((int(row[0]), pool.index_of(cid)))
    return out


def replay(pool, rows, seed=0, T=None, label="replay"):
    """Rebuild a trace from (t, index) pairs using tabulated values only."""
    ref = metrics.reference_point(pool.objectives) if pool.n_objectives > 1 else None
    obs = ObservationSet()
    initial, records, best = [], [], -np.inf
    seen = set()
    for t, idx in rows:
        if idx in seen:
            raise ConfigError(f"id {pool.ids[idx]!r} appears twice in the trace")
        seen.add(idx)
        y = pool.observe(idx)
        obs.add(idx, y)
        best = max(best, _scalar(y))
        hv = metrics.hypervolume(obs.y(), ref) if ref is not None else None
        rec = IterationRecord(t, idx, pool.ids[idx], y, best, 0.0, "", hv)
        (initial if t == 0 else records).append(rec)
    if not initial:
        raise ConfigError("trace has no initial-design rows (t=0)")
    return CampaignTrace(seed, label, initial, records, len(records) if T is None else T)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def write_outputs(out_dir, result, pool, config_echo):
    """Per-seed trace CSVs plus ``summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for trace in result.traces:
        path = os.path.join(out_dir, f"{result.label}_seed{trace.seed}.csv")
        write_trace_csv(path, trace, pool)
        paths.append(path)
    finals = []
    for trace in result.traces:
        best = trace.best_row()
        finals.append({"seed": trace.seed, "id": best.id,
                       "values": pool.reported(best.values).tolist(),
                       "complete": trace.complete, "failure": trace.failure,
                       "failed_at": trace.failed_at})
    summary = {
        "label": result.label,
        "config": config_echo,
        "objectives": pool.objective_names,
        "directions": pool.directions,
        "pool_optimum": scalar_optimum(pool),
        "reference_point": (metrics.reference_point(pool.objectives).tolist()
                            if pool.n_objectives > 1 else None),
        "final": finals,
        "failed": [{"seed": s, "iteration": t, "cause": c} for s, t, c in result.failed],
        "aggregate": _jsonable(result.aggregate),
        "traces": [os.path.basename(p) for p in paths],
    }
    with open(os.path.join(out_dir, f"{result.label}_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
