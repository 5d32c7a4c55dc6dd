import os

import numpy as np
import pytest

from molbo.loop import (
    CampaignConfig,
    ConfigError,
    _design,
    aggregate_traces,
    read_trace_csv,
    replay,
    run_campaign,
    run_random_search,
    run_replicates,
    trace_gap,
    write_outputs,
    write_trace_csv,
)
from molbo.pool import load_pool
from molbo.posterior import PosteriorPredictive
from molbo.synthetic import feature_pool, string_pool

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "molbo", "data")
FAST_GP = {"kernel": "matern52", "steps": 30}


@pytest.fixture(scope="module")
def fpool():
    return feature_pool(n=60, d=4, seed=1)


def gp_config(**kw):
    base = dict(surrogate="gp", options=dict(FAST_GP), representation="features", T=5, m=5)
    base.update(kw)
    return CampaignConfig(**base)


class PartitionChecker:
    """on_iteration hook asserting the data/remaining partition."""

    def __init__(self, n):
        self.n = n
        self.calls = []

    def __call__(self, t, pool, obs):
        observed = set(obs.indices)
        remaining = set(pool.remaining().tolist())
        assert observed.isdisjoint(remaining)
        assert observed | remaining == set(range(self.n))
        assert len(obs.indices) == len(observed)
        self.calls.append(t)


class Greedy:
    """Zero-variance surrogate predicting a fixed constant."""

    joint = False

    def fit(self, X, Y, seed=None):
        return self

    def predict(self, X, full_cov=False):
        n = len(X)
        return PosteriorPredictive(np.zeros((n, 1)), np.zeros((n, 1)))


class Exploding(Greedy):
    def __init__(self, at):
        self.at = at
        self.calls = 0

    def fit(self, X, Y, seed=None):
        self.calls += 1
        if self.calls == self.at:
            raise np.linalg.LinAlgError("synthetic failure")
        return self


class TestCampaign:
    def test_t_zero(self, fpool):
        trace = run_campaign(fpool, gp_config(T=0))
        assert trace.records == [] and trace.complete
        best = max(fpool.observe(r.index)[0] for r in trace.initial)
        assert trace.incumbents().tolist() == [best]

    def test_contracts(self, fpool):
        checker = PartitionChecker(fpool.n)
        trace = run_campaign(fpool, gp_config(T=8), on_iteration=checker)
        assert checker.calls == list(range(9))
        chosen = [r.index for r in trace.rows()]
        assert len(chosen) == len(set(chosen)) == 13
        for r in trace.rows():
            assert np.array_equal(r.values, fpool.objectives[r.index])
        assert np.all(np.diff(trace.incumbents()) >= 0)
        assert fpool.n_remaining() == fpool.n  # the caller's pool is untouched

    def test_deterministic(self, fpool):
        cfg = gp_config(seed=3, wall_time=False)
        a, b = run_campaign(fpool, cfg), run_campaign(fpool, cfg)
        assert [r.index for r in a.rows()] == [r.index for r in b.rows()]
        assert [r.digest for r in a.records] == [r.digest for r in b.records]

    def test_greedy_with_optimum_in_design(self, fpool):
        opt = int(np.argmax(fpool.objectives[:, 0]))
        seed = next(s for s in range(500)
                    if opt in _design(fpool.fresh(), gp_config(seed=s)).indices)
        trace = run_campaign(fpool, gp_config(seed=seed, T=10), surrogate=Greedy())
        inc = trace.incumbents()
        assert np.all(inc == fpool.objectives[opt, 0])
        # ties break to the lowest remaining row
        first = trace.records[0].index
        assert first == min(set(range(fpool.n)) - set(r.index for r in trace.initial))

    def test_failure_gives_partial_trace(self, fpool):
        trace = run_campaign(fpool, gp_config(T=6), surrogate=Exploding(3))
        assert not trace.complete
        assert trace.failed_at == 3 and len(trace.records) == 2
        assert "LinAlgError" in trace.failure

    def test_acquisitions(self, fpool):
        for acq in ("ei", "ucb"):
            trace = run_campaign(fpool, gp_config(acquisition=acq))
            assert trace.complete

    def test_laplace(self, fpool):
        cfg = CampaignConfig(surrogate="laplace_mlp", options={"epochs": 20, "tune_steps": 10,
                                                               "hidden": (8, 8)},
                             representation="features", T=3, m=5)
        assert run_campaign(fpool, cfg).complete

    def test_fingerprints_tanimoto(self):
        pool = load_pool(os.path.join(DATA, "toy_pool.csv"))
        cfg = CampaignConfig(surrogate="gp", options={"kernel": "tanimoto", "steps": 30}, T=4, m=5)
        trace = run_campaign(pool, cfg)
        assert trace.complete and len(trace.records) == 4

    def test_lora(self):
        pool = string_pool(30, seed=2)
        opts = {"dim": 8, "heads": 2, "head_dim": 4, "blocks": 1, "epochs": 2, "head_epochs": 2,
                "tune_steps": 5}
        cfg = CampaignConfig(surrogate="lora_transformer", options=opts, representation="strings",
                             T=3, m=5)
        trace = run_campaign(pool, cfg)
        assert trace.complete

    def test_multiobjective(self):
        pool = load_pool(os.path.join(DATA, "toy_pool_mo.csv"), ["maximize", "minimize"])
        cfg = CampaignConfig(surrogate="gp", options={"kernel": "tanimoto", "steps": 20}, T=5, m=5)
        trace = run_campaign(pool, cfg)
        hv = [r.hypervolume for r in trace.rows()]
        assert all(h is not None for h in hv)
        assert np.all(np.diff(hv) >= -1e-15)
        with pytest.raises(ConfigError):
            run_campaign(pool, CampaignConfig(surrogate="gp", options={"kernel": "tanimoto"},
                                              acquisition="ei", T=5, m=5))


class TestValidation:
    @pytest.mark.parametrize("kw", [
        {"surrogate": "svm"},
        {"acquisition": "pi"},
        {"representation": "graphs"},
        {"options": {"kernel": "tanimoto"}},
        {"options": {"bogus": 1}},
        {"T": -1},
        {"m": 0},
        {"surrogate": "lora_transformer", "options": {}},
        {"representation": "strings"},
        {"T": 60},
    ])
    def test_rejects(self, fpool, kw):
        cfg = gp_config(**kw)
        with pytest.raises(ConfigError):
            cfg.validate(fpool)

    def test_missing_features(self):
        pool = load_pool(os.path.join(DATA, "toy_pool.csv"))
        with pytest.raises(ConfigError):
            gp_config().validate(pool)

    def test_unknown_option_lists_valid(self):
        with pytest.raises(ConfigError, match="lengthscale|kernel"):
            gp_config(options={"bogus": 1}).resolved_options()


class TestRandomSearch:
    def test_same_seed(self, fpool):
        cfg = gp_config(T=20, seed=5, wall_time=False)
        a, b = run_random_search(fpool, cfg), run_random_search(fpool, cfg)
        assert [r.index for r in a.rows()] == [r.index for r in b.rows()]

    def test_no_duplicates(self, fpool):
        trace = run_random_search(fpool, gp_config(T=55), on_iteration=PartitionChecker(fpool.n))
        ids = [r.id for r in trace.rows()]
        assert len(ids) == len(set(ids)) == 60

    def test_shares_initial_design(self, fpool):
        cfg = gp_config(seed=7)
        a, b = run_random_search(fpool, cfg), run_campaign(fpool, cfg)
        assert [r.index for r in a.initial] == [r.index for r in b.initial]

    def test_hypergeometric_first_hit(self):
        n, k = 200, 10
        pool = feature_pool(n=n, d=2, seed=0)
        top = set(np.argsort(-pool.objectives[:, 0])[:k].tolist())
        cfg = CampaignConfig(representation="features", T=n - 1, m=1)
        hits = []
        for s in range(200):
            cfg.seed = s
            rows = run_random_search(pool, cfg).rows()
            hits.append(next(i + 1 for i, r in enumerate(rows) if r.index in top))
        # draws until the first of k marked items, without replacement
        mean = (n + 1) / (k + 1)
        var = (n - k) * (n + 1) * k / ((k + 1) ** 2 * (k + 2))
        assert abs(np.mean(hits) - mean) < 3 * np.sqrt(var / len(hits))


class TestReplicates:
    def test_single_seed(self, fpool):
        res = run_replicates(fpool, gp_config(), [4])
        assert np.array_equal(res.aggregate["incumbent_mean"], res.traces[0].incumbents())
        assert np.all(res.aggregate["gap_se"] == 0)

    def test_identical_traces(self, fpool):
        res = run_replicates(fpool, gp_config(), [2] * 5, random_search=True)
        assert np.all(res.aggregate["gap_se"] == 0)
        assert np.all(np.diff(res.aggregate["gap_mean"]) >= 0)

    def test_threads_do_not_change_results(self, fpool):
        cfg = gp_config(wall_time=False)
        a = run_replicates(fpool, cfg, [0, 1, 2], threads=1)
        b = run_replicates(fpool, cfg, [0, 1, 2], threads=3)
        for x, y in zip(a.traces, b.traces):
            assert [r.index for r in x.rows()] == [r.index for r in y.rows()]
            assert [r.digest for r in x.records] == [r.digest for r in y.records]

    def test_failures_are_flagged(self, fpool, monkeypatch):
        import molbo.loop as loop

        def build(config):
            return Exploding(2) if config.seed == 1 else Greedy()

        monkeypatch.setattr(loop, "build_surrogate", build)
        res = run_replicates(fpool, gp_config(), [0, 1, 2])
        assert res.failed == [(1, 2, "LinAlgError: synthetic failure")]
        assert len(res.completed()) == 2
        assert len(res.aggregate["gap_mean"]) == 6

    def test_gap_baselines(self, fpool):
        trace = run_random_search(fpool, gp_config(T=10))
        best = trace_gap(trace, fpool, "best")
        first = trace_gap(trace, fpool, "first")
        assert best[0] == 0.0
        assert np.all(first >= best - 1e-12)

    def test_no_seeds(self, fpool):
        with pytest.raises(ConfigError):
            run_replicates(fpool, gp_config(), [])


class TestFiles:
    def test_roundtrip_and_replay(self, fpool, tmp_path):
        trace = run_campaign(fpool, gp_config(T=6))
        path = tmp_path / "t.csv"
        write_trace_csv(path, trace, fpool)
        rows = read_trace_csv(path, fpool)
        assert [i for _, i in rows] == [r.index for r in trace.rows()]
        again = replay(fpool, rows, T=6)
        assert np.array_equal(again.incumbents(), trace.incumbents())
        header = path.read_text().splitlines()[0]
        assert header == "t,id,f,incumbent,wall_ms,scores_digest"

    def test_replay_rejects_duplicates(self, fpool):
        with pytest.raises(ConfigError):
            replay(fpool, [(0, 1), (1, 1)])

    def test_unknown_id(self, fpool, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("t,id,f,incumbent,wall_ms,scores_digest\n0,zzz,1,1,0,\n")
        with pytest.raises(ConfigError):
            read_trace_csv(path, fpool)

    def test_minimize_reported_in_original_units(self, tmp_path):
        pool = load_pool(os.path.join(DATA, "toy_pool.csv"), ["minimize"])
        trace = run_random_search(pool, CampaignConfig(T=3, m=2))
        path = tmp_path / "t.csv"
        write_trace_csv(path, trace, pool)
        line = path.read_text().splitlines()[1].split(",")
        raw = -pool.objectives[pool.index_of(line[1]), 0]
        assert float(line[2]) == raw

    def test_outputs(self, fpool, tmp_path):
        res = run_replicates(fpool, gp_config(), [0, 1], random_search=True)
        write_outputs(tmp_path, res, fpool, {"T": 5})
        assert sorted(os.listdir(tmp_path)) == ["random_seed0.csv", "random_seed1.csv",
                                                "random_summary.json"]
        import json
        summary = json.loads((tmp_path / "random_summary.json").read_text())
        assert summary["config"] == {"T": 5}
        assert len(summary["aggregate"]["gap_mean"]) == 6

    def test_aggregate_empty(self, fpool):
        assert aggregate_traces([], fpool) == {}
