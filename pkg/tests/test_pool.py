import numpy as np
import pytest

from molbo.pool import (
    CandidatePool,
    FeatureFileError,
    FeatureMatrix,
    ObservationSet,
    PoolError,
    load_features,
    load_pool,
    read_mbof,
    sample_initial,
    write_mbof,
)


def _csv(tmp_path, text, name="pool.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def three(tmp_path):
    return load_pool(_csv(tmp_path, "id,smiles,y\na,CCO,1.0\nb,CCN,2.5\nc,CCC,-0.5\n"))


def test_three_row_pool(three):
    assert three.n == 3 and three.n_objectives == 1
    assert three.ids == ["a", "b", "c"]
    assert three.observe(1)[0] == 2.5
    assert three.n_remaining() == 3


def test_two_objectives(tmp_path):
    pool = load_pool(_csv(tmp_path, "id,smiles,y0,y1\na,C,1,2\nb,CC,3,4\n"))
    assert pool.n_objectives == 2
    assert pool.objective_names == ["y0", "y1"]


@pytest.mark.parametrize("text", [
    "id,smiles,y\na,C,1\na,CC,2\n",          # duplicate id
    "id,smiles,y\na,C,1\nb,CC\n",             # short row
    "id,smiles,y\na,C,abc\n",                 # non-numeric
    "id,smiles,y\na,C,nan\n",                 # non-finite
    "name,smiles,y\na,C,1\n",                 # bad header
    "id,smiles\na,C\n",                       # no objective
    "id,smiles,y\n",                          # no rows
    "",
])
def test_bad_pools(tmp_path, text):
    with pytest.raises(PoolError):
        load_pool(_csv(tmp_path, text))


def test_duplicate_id_names_the_id(tmp_path):
    with pytest.raises(PoolError, match="'a'"):
        load_pool(_csv(tmp_path, "id,smiles,y\na,C,1\na,CC,2\n"))


def test_minimize_roundtrip(tmp_path):
    pool = load_pool(_csv(tmp_path, "id,smiles,y0,y1\na,C,1.5,2\nb,CC,-3,4\n"),
                     ["maximize", "minimize"])
    assert pool.observe(0).tolist() == [1.5, -2.0]
    raw = np.array([[1.5, 2.0], [-3.0, 4.0]])
    assert np.array_equal(pool.reported(pool.objectives), raw)
    assert pool.optimum().tolist() == [1.5, -2.0]


def test_bad_directions(three):
    with pytest.raises(PoolError):
        CandidatePool(["a"], ["C"], [1.0], ["sideways"])
    with pytest.raises(PoolError):
        CandidatePool(["a"], ["C"], [1.0], ["maximize", "minimize"])


class TestFeatures:
    def test_roundtrip(self, tmp_path, three):
        X = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        write_mbof(tmp_path / "f.mbof", X)
        fm = load_features(tmp_path / "f.mbof", three)
        assert (fm.n, fm.d) == (3, 4)
        assert np.array_equal(fm.values, X.astype(np.float64))
        assert three.features is fm

    def test_header_bytes(self, tmp_path):
        write_mbof(tmp_path / "f.mbof", np.ones((2, 3)))
        data = (tmp_path / "f.mbof").read_bytes()
        assert data[:4] == b"MBOF"
        assert data[4:12] == bytes([2, 0, 0, 0, 3, 0, 0, 0])
        assert len(data) == 12 + 24

    def test_row_mismatch(self, tmp_path, three):
        write_mbof(tmp_path / "f.mbof", np.ones((4, 2)))
        with pytest.raises(FeatureFileError):
            load_features(tmp_path / "f.mbof", three)

    def test_nan(self, tmp_path, three):
        X = np.ones((3, 2))
        X[1, 1] = np.nan
        write_mbof(tmp_path / "f.mbof", X)
        with pytest.raises(FeatureFileError):
            load_features(tmp_path / "f.mbof", three)

    @pytest.mark.parametrize("mutate", [
        lambda b: b[:10],
        lambda b: b"XXXX" + b[4:],
        lambda b: b + b"\0",
        lambda b: b[:-1],
    ])
    def test_corrupt_files(self, tmp_path, mutate):
        write_mbof(tmp_path / "f.mbof", np.ones((2, 2)))
        (tmp_path / "g.mbof").write_bytes(mutate((tmp_path / "f.mbof").read_bytes()))
        with pytest.raises(FeatureFileError):
            read_mbof(tmp_path / "g.mbof")

    def test_matrix_must_be_2d(self):
        with pytest.raises(FeatureFileError):
            FeatureMatrix(np.ones(3))


class TestInitialDesign:
    def test_leaves_one(self, three):
        obs = sample_initial(three, 2, seed=0)
        assert len(obs) == 2
        assert three.n_remaining() == 1
        assert set(obs.indices).isdisjoint(three.remaining())

    def test_m_bounds(self, three):
        with pytest.raises(PoolError):
            sample_initial(three.fresh(), 3, seed=0)
        with pytest.raises(PoolError):
            sample_initial(three.fresh(), 0, seed=0)

    def test_same_seed_same_design(self, three):
        a = sample_initial(three.fresh(), 2, seed=7)
        b = sample_initial(three.fresh(), 2, seed=7)
        assert a.indices == b.indices

    def test_uniform(self):
        pool = CandidatePool(list("abcd"), ["C"] * 4, [1.0, 2.0, 3.0, 4.0])
        draws = 10_000
        counts = np.zeros(4)
        for s in range(draws):
            counts[sample_initial(pool.fresh(), 1, seed=s).indices[0]] += 1
        sd = np.sqrt(draws * 0.25 * 0.75)
        assert np.all(np.abs(counts - draws / 4) < 3 * sd)


class TestPoolState:
    def test_fresh_is_independent(self, three):
        three.remove(0)
        other = three.fresh()
        assert other.n_remaining() == 3 and three.n_remaining() == 2
        assert other.objectives is three.objectives

    def test_double_remove(self, three):
        three.remove(1)
        with pytest.raises(PoolError):
            three.remove(1)

    def test_objectives_read_only(self, three):
        with pytest.raises(ValueError):
            three.objectives[0, 0] = 9.0

    def test_observation_set(self):
        obs = ObservationSet()
        obs.add(3, [1.0])
        obs.add(1, [2.0])
        assert obs.y().shape == (2, 1) and obs.best()[0] == 2.0
        with pytest.raises(ValueError):
            obs.add(3, [0.0])
        c = obs.copy()
        c.add(0, [5.0])
        assert len(obs) == 2

    def test_subsample(self, three):
        sub = three.subsample(2, seed=1)
        assert sub.n == 2
        for i, cid in enumerate(sub.ids):
            assert sub.observe(i)[0] == three.observe(three.index_of(cid))[0]
        with pytest.raises(PoolError):
            three.subsample(4, seed=0)
