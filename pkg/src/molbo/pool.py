"""Candidate pools, observation sets and the MBOF binary feature format.

MBOF layout (all little-endian)::

    b"MBOF" | u32 n | u32 d | n*d float32, row-major

Objectives marked ``minimize`` are negated on load so the rest of the engine
always maximizes; :meth:`CandidatePool.reported` undoes the flip exactly.
"""

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MBOF_MAGIC = b"MBOF"
_HEADER = struct.Struct("<4sII")


class PoolError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise FeatureFileError("feature matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise FeatureFileError("feature matrix contains non-finite values")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass
class ObservationSet:
    """Ordered (candidate index, objective vector) pairs; the data set D_t."""

    indices: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def add(self, index, y):
        if index in self.indices:
            raise ValueError(f"candidate {index} already observed")
        self.indices.append(int(index))
        self.values.append(np.array(y, dtype=np.float64))

    def __len__(self):
        return len(self.indices)

    def y(self):
        """Observed objectives as an ``(m, C)`` array (internal maximization sign)."""
        return np.vstack(self.values) if self.values else np.empty((0, 0))

    def best(self):
        return self.y().max(axis=0)

    def copy(self):
        return ObservationSet(list(self.indices), [v.copy() for v in self.values])


class CandidatePool:
    """The finite search set with hidden tabulated objectives.

    ``objectives`` is stored in the internal maximization convention. The
    ``remaining`` set only shrinks; use :meth:`fresh` to get an independent
    copy with every candidate available again (arrays are shared).
    """

    def __init__(self, ids, smiles, objectives, directions=None, objective_names=None, features=None):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise PoolError(f"duplicate id {dup!r}")
        objectives = np.asarray(objectives, dtype=np.float64)
        if objectives.ndim == 1:
            objectives = objectives[:, None]
        if objectives.shape[0] != len(ids) or objectives.shape[1] < 1:
            raise PoolError("objective table does not match the id list")
        if not np.all(np.isfinite(objectives)):
            raise PoolError("objective values must be finite")
        n_obj = objectives.shape[1]
        directions = _normalize_directions(directions, n_obj)
        self.ids = ids
        self.smiles = list(smiles)
        self.directions = directions
        self.objective_names = list(objective_names or [f"y{c}" for c in range(n_obj)])
        self.signs = np.array([1.0 if d == "maximize" else -1.0 for d in directions])
        self.objectives = objectives * self.signs
        self.objectives.setflags(write=False)
        self.features = None
        if features is not None:
            self.attach_features(features)
        self._remaining = np.ones(len(ids), dtype=bool)
        self._index = {k: i for i, k in enumerate(ids)}

    # -- shape ---------------------------------------------------------------

    @property
    def n(self):
        return len(self.ids)

    @property
    def n_objectives(self):
        return self.objectives.shape[1]

    def __len__(self):
        return self.n

    def index_of(self, cid):
        return self._index[cid]

    # -- remaining-set bookkeeping ---------------------------------------------

    def remaining(self):
        return np.flatnonzero(self._remaining)

    def n_remaining(self):
        return int(self._remaining.sum())

    def is_remaining(self, index):
        return bool(self._remaining[index])

    def remove(self, index):
        if not self._remaining[index]:
            raise PoolError(f"candidate {self.ids[index]!r} already removed")
        self._remaining[index] = False

    def fresh(self):
        clone = object.__new__(CandidatePool)
        clone.__dict__.update(self.__dict__)
        clone._remaining = np.ones(self.n, dtype=bool)
        return clone

    # -- values ----------------------------------------------------------------

    def observe(self, index):
        """Tabulated objective vector of one candidate (internal sign)."""
        return self.objectives[index].copy()

    def reported(self, values):
        """Convert internal values back to the CSV's units and sign."""
        return np.asarray(values, dtype=np.float64) * self.signs

    def optimum(self):
        """Best internal value per objective over the whole pool."""
        return self.objectives.max(axis=0)

    def attach_features(self, features):
        if not isinstance(features, FeatureMatrix):
            features = FeatureMatrix(np.asarray(features, dtype=np.float64))
        if features.n != self.n:
            raise FeatureFileError(f"feature rows ({features.n}) != pool size ({self.n})")
        self.features = features
        return features

    def subsample(self, k, seed):
        """Seeded uniform subsample of ``k`` candidates (original row order kept)."""
        if not 1 <= k <= self.n:
            raise PoolError(f"subsample size {k} outside [1, {self.n}]")
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(self.n, size=k, replace=False))
        feats = None if self.features is None else self.features.values[keep]
        return CandidatePool(
            [self.ids[i] for i in keep],
            [self.smiles[i] for i in keep],
            self.reported(self.objectives[keep]),
            self.directions,
            self.objective_names,
            feats,
        )


def _normalize_directions(directions, n_obj):
    if directions is None:
        directions = ["maximize"] * n_obj
    elif isinstance(directions, str):
        directions = [directions] * n_obj
    directions = [d.strip().lower() for d in directions]
    aliases = {"max": "maximize", "min": "minimize"}
    directions = [aliases.get(d, d) for d in directions]
    if len(directions) != n_obj:
        raise PoolError(f"{len(directions)} directions given for {n_obj} objectives")
    for d in directions:
        if d not in ("maximize", "minimize"):
            raise PoolError(f"unknown objective direction {d!r}")
    return tuple(directions)


def load_pool(path, directions=None):
    """Read a pool CSV with header ``id,smiles,y0[,y1,...]``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise PoolError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "id" or header[1] != "smiles":
        raise PoolError(f"{path}: header must start with 'id,smiles,' and name >= 1 objective")
    if len(rows) == 1:
        raise PoolError(f"{path}: no candidate rows")
    ids, smiles, ys = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise PoolError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[2:]]
        except ValueError:
            raise PoolError(f"{path}:{lineno}: non-numeric objective in {row[2:]}") from None
        if not all(math.isfinite(v) for v in vals):
            raise PoolError(f"{path}:{lineno}: non-finite objective")
        ids.append(row[0].strip())
        smiles.append(row[1].strip())
        ys.append(vals)
    return CandidatePool(ids, smiles, np.array(ys), directions, header[2:])


def write_mbof(path, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise FeatureFileError("MBOF payload must be 2-D")
    n, d = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MBOF_MAGIC, n, d))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_mbof(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, n, d = _HEADER.unpack_from(data)
    if magic != MBOF_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * n * d
    if len(data) != expected:
        raise FeatureFileError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, d)
    return values.astype(np.float64)


def load_features(path, pool):
    """Read an MBOF file and attach its rows to ``pool`` by position."""
    values = read_mbof(path)
    if values.shape[0] != pool.n:
        raise FeatureFileError(f"{path}: {values.shape[0]} rows for a pool of {pool.n}")
    if not np.all(np.isfinite(values)):
        raise FeatureFileError(f"{path}: non-finite feature values")
    return pool.attach_features(FeatureMatrix(values))


def sample_initial(pool, m, seed):
    """Draw ``m`` distinct remaining candidates uniformly and observe them."""
    remaining = pool.remaining()
    if not 1 <= m < len(remaining):
        raise PoolError(f"initial size m={m} must satisfy 1 <= m < {len(remaining)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(remaining, size=m, replace=False)
    obs = ObservationSet()
    for idx in chosen:
        pool.remove(idx)
        obs.add(idx, pool.observe(idx))
    return obs
