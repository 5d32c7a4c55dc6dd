"""Deterministic desk-scale pools with tabulated objectives.

``feature_pool`` draws points in [0, 1]^d and tabulates a smooth
bimodal function on them. ``string_pool`` assembles SMILES-like strings
from fragments and scores them by fragment composition.
"""

import numpy as np

from .pool import CandidatePool

FRAGMENTS = ("C", "CC", "N", "O", "C(=O)", "c1ccccc1", "F", "Cl", "C#N", "S")
# per-fragment weights of the composition score
FRAGMENT_WEIGHTS = np.array([0.1, 0.2, 0.6, 0.9, 1.2, -0.4, -0.8, -0.6, 0.3, -0.2])


def smooth_objective(X, seed=0):
    """Two broad Gaussian bumps of unequal height plus a gentle linear trend."""
    rng = np.random.default_rng(seed)
    d = X.shape[1]
    centers = rng.uniform(0.15, 0.85, (2, d))
    heights = np.array([1.0, 0.6])
    width = 0.4 * np.sqrt(d / 8.0)
    trend = rng.normal(0.0, 0.1, d)
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=-1)
    return (heights * np.exp(-0.5 * d2 / width ** 2)).sum(axis=1) + X @ trend


def feature_pool(n=200, d=8, seed=0, objective_seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, d))
    y = smooth_objective(X, objective_seed)
    ids = [f"x{i:04d}" for i in range(n)]
    smiles = ["C" * (1 + i % 12) for i in range(n)]
    return CandidatePool(ids, smiles, y, ["maximize"], ["f"], X)


def string_score(counts):
    """Composition score: weighted fragment frequencies with one interaction."""
    counts = np.asarray(counts, dtype=np.float64)
    freq = counts / counts.sum(axis=-1, keepdims=True)
    return freq @ FRAGMENT_WEIGHTS + 1.5 * freq[..., 3] * freq[..., 4]


def string_pool(n=100, seed=0, min_frags=3, max_frags=9):
    rng = np.random.default_rng(seed)
    strings, counts = [], []
    seen = set()
    while len(strings) < n:
        k = int(rng.integers(min_frags, max_frags + 1))
        picks = rng.integers(len(FRAGMENTS), size=k)
        s = "".join(FRAGMENTS[j] for j in picks)
        if s in seen:
            continue
        seen.add(s)
        strings.append(s)
        counts.append(np.bincount(picks, minlength=len(FRAGMENTS)))
    y = string_score(np.array(counts))
    ids = [f"s{i:03d}" for i in range(n)]
    return CandidatePool(ids, strings, y, ["maximize"], ["score"])
