"""Acquisition over a finite candidate set.

All policies take a :class:`~molbo.posterior.PosteriorPredictive` whose rows
are the candidates still in play and return the row index of the winner.
``np.argmax`` already breaks ties towards the lowest index.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionChoice:
    index: int
    scores: np.ndarray
    seed: object = None
    joint: bool = False


def _check(post):
    if post.n == 0:
        raise AcquisitionError("empty candidate set")


def _sample_output(rng, mean, var, cov):
    """One draw for a single output: joint if a covariance is given."""
    if cov is None:
        return mean + np.sqrt(var) * rng.standard_normal(len(mean))
    z = rng.standard_normal(len(mean))
    return mean + _psd_sqrt(cov) @ z


def _psd_sqrt(cov):
    n = cov.shape[0]
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-10 if jitter == 0.0 else jitter * 10.0
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.maximum(w, 0.0))


def thompson_sample(post, seed):
    """Argmax of one posterior draw (single objective)."""
    _check(post)
    if post.n_outputs != 1:
        raise AcquisitionError("thompson_sample expects one objective; use scalarized_thompson")
    rng = np.random.default_rng(seed)
    cov = post.covariances[0] if post.joint else None
    draw = _sample_output(rng, post.means[:, 0], post.variances[:, 0], cov)
    return AcquisitionChoice(int(np.argmax(draw)), draw, seed, post.joint)


def expected_improvement_scores(mean, sd, best):
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    gain = mean - best
    out = np.maximum(gain, 0.0)
    pos = sd > 0
    z = gain[pos] / sd[pos]
    out[pos] = sd[pos] * INV_SQRT_2PI * np.exp(-0.5 * z * z) + gain[pos] * ndtr(z)
    return out


def expected_improvement(post, best):
    """EI against the incumbent ``best``; returns the choice with scores attached."""
    _check(post)
    if post.n_outputs != 1:
        raise AcquisitionError("expected_improvement expects one objective")
    scores = expected_improvement_scores(post.means[:, 0], post.stddev()[:, 0], best)
    return AcquisitionChoice(int(np.argmax(scores)), scores)


def ucb(post, beta):
    if beta < 0:
        raise AcquisitionError("beta must be non-negative")
    _check(post)
    if post.n_outputs != 1:
        raise AcquisitionError("ucb expects one objective")
    scores = post.means[:, 0] + np.sqrt(beta) * post.stddev()[:, 0]
    return AcquisitionChoice(int(np.argmax(scores)), scores)


def uniform_weights(n_objectives):
    return np.full(n_objectives, 1.0 / n_objectives)


def scalarized_thompson(post, seed, weights=None):
    """Weighted sum of one independent draw per objective, then argmax."""
    _check(post)
    C = post.n_outputs
    weights = uniform_weights(C) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (C,):
        raise AcquisitionError(f"{len(weights)} weights for {C} objectives")
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise AcquisitionError("weights must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    total = np.zeros(post.n)
    for c in range(C):
        cov = post.covariances[c] if post.joint else None
        total += weights[c] * _sample_output(rng, post.means[:, c], post.variances[:, c], cov)
    return AcquisitionChoice(int(np.argmax(total)), total, seed, post.joint)


def random_weights(n_objectives, rng):
    """Flat Dirichlet draw, for the resampled-weights variant."""
    return rng.dirichlet(np.ones(n_objectives))
