"""The Gaussian posterior predictive every surrogate hands to acquisition."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PosteriorPredictive:
    """Per-candidate Gaussian over C outputs.

    ``means`` and ``variances`` are ``(n, C)``; ``covariances`` is either
    ``None`` (independent marginals) or ``(C, n, n)`` with one joint
    covariance over the candidates per output.
    """

    means: np.ndarray
    variances: np.ndarray
    covariances: np.ndarray = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if means.shape[0] == 1 and np.ndim(self.means) == 1:
            means = means.T
        variances = np.asarray(self.variances, dtype=np.float64).reshape(means.shape)
        if np.any(variances < 0) or not np.all(np.isfinite(variances)):
            raise ValueError("variances must be finite and non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        if self.covariances is not None:
            cov = np.asarray(self.covariances, dtype=np.float64)
            if cov.ndim == 2:
                cov = cov[None]
            if cov.shape != (means.shape[1], means.shape[0], means.shape[0]):
                raise ValueError(f"covariance shape {cov.shape} does not match means {means.shape}")
            object.__setattr__(self, "covariances", cov)

    @property
    def n(self):
        return self.means.shape[0]

    @property
    def n_outputs(self):
        return self.means.shape[1]

    @property
    def joint(self):
        return self.covariances is not None

    def stddev(self):
        return np.sqrt(self.variances)

    def subset(self, rows):
        rows = np.asarray(rows)
        cov = None if self.covariances is None else self.covariances[:, rows][:, :, rows]
        return PosteriorPredictive(self.means[rows], self.variances[rows], cov)

    def shifted(self, delta):
        return PosteriorPredictive(self.means + delta, self.variances, self.covariances)
