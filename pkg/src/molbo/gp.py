"""Exact GP regression with a Tanimoto or Matern-5/2 kernel.

Hyperparameters are kept as logs and fit by Adam ascent on the log marginal
likelihood (lr 0.01, 500 steps). Initialization: outputscale = var(y),
lengthscale = median pairwise distance, noise = 1e-2 * var(y). Targets are
standardized internally unless ``standardize=False``.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import sqdist, tanimoto_gram, unpack_bits
from .optim import adam_ascent
from .posterior import PosteriorPredictive

KINDS = ("tanimoto", "matern52")
SQRT5 = np.sqrt(5.0)
JITTER_START = 1e-8
JITTER_MAX = 1e-3
LOG_NOISE_MIN = np.log(1e-6)
LOG_BOUND = 12.0


class GPFitError(RuntimeError):
    pass


def _check_inputs(kind, X):
    if kind not in KINDS:
        raise ValueError(f"unknown kernel {kind!r}; expected one of {KINDS}")
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("inputs must be a 2-D array")
    if kind == "tanimoto" and X.dtype != np.uint64:
        raise TypeError("tanimoto kernel needs packed uint64 fingerprints, got dense features")
    if kind == "matern52" and X.dtype == np.uint64:
        X = unpack_bits(X)
    return X


def matern52(r):
    return (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def base_kernel(kind, X_a, X_b, lengthscale=None):
    if kind == "tanimoto":
        return tanimoto_gram(X_a, X_b)
    r = np.sqrt(sqdist(X_a, X_b)) / lengthscale
    return matern52(r)


def kernel_matrix(kind, hyper, X_a, X_b):
    """``outputscale * k(X_a, X_b)``; ``hyper`` maps names to positive values."""
    X_a = _check_inputs(kind, X_a)
    X_b = _check_inputs(kind, X_b)
    if X_a.shape[1] != X_b.shape[1]:
        raise ValueError(f"dimension mismatch: {X_a.shape[1]} vs {X_b.shape[1]}")
    return hyper["outputscale"] * base_kernel(kind, X_a, X_b, hyper.get("lengthscale"))


def median_distance(X):
    d2 = sqdist(X, X)
    iu = np.triu_indices(len(X), k=1)
    d = np.sqrt(d2[iu])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


@dataclass(frozen=True)
class GPModel:
    kind: str
    log_params: np.ndarray  # (log outputscale, [log lengthscale,] log noise)
    X: np.ndarray
    y: np.ndarray  # standardized targets
    y_mean: float
    y_std: float
    chol: np.ndarray = None
    alpha: np.ndarray = None
    jitter: float = 0.0

    @property
    def outputscale(self):
        return float(np.exp(self.log_params[0]))

    @property
    def lengthscale(self):
        return float(np.exp(self.log_params[1])) if self.kind == "matern52" else None

    @property
    def noise(self):
        return float(np.exp(self.log_params[-1]))

    @property
    def hyper(self):
        h = {"outputscale": self.outputscale, "noise": self.noise}
        if self.kind == "matern52":
            h["lengthscale"] = self.lengthscale
        return h


def _cholesky(K):
    n = K.shape[0]
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPFitError(f"Cholesky failed even with jitter {JITTER_MAX:g}")


class _Evidence:
    """Log evidence and its gradient in log-hyperparameter space."""

    def __init__(self, kind, X, y):
        self.kind = kind
        self.y = y
        self.n = len(y)
        if kind == "tanimoto":
            self.B = tanimoto_gram(X, X)
        else:
            self.dist = np.sqrt(sqdist(X, X))

    def __call__(self, log_params):
        s = np.exp(log_params[0])
        noise = np.exp(log_params[-1])
        if self.kind == "tanimoto":
            B = self.B
            dB = None
        else:
            ell = np.exp(log_params[1])
            r = self.dist / ell
            e = np.exp(-SQRT5 * r)
            B = (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
            dB = 5.0 / 3.0 * r * r * (1.0 + SQRT5 * r) * e
        K = s * B + noise * np.eye(self.n)
        L, _ = _cholesky(K)
        alpha = cho_solve((L, True), self.y)
        value = (-0.5 * self.y @ alpha - np.log(np.diag(L)).sum()
                 - 0.5 * self.n * np.log(2 * np.pi))
        W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(self.n))
        grads = [0.5 * np.sum(W * (s * B))]
        if dB is not None:
            grads.append(0.5 * np.sum(W * (s * dB)))
        grads.append(0.5 * noise * np.trace(W))
        return value, np.array(grads)


def _standardize(y, standardize):
    if not standardize:
        return y.copy(), 0.0, 1.0
    mu = float(y.mean())
    sd = float(y.std())
    if not np.isfinite(sd) or sd < 1e-12:
        sd = 1.0
    return (y - mu) / sd, mu, sd


def _factorize(model):
    K = kernel_matrix(model.kind, model.hyper, model.X, model.X) + model.noise * np.eye(len(model.y))
    L, jitter = _cholesky(K)
    alpha = cho_solve((L, True), model.y)
    return replace(model, chol=L, alpha=alpha, jitter=jitter)


def make_gp(X, y, kind, log_params, standardize=True):
    """Build a factorized model at fixed log-hyperparameters."""
    X = _check_inputs(kind, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    ys, mu, sd = _standardize(y, standardize)
    model = GPModel(kind, np.asarray(log_params, dtype=np.float64), X, ys, mu, sd)
    return _factorize(model)


def initial_log_params(X, y_std, kind):
    var = float(np.var(y_std)) if len(y_std) > 1 else 1.0
    var = var if var > 1e-12 else 1.0
    params = [np.log(var)]
    if kind == "matern52":
        params.append(np.log(median_distance(np.asarray(X, dtype=np.float64))))
    params.append(np.log(1e-2 * var))
    return np.array(params)


def gp_log_marginal_likelihood(model):
    """Log evidence of the (standardized) targets and its gradient wrt log-hyperparameters."""
    return _Evidence(model.kind, model.X, model.y)(model.log_params)


def fit_gp(X, y, kind, standardize=True, lr=0.01, steps=500):
    """Fit hyperparameters by Adam ascent on the log evidence."""
    X = _check_inputs(kind, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) < 2:
        raise ValueError("fit_gp needs at least 2 training points")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite training targets")
    ys, mu, sd = _standardize(y, standardize)
    x0 = initial_log_params(X, ys, kind)
    lower = np.full_like(x0, -LOG_BOUND)
    upper = np.full_like(x0, LOG_BOUND)
    lower[-1] = LOG_NOISE_MIN
    evidence = _Evidence(kind, X, ys)
    best, _, _ = adam_ascent(evidence, x0, lr, steps, lower, upper)
    return _factorize(GPModel(kind, best, X, ys, mu, sd))


def gp_posterior(model, X_test, full_cov=False, observation_noise=True):
    """Conditional Gaussian at ``X_test`` in the original target units."""
    X_test = _check_inputs(model.kind, X_test)
    hyper = model.hyper
    Ks = kernel_matrix(model.kind, hyper, X_test, model.X)
    mean = Ks @ model.alpha
    V = solve_triangular(model.chol, Ks.T, lower=True)
    prior = np.full(len(X_test), hyper["outputscale"])
    var = np.maximum(prior - np.sum(V * V, axis=0), 0.0)
    cov = None
    if full_cov:
        cov = kernel_matrix(model.kind, hyper, X_test, X_test) - V.T @ V
        cov = 0.5 * (cov + cov.T)
    if observation_noise:
        var = var + model.noise
        if cov is not None:
            cov = cov + model.noise * np.eye(len(X_test))
    sd2 = model.y_std ** 2
    mean = mean * model.y_std + model.y_mean
    return PosteriorPredictive(mean[:, None], (var * sd2)[:, None],
                               None if cov is None else (cov * sd2)[None])


class GPSurrogate:
    """One independent GP per objective behind the common surrogate interface."""

    name = "gp"

    def __init__(self, kind="matern52", standardize=True, lr=0.01, steps=500):
        if kind not in KINDS:
            raise ValueError(f"unknown kernel {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.standardize = standardize
        self.lr = lr
        self.steps = steps
        self.models = []

    def fit(self, X, Y, seed=None):
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        self.models = [fit_gp(X, Y[:, c], self.kind, self.standardize, self.lr, self.steps)
                       for c in range(Y.shape[1])]
        return self

    def predict(self, X, full_cov=True):
        posts = [gp_posterior(m, X, full_cov=full_cov, observation_noise=False) for m in self.models]
        means = np.hstack([p.means for p in posts])
        variances = np.hstack([p.variances for p in posts])
        cov = np.concatenate([p.covariances for p in posts]) if full_cov else None
        return PosteriorPredictive(means, variances, cov)
