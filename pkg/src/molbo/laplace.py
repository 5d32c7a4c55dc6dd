"""MLP surrogate with MAP training and a linearized Laplace posterior.

Parameter layout: one flat vector; layer ``l`` owns the row-major block
``[W_l | b_l]`` of shape ``(fan_out, fan_in + 1)`` (no bias column when
``bias=False``). With that layout the per-sample Jacobian of a layer is
``kron(output_grad, augmented_input)``, which is what makes the KFAC blocks
``kron(G, A)``.

The curvature state stores ``JtJ = sum_i J_i^T J_i`` (no noise scaling). The
Gauss-Newton matrix is ``JtJ / noise_var`` and the posterior precision is
``JtJ / noise_var + diag(prior_prec)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels
from .optim import adam_ascent
from .posterior import PosteriorPredictive

STRUCTURES = ("full", "diag", "kfac")
ACTIVATIONS = {"relu": 0, "tanh": 1}
FULL_CAP = 20_000
KFAC_DAMPING = 1e-6
PRIOR_BOUNDS = (1e-4, 1e4)
NOISE_BOUNDS = (1e-4, 1e2)


class TrainingError(RuntimeError):
    pass


class CurvatureError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpModel:
    widths: tuple
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        object.__setattr__(self, "widths", widths)

    @classmethod
    def regressor(cls, n_in, n_out=1, hidden=(50, 50), activation="relu", bias=True):
        return cls((n_in, *hidden, n_out), activation, bias)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_outputs(self):
        return self.widths[-1]

    def block_shape(self, l):
        return self.widths[l + 1], self.widths[l] + int(self.bias)

    def layer_slices(self):
        out, start = [], 0
        for l in range(self.n_layers):
            rows, cols = self.block_shape(l)
            out.append(slice(start, start + rows * cols))
            start += rows * cols
        return out

    @property
    def n_params(self):
        return self.layer_slices()[-1].stop

    def init_params(self, seed):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for l in range(self.n_layers):
            bound = 1.0 / np.sqrt(self.widths[l])
            parts.append(rng.uniform(-bound, bound, size=np.prod(self.block_shape(l))))
        return np.concatenate(parts)

    def blocks(self, theta):
        return [theta[s].reshape(self.block_shape(l)) for l, s in enumerate(self.layer_slices())]

    def _augment(self, h):
        return np.hstack([h, np.ones((h.shape[0], 1))]) if self.bias else h

    def forward(self, theta, X, cache=False):
        X = np.asarray(X, dtype=np.float64)
        blocks = self.blocks(theta)
        inputs = []
        h = X
        for l, Wa in enumerate(blocks):
            a = self._augment(h)
            inputs.append(a)
            z = a @ Wa.T
            if l < self.n_layers - 1:
                h = np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)
            else:
                h = z
        if cache:
            return h, inputs
        return h

    def _act_grad(self, a_next):
        # a_next: augmented input of the next layer (post-activation)
        h = a_next[:, :-1] if self.bias else a_next
        if self.activation == "relu":
            return (h > 0.0).astype(np.float64)
        return 1.0 - h * h

    def output_deltas(self, theta, X):
        """Per-output backprop signals: ``deltas[c][l]`` is ``(n, fan_out_l)``."""
        out, inputs = self.forward(theta, X, cache=True)
        blocks = self.blocks(theta)
        n = out.shape[0]
        all_deltas = []
        for c in range(self.n_outputs):
            delta = np.zeros((n, self.n_outputs))
            delta[:, c] = 1.0
            per_layer = [None] * self.n_layers
            for l in range(self.n_layers - 1, -1, -1):
                per_layer[l] = delta
                if l > 0:
                    W = blocks[l][:, :self.widths[l]]
                    delta = (delta @ W) * self._act_grad(inputs[l])
            all_deltas.append(per_layer)
        return out, inputs, all_deltas

    def jacobian(self, theta, X):
        """Per-sample Jacobian of the outputs, shape ``(n, C, P)``."""
        out, inputs, deltas = self.output_deltas(theta, X)
        n = out.shape[0]
        J = np.empty((n, self.n_outputs, self.n_params))
        for c in range(self.n_outputs):
            for l, s in enumerate(self.layer_slices()):
                J[:, c, s] = np.einsum("no,ni->noi", deltas[c][l], inputs[l]).reshape(n, -1)
        return out, J


# --------------------------------------------------------------------------
# MAP training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 20
    weight_decay: float = 5e-4
    noise_var: float = 1.0
    prior_prec: float = None  # defaults to weight_decay * n
    seed: int = 0
    gn_refine_steps: int = 0


@dataclass
class TrainResult:
    theta: np.ndarray
    losses: np.ndarray
    initial_loss: float
    final_loss: float
    prior_prec: float


def map_objective(model, theta, X, Y, noise_var, prior_prec):
    """Mean negative log joint: ``[sum ||y-g||^2/(2 s2) + lam/2 ||theta||^2] / n``."""
    resid = model.forward(theta, X) - Y
    n = len(X)
    return (0.5 * np.sum(resid ** 2) / noise_var + 0.5 * prior_prec * theta @ theta) / n


def _as_targets(Y):
    Y = np.asarray(Y, dtype=np.float64)
    return Y[:, None] if Y.ndim == 1 else Y


def train_map(model, theta0, X, Y, config=TrainConfig()):
    """Minibatch Adam (cosine-annealed) on the MAP objective, optional Gauss-Newton polish."""
    X = np.asarray(X, dtype=np.float64)
    Y = _as_targets(Y)
    n = len(X)
    if n < 1:
        raise ValueError("train_map needs at least one data point")
    prior_prec = config.weight_decay * n if config.prior_prec is None else config.prior_prec
    rng = np.random.default_rng(config.seed)
    perms = np.array([rng.permutation(n) for _ in range(config.epochs)], dtype=np.int64)
    perms = perms.reshape(config.epochs, n)
    initial = map_objective(model, theta0, X, Y, config.noise_var, prior_prec)
    theta, losses = kernels.mlp_adam(
        theta0, model.widths, ACTIVATIONS[model.activation], model.bias, X, Y, perms,
        config.batch_size, config.lr, config.noise_var, prior_prec / n,
    )
    if len(losses) < config.epochs or not np.all(np.isfinite(theta)):
        raise TrainingError(f"non-finite training loss at epoch {len(losses) - 1}")
    for _ in range(config.gn_refine_steps):
        theta = _gauss_newton_step(model, theta, X, Y, config.noise_var, prior_prec)
    final = map_objective(model, theta, X, Y, config.noise_var, prior_prec)
    if not np.isfinite(final):
        raise TrainingError("non-finite loss after training")
    return TrainResult(theta, losses, float(initial), float(final), float(prior_prec))


def _gauss_newton_step(model, theta, X, Y, noise_var, prior_prec):
    if model.n_params > FULL_CAP:
        raise CurvatureError("Gauss-Newton refinement needs P <= FULL_CAP")
    out, J = model.jacobian(theta, X)
    Jf = J.reshape(-1, model.n_params)
    r = (out - Y).reshape(-1)
    H = Jf.T @ Jf / noise_var + prior_prec * np.eye(model.n_params)
    g = Jf.T @ r / noise_var + prior_prec * theta
    step = cho_solve((np.linalg.cholesky(H), True), g)
    # accept only if the objective does not get worse
    new = theta - step
    if map_objective(model, new, X, Y, noise_var, prior_prec) <= map_objective(
            model, theta, X, Y, noise_var, prior_prec):
        return new
    return theta


# --------------------------------------------------------------------------
# curvature
# --------------------------------------------------------------------------


@dataclass
class KfacFactors:
    A: np.ndarray  # (in, in)
    G: np.ndarray  # (out, out)
    ea: np.ndarray = None
    Qa: np.ndarray = None
    eg: np.ndarray = None
    Qg: np.ndarray = None

    def decompose(self):
        self.ea, self.Qa = np.linalg.eigh(self.A)
        self.eg, self.Qg = np.linalg.eigh(self.G)
        self.ea = np.maximum(self.ea, 0.0)
        self.eg = np.maximum(self.eg, 0.0)
        return self

    def eigenvalues(self):
        """Eigenvalues of ``kron(G, A)`` in row-major (out, in) order."""
        return np.outer(self.eg, self.ea).ravel()

    def dense(self):
        return np.kron(self.G, self.A)


@dataclass
class CurvatureState:
    structure: str
    jtj: object  # (P, P) | (P,) | list of KfacFactors
    groups: list  # parameter slices sharing one prior precision
    noise_var: float
    prior_prec: np.ndarray  # one per group (all equal for a scalar prior)
    n_data: int
    n_outputs: int
    layerwise: bool = False
    _chol: np.ndarray = field(default=None, repr=False)
    _eig: tuple = field(default=None, repr=False)

    @property
    def spectral(self):
        # full curvature with one shared prior: work in the eigenbasis of JtJ
        return self.structure == "full" and not self.layerwise

    def eig(self):
        if self._eig is None:
            h, Q = np.linalg.eigh(self.jtj)
            self._eig = (np.maximum(h, 0.0), Q)
        return self._eig

    def spectral_precision(self):
        h, _ = self.eig()
        return h / self.noise_var + self.prior_prec[0]

    @property
    def n_params(self):
        return self.groups[-1].stop

    @property
    def ggn(self):
        if self.structure == "kfac":
            return [f.dense() / self.noise_var for f in self.jtj]
        return self.jtj / self.noise_var

    def prior_diagonal(self):
        d = np.empty(self.n_params)
        for lam, s in zip(self.prior_prec, self.groups):
            d[s] = lam
        return d

    def with_hyper(self, prior_prec=None, noise_var=None):
        prior = self.prior_prec if prior_prec is None else np.broadcast_to(
            np.asarray(prior_prec, dtype=np.float64), (len(self.groups),)).copy()
        noise = self.noise_var if noise_var is None else float(noise_var)
        if self.spectral:
            self.eig()  # share the decomposition with the copy
        return replace(self, prior_prec=prior, noise_var=noise, _chol=None)

    def precision(self):
        """Dense posterior precision (full/diag) or per-group eigenvalues (kfac)."""
        if self.structure == "full":
            return self.jtj / self.noise_var + np.diag(self.prior_diagonal())
        if self.structure == "diag":
            return self.jtj / self.noise_var + self.prior_diagonal()
        return [f.eigenvalues() / self.noise_var + lam for f, lam in zip(self.jtj, self.prior_prec)]

    def cholesky(self):
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.precision())
            except np.linalg.LinAlgError:
                raise CurvatureError("posterior precision is not positive definite") from None
        return self._chol

    def logdet_precision(self):
        if self.spectral:
            return float(np.log(self.spectral_precision()).sum())
        if self.structure == "full":
            return 2.0 * np.log(np.diag(self.cholesky())).sum()
        if self.structure == "diag":
            return float(np.log(self.precision()).sum())
        return float(sum(np.log(p).sum() for p in self.precision()))

    def covariance(self):
        """Dense posterior covariance (only for full and diag)."""
        if self.spectral:
            _, Q = self.eig()
            return (Q / self.spectral_precision()) @ Q.T
        if self.structure == "full":
            L = self.cholesky()
            return cho_solve((L, True), np.eye(self.n_params))
        if self.structure == "diag":
            return np.diag(1.0 / self.precision())
        raise CurvatureError("dense covariance is not materialized for kfac")

    def whiten(self, J):
        """Map Jacobian rows ``J (m, P)`` to ``M`` with ``M M^T = J Sigma J^T``."""
        if self.spectral:
            _, Q = self.eig()
            return (J @ Q) / np.sqrt(self.spectral_precision())
        if self.structure == "full":
            return solve_triangular(self.cholesky(), J.T, lower=True).T
        if self.structure == "diag":
            return J / np.sqrt(self.precision())
        parts = []
        for f, prec, s in zip(self.jtj, self.precision(), self.groups):
            out, inp = f.G.shape[0], f.A.shape[0]
            Jl = J[:, s].reshape(-1, out, inp)
            rot = np.einsum("go,mgi,ij->moj", f.Qg, Jl, f.Qa, optimize=True)
            parts.append(rot.reshape(len(J), -1) / np.sqrt(prec))
        return np.hstack(parts)


def _kfac_damp(M):
    size = M.shape[0]
    return M + KFAC_DAMPING * max(np.trace(M), 1e-12) / size * np.eye(size)


def compute_ggn(model, theta, X, structure="kfac", noise_var=1.0, prior_prec=1.0,
                per_layer=False, max_full=FULL_CAP):
    """Gauss-Newton curvature of the Gaussian likelihood at ``theta``."""
    if structure not in STRUCTURES:
        raise ValueError(f"structure must be one of {STRUCTURES}")
    X = np.asarray(X, dtype=np.float64)
    P = model.n_params
    groups = model.layer_slices() if per_layer else [slice(0, P)]
    n_groups = len(groups)
    prior = np.broadcast_to(np.asarray(prior_prec, dtype=np.float64), (n_groups,)).copy()
    if structure == "full":
        if P > max_full:
            raise CurvatureError(f"full GGN with P={P} exceeds the cap of {max_full}")
        _, J = model.jacobian(theta, X)
        Jf = J.reshape(-1, P)
        jtj = Jf.T @ Jf
        # same reduction as the diagonal structure, so diag(full) == diag bitwise
        np.fill_diagonal(jtj, np.einsum("ncp,ncp->p", J, J))
    elif structure == "diag":
        _, J = model.jacobian(theta, X)
        jtj = np.einsum("ncp,ncp->p", J, J)
    else:
        _, inputs, deltas = model.output_deltas(theta, X)
        n = len(X)
        jtj = []
        for l in range(model.n_layers):
            A = inputs[l].T @ inputs[l]
            G = sum(deltas[c][l].T @ deltas[c][l] for c in range(model.n_outputs))
            jtj.append(KfacFactors(_kfac_damp(A), _kfac_damp(G) / n).decompose())
        if not per_layer:
            # KFAC blocks are per layer; a scalar prior is shared across them
            groups = model.layer_slices()
            prior = np.full(len(groups), prior[0])
    return CurvatureState(structure, jtj, groups, float(noise_var), prior, len(X), model.n_outputs,
                          layerwise=per_layer)


# --------------------------------------------------------------------------
# linearized predictive
# --------------------------------------------------------------------------


def lla_predict(model, theta, curvature, X, full_cov=False, observation_noise=False):
    """Mean ``g(x)`` and covariance ``J Sigma J^T`` per output."""
    out, J = model.jacobian(theta, X)
    n, C = out.shape
    variances = np.empty((n, C))
    covs = np.empty((C, n, n)) if full_cov else None
    for c in range(C):
        M = curvature.whiten(J[:, c, :])
        variances[:, c] = np.sum(M * M, axis=1)
        if full_cov:
            cov = M @ M.T
            covs[c] = 0.5 * (cov + cov.T)
    if observation_noise:
        variances = variances + curvature.noise_var
        if full_cov:
            covs = covs + curvature.noise_var * np.eye(n)[None]
    return PosteriorPredictive(out, np.maximum(variances, 0.0), covs)


# --------------------------------------------------------------------------
# marginal likelihood
# --------------------------------------------------------------------------


def _group_norms(theta, groups):
    return np.array([theta[s] @ theta[s] for s in groups])


def log_evidence(model, theta, curvature, X, Y):
    """Laplace log marginal likelihood at the curvature's current hyperparameters."""
    value, _ = _evidence_terms(model, theta, curvature, X, Y, want_grad=False)
    return value


def _sse(model, theta, X, Y):
    return float(np.sum((model.forward(theta, X) - _as_targets(Y)) ** 2))


def _evidence_terms(model, theta, curv, X, Y, want_grad=True, sse=None):
    s2 = curv.noise_var
    lam = curv.prior_prec
    nC = curv.n_data * curv.n_outputs
    sse = _sse(model, theta, X, Y) if sse is None else sse
    sizes = np.array([s.stop - s.start for s in curv.groups])
    norms = _group_norms(theta, curv.groups)
    loglik = -0.5 * nC * np.log(2 * np.pi * s2) - 0.5 * sse / s2
    logprior = float(np.sum(0.5 * sizes * np.log(lam) - 0.5 * lam * norms))
    value = loglik + logprior - 0.5 * curv.logdet_precision()
    if not want_grad:
        return value, None
    # d/dlog(lam_g) and d/dlog(s2)
    if curv.spectral:
        h, _ = curv.eig()
        prec = curv.spectral_precision()
        tr_group = np.array([np.sum(1.0 / prec)])
        tr_ggn = float(np.sum(h / s2 / prec))
    elif curv.structure == "full":
        Sigma = curv.covariance()
        tr_group = np.array([np.trace(Sigma[s, s]) for s in curv.groups])
        tr_ggn = float(np.sum(Sigma * curv.jtj)) / s2
    elif curv.structure == "diag":
        prec = curv.precision()
        tr_group = np.array([np.sum(1.0 / prec[s]) for s in curv.groups])
        tr_ggn = float(np.sum(curv.jtj / s2 / prec))
    else:
        precs = curv.precision()
        tr_group = np.array([np.sum(1.0 / p) for p in precs])
        tr_ggn = float(sum(np.sum(f.eigenvalues() / s2 / p) for f, p in zip(curv.jtj, precs)))
    g_lam = 0.5 * sizes - 0.5 * lam * norms - 0.5 * lam * tr_group
    g_s2 = -0.5 * nC + 0.5 * sse / s2 + 0.5 * tr_ggn
    return value, np.concatenate([g_lam, [g_s2]])


@dataclass
class TuneResult:
    curvature: CurvatureState
    evidence: float
    initial_evidence: float
    history: list


def tune_prior_precision(model, theta, curvature, X, Y, per_layer=None, tune_noise=True,
                         steps=100, lr=0.1, prior_bounds=PRIOR_BOUNDS, noise_bounds=NOISE_BOUNDS):
    """Maximize the Laplace evidence over log prior precision (and log noise).

    With ``per_layer`` the prior precision is one value per group of the
    curvature; otherwise all groups share a single value.
    """
    sse = _sse(model, theta, X, Y)
    n_groups = len(curvature.groups)
    if per_layer is None:
        per_layer = curvature.layerwise
    n_lam = n_groups if per_layer else 1

    def unpack(z):
        lam = np.exp(z[:n_lam]) if per_layer else np.full(n_groups, np.exp(z[0]))
        s2 = np.exp(z[n_lam]) if tune_noise else curvature.noise_var
        return lam, s2

    def objective(z):
        lam, s2 = unpack(z)
        curv = curvature.with_hyper(lam, s2)
        value, grad = _evidence_terms(model, theta, curv, X, Y, sse=sse)
        g_lam = grad[:-1] if per_layer else np.array([grad[:-1].sum()])
        g = np.concatenate([g_lam, [grad[-1]]]) if tune_noise else g_lam
        return value, g

    z0 = np.log(curvature.prior_prec[:n_lam]) if per_layer else np.log(curvature.prior_prec[:1])
    lower = [np.log(prior_bounds[0])] * n_lam
    upper = [np.log(prior_bounds[1])] * n_lam
    if tune_noise:
        z0 = np.append(z0, np.log(curvature.noise_var))
        lower.append(np.log(noise_bounds[0]))
        upper.append(np.log(noise_bounds[1]))
    z0 = np.clip(z0, lower, upper)
    initial, _ = objective(z0)
    if not np.isfinite(initial):
        raise FloatingPointError("non-finite evidence at the initial hyperparameters")
    best, value, history = adam_ascent(objective, z0, lr, steps, np.array(lower), np.array(upper))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite evidence during tuning")
    lam, s2 = unpack(best)
    return TuneResult(curvature.with_hyper(lam, s2), float(value), float(initial), history)


# --------------------------------------------------------------------------
# surrogate wrapper
# --------------------------------------------------------------------------


def _standardize_columns(Y):
    mu = Y.mean(axis=0)
    sd = Y.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (Y - mu) / sd, mu, sd


def dense_inputs(X):
    X = np.asarray(X)
    if X.dtype == np.uint64:
        return kernels.unpack_bits(X)
    return X.astype(np.float64)


class LaplaceSurrogate:
    """Two-hidden-layer MLP, MAP-trained, with a post-hoc linearized Laplace posterior."""

    name = "laplace_mlp"

    def __init__(self, hidden=(50, 50), activation="relu", structure="kfac", per_layer=False,
                 tune_noise="auto", prior_init=1.0, noise_init=0.1, tune_steps=100,
                 train=TrainConfig(), standardize=True, joint=None):
        self.hidden = tuple(hidden)
        self.activation = activation
        self.structure = structure
        self.per_layer = per_layer
        # joint noise tuning only with the full GGN; the KFAC and diagonal
        # log-determinants overstate curvature rank and inflate the noise
        self.tune_noise = (structure == "full") if tune_noise == "auto" else bool(tune_noise)
        self.prior_init = prior_init
        self.noise_init = noise_init
        self.tune_steps = tune_steps
        self.train = train
        self.standardize = standardize
        # joint sampling only where the full covariance is the faithful one
        self.joint = (structure == "full") if joint is None else joint

    def fit(self, X, Y, seed=0):
        X = dense_inputs(X)
        Y = _as_targets(Y)
        if self.standardize:
            Ys, self.y_mu, self.y_sd = _standardize_columns(Y)
        else:
            Ys, self.y_mu, self.y_sd = Y, np.zeros(Y.shape[1]), np.ones(Y.shape[1])
        self.model = MlpModel.regressor(X.shape[1], Y.shape[1], self.hidden, self.activation)
        theta0 = self.model.init_params(seed)
        res = train_map(self.model, theta0, X, Ys, replace(self.train, seed=seed))
        self.theta = res.theta
        curv = compute_ggn(self.model, self.theta, X, self.structure, self.noise_init,
                           self.prior_init, per_layer=self.per_layer)
        tuned = tune_prior_precision(self.model, self.theta, curv, X, Ys, per_layer=self.per_layer,
                                     tune_noise=self.tune_noise, steps=self.tune_steps)
        self.curvature = tuned.curvature
        return self

    def predict(self, X, full_cov=None):
        full_cov = self.joint if full_cov is None else full_cov
        post = lla_predict(self.model, self.theta, self.curvature, dense_inputs(X), full_cov=full_cov)
        sd = self.y_sd
        cov = None if post.covariances is None else post.covariances * (sd ** 2)[:, None, None]
        return PosteriorPredictive(post.means * sd + self.y_mu, post.variances * sd ** 2, cov)
