"""Desk-scale transformer regressor with LoRA adapters and a Laplace posterior.

The frozen base network: token + position embeddings, ``blocks`` post-LN
attention blocks (``Y = LN(X + Attn(X))``, no affine), mean pooling over
non-padding positions. Each attention block has per-head projections
``Q_i, K_i, V_i`` of shape ``(D, N)`` and an output map ``W_o (N, K*D)``::

    H_i = softmax((X Q_i^T)(X K_i^T)^T / sqrt(D)) (X V_i^T)
    O   = [H_1 .. H_K] W_o^T

Padding keys are masked out of the softmax, so padded positions never
influence real ones. A LoRA adapter on ``W_* (D, N)`` adds
``(alpha / rank) * B^T A`` with ``A (rank, N)`` and ``B (rank, D)``.

Only the adapters and the regression head are inferred; the base weights
condition the posterior and are never modified.

Tokenizer: printable ASCII byte ``b`` (32..126) maps to id ``b - 31``;
id 0 is padding.

Weight file (``MBOT``), all little-endian::

    b"MBOT" | u32 sections
    per section: u16 name_len | name (utf-8) | u8 ndim | ndim * u32 dims | float32 data
"""

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .laplace import CurvatureState, KfacFactors, _kfac_damp, tune_prior_precision
from .posterior import PosteriorPredictive

PAD = 0
VOCAB_SIZE = 96
MBOT_MAGIC = b"MBOT"
TARGETS = ("q", "k", "v")
NEG_INF = -1e30


class WeightFileError(ValueError):
    pass


def tokenize(strings, max_len=None):
    """Character tokens and a validity mask, padded to the longest string."""
    ids = []
    for s in strings:
        raw = s.encode("ascii")
        if any(b < 32 or b > 126 for b in raw):
            raise ValueError(f"non-printable character in {s!r}")
        if not raw:
            raise ValueError("empty string cannot be tokenized")
        ids.append([b - 31 for b in raw])
    T = max(len(t) for t in ids)
    if max_len is not None and T > max_len:
        raise ValueError(f"sequence of length {T} exceeds max_len={max_len}")
    tokens = np.zeros((len(ids), T), dtype=np.int64)
    for r, t in enumerate(ids):
        tokens[r, :len(t)] = t
    return tokens, tokens != PAD


# --------------------------------------------------------------------------
# configuration and weights
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformerConfig:
    dim: int = 32
    heads: int = 2
    head_dim: int = 16
    blocks: int = 2
    max_len: int = 64
    vocab: int = VOCAB_SIZE
    ln_eps: float = 1e-5


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple = ("k", "v")

    @property
    def scale(self):
        return self.alpha / self.rank


def init_base_weights(config, seed=0):
    """Random frozen base weights, rounded to float32 so files round-trip exactly."""
    rng = np.random.default_rng(seed)
    N, K, D = config.dim, config.heads, config.head_dim
    w = {
        "embed": rng.normal(0.0, 1.0, (config.vocab, N)),
        "pos": rng.normal(0.0, 0.1, (config.max_len, N)),
    }
    for l in range(config.blocks):
        for t in TARGETS:
            w[f"blocks.{l}.{t}"] = rng.normal(0.0, 1.0 / np.sqrt(N), (K, D, N))
        w[f"blocks.{l}.o"] = rng.normal(0.0, 1.0 / np.sqrt(K * D), (N, K * D))
    return {k: v.astype(np.float32).astype(np.float64) for k, v in w.items()}


def save_weights(path, weights):
    with open(path, "wb") as fh:
        fh.write(_serialize(weights))


def _serialize(weights):
    parts = [MBOT_MAGIC, struct.pack("<I", len(weights))]
    for name in sorted(weights):
        arr = np.asarray(weights[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_weights(path):
    data = open(path, "rb").read()
    if data[:4] != MBOT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(data):
                raise WeightFileError(f"{path}: truncated section {name!r}")
            out[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except struct.error as exc:
        raise WeightFileError(f"{path}: truncated file") from exc
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def weights_digest(weights):
    """sha256 over the canonical float32 serialization."""
    return hashlib.sha256(_serialize(weights)).hexdigest()


# --------------------------------------------------------------------------
# trainable parameters: adapters + head
# --------------------------------------------------------------------------


@dataclass
class PeftParams:
    """Adapters ``A[(block, target)]`` of shape (K, rank, N), ``B`` of shape
    (K, rank, D), and the head block ``[w | b]`` of shape (C, N + 1)."""

    A: dict
    B: dict
    head: np.ndarray

    def keys(self):
        return sorted(self.A)

    def copy(self):
        return PeftParams({k: v.copy() for k, v in self.A.items()},
                          {k: v.copy() for k, v in self.B.items()}, self.head.copy())


def _adapter_keys(config, adapters):
    return [(l, t) for l in range(config.blocks) for t in TARGETS if t in adapters.targets]


def init_peft(config, adapters, n_outputs, seed):
    rng = np.random.default_rng(seed)
    N, K, D, Z = config.dim, config.heads, config.head_dim, adapters.rank
    A, B = {}, {}
    bound = 1.0 / np.sqrt(N)
    for key in _adapter_keys(config, adapters):
        A[key] = rng.uniform(-bound, bound, (K, Z, N))
        B[key] = np.zeros((K, Z, D))
    head = rng.uniform(-bound, bound, (n_outputs, N + 1))
    return PeftParams(A, B, head)


def param_groups(config, adapters, n_outputs):
    """(name, out, in) per Kronecker block, in flat-vector order.

    For every adapted matrix: ``A`` as (rank, N), then ``B^T`` as (D, rank);
    the head block comes last.
    """
    N, K, D, Z = config.dim, config.heads, config.head_dim, adapters.rank
    groups = []
    for (l, t) in _adapter_keys(config, adapters):
        for i in range(K):
            groups.append((("A", l, t, i), Z, N))
            groups.append((("B", l, t, i), D, Z))
    groups.append((("head",), n_outputs, N + 1))
    return groups


def flatten(params, config, adapters):
    parts = []
    for (l, t) in _adapter_keys(config, adapters):
        for i in range(config.heads):
            parts.append(params.A[(l, t)][i].ravel())
            parts.append(params.B[(l, t)][i].T.ravel())
    parts.append(params.head.ravel())
    return np.concatenate(parts)


def unflatten(theta, config, adapters, n_outputs):
    N, K, D, Z = config.dim, config.heads, config.head_dim, adapters.rank
    pos = 0
    A, B = {}, {}
    for key in _adapter_keys(config, adapters):
        A[key] = np.empty((K, Z, N))
        B[key] = np.empty((K, Z, D))
        for i in range(K):
            A[key][i] = theta[pos:pos + Z * N].reshape(Z, N)
            pos += Z * N
            B[key][i] = theta[pos:pos + D * Z].reshape(D, Z).T
            pos += D * Z
    head = theta[pos:pos + n_outputs * (N + 1)].reshape(n_outputs, N + 1).copy()
    return PeftParams(A, B, head)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def attention_forward(X, Q, Kw, V, Wo, key_mask=None):
    """One multi-head attention map for a single sequence ``X (T, N)``.

    ``Q, Kw, V`` are (heads, D, N); ``Wo`` is (O, heads*D).
    """
    X = np.asarray(X, dtype=np.float64)
    heads, D, N = Q.shape
    if X.ndim != 2 or X.shape[1] != N or Kw.shape != Q.shape or V.shape != Q.shape:
        raise ValueError("attention input shapes do not conform")
    if Wo.shape[1] != heads * D:
        raise ValueError("output projection does not match stacked heads")
    Hs = []
    for i in range(heads):
        S = (X @ Q[i].T) @ (X @ Kw[i].T).T / np.sqrt(D)
        if key_mask is not None:
            S = np.where(key_mask[None, :], S, NEG_INF)
        Hs.append(_softmax(S) @ (X @ V[i].T))
    return np.hstack(Hs) @ Wo.T


def _softmax(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def apply_lora(W, A, B, scale=1.0):
    """Effective weight ``W + scale * B^T A``."""
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError("A and B must be (rank, in) and (rank, out)")
    if W.shape != (B.shape[1], A.shape[1]):
        raise ValueError(f"W has shape {W.shape}, adapter implies {(B.shape[1], A.shape[1])}")
    return W + scale * (B.T @ A)


@dataclass
class _Cache:
    tokens: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    blocks: list = field(default_factory=list)
    pooled: np.ndarray = None


class ToyTransformer:
    """Frozen base network plus adapter plumbing; holds no trainable state."""

    def __init__(self, base_weights, config=TransformerConfig(), adapters=AdapterConfig(),
                 n_outputs=1):
        self.config = config
        self.adapters = adapters
        self.n_outputs = n_outputs
        self.base = {k: np.array(v, dtype=np.float64) for k, v in base_weights.items()}
        for v in self.base.values():
            v.setflags(write=False)
        self.base_digest = weights_digest(self.base)
        self._check_shapes()

    def _check_shapes(self):
        c = self.config
        expect = {"embed": (c.vocab, c.dim), "pos": (c.max_len, c.dim)}
        for l in range(c.blocks):
            for t in TARGETS:
                expect[f"blocks.{l}.{t}"] = (c.heads, c.head_dim, c.dim)
            expect[f"blocks.{l}.o"] = (c.dim, c.heads * c.head_dim)
        for name, shape in expect.items():
            if name not in self.base or self.base[name].shape != shape:
                got = self.base.get(name, np.empty(0)).shape
                raise WeightFileError(f"base weight {name!r}: expected {shape}, got {got}")

    @property
    def adapter_keys(self):
        return _adapter_keys(self.config, self.adapters)

    def groups(self):
        return param_groups(self.config, self.adapters, self.n_outputs)

    def n_trainable(self):
        return sum(o * i for _, o, i in self.groups())

    def n_base(self):
        return sum(v.size for v in self.base.values())

    def init_params(self, seed):
        return init_peft(self.config, self.adapters, self.n_outputs, seed)

    def flatten(self, params):
        return flatten(params, self.config, self.adapters)

    def unflatten(self, theta):
        return unflatten(theta, self.config, self.adapters, self.n_outputs)

    # -- forward -----------------------------------------------------------

    def features(self, tokens, mask, params, rng=None, cache=False):
        """Pooled last-block output, ``(B, N)``."""
        c = self.config
        s = self.adapters.scale
        p_drop = self.adapters.dropout if rng is not None else 0.0
        Bn, T = tokens.shape
        if T > c.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len={c.max_len}")
        lengths = mask.sum(axis=1)
        if np.any(lengths == 0):
            raise ValueError("every sequence needs at least one non-padding token")
        X = self.base["embed"][tokens] + self.base["pos"][:T][None]
        store = _Cache(tokens, mask, lengths) if cache else None
        key_bias = np.where(mask, 0.0, NEG_INF)[:, None, :]
        sqrt_d = np.sqrt(c.head_dim)
        for l in range(c.blocks):
            blk = {"X": X, "heads": []}
            Hs = []
            for i in range(c.heads):
                hd = {}
                proj = {}
                for t in TARGETS:
                    out = X @ self.base[f"blocks.{l}.{t}"][i].T
                    if (l, t) in params.A:
                        if p_drop > 0.0:
                            keep = (rng.random(X.shape) >= p_drop) / (1.0 - p_drop)
                            Xd = X * keep
                        else:
                            keep = None
                            Xd = X
                        U = Xd @ params.A[(l, t)][i].T
                        out = out + s * (U @ params.B[(l, t)][i])
                        hd[t + "_U"] = U
                        hd[t + "_keep"] = keep
                    proj[t] = out
                S = np.einsum("btd,bsd->bts", proj["q"], proj["k"]) / sqrt_d + key_bias
                Att = _softmax(S)
                H = Att @ proj["v"]
                Hs.append(H)
                hd.update(proj)
                hd["att"] = Att
                blk["heads"].append(hd)
            Hcat = np.concatenate(Hs, axis=-1)
            Zr = X + Hcat @ self.base[f"blocks.{l}.o"].T
            mu = Zr.mean(axis=-1, keepdims=True)
            var = Zr.var(axis=-1, keepdims=True)
            rstd = 1.0 / np.sqrt(var + c.ln_eps)
            X = (Zr - mu) * rstd
            blk["Hcat"] = Hcat
            blk["Y"] = X
            blk["rstd"] = rstd
            if cache:
                store.blocks.append(blk)
        pooled = (X * mask[..., None]).sum(axis=1) / lengths[:, None]
        if cache:
            store.pooled = pooled
            return pooled, store
        return pooled

    def forward(self, tokens, mask, params, rng=None):
        pooled = self.features(tokens, mask, params, rng)
        return pooled @ params.head[:, :-1].T + params.head[:, -1]

    def base_forward(self, tokens, mask, head):
        """Outputs of the unadapted base network under a given head."""
        empty = PeftParams({}, {}, head)
        return self.features(tokens, mask, empty) @ head[:, :-1].T + head[:, -1]

    # -- backward ----------------------------------------------------------

    def backward(self, params, store, d_out, per_sample=False, kfac=None):
        """Gradients of ``sum(d_out * outputs)`` wrt adapters and head.

        With ``per_sample`` every gradient keeps a leading batch axis, which
        is how Jacobians are built. ``kfac`` (a dict) collects the input
        activations and output gradients of every Kronecker block: one row
        per valid token for adapters, one row per sequence for the head.
        """
        c = self.config
        s = self.adapters.scale
        sqrt_d = np.sqrt(c.head_dim)
        pooled = store.pooled
        Bn = pooled.shape[0]
        aug = np.hstack([pooled, np.ones((Bn, 1))])
        if per_sample:
            g_head = np.einsum("bc,bn->bcn", d_out, aug)
        else:
            g_head = d_out.T @ aug
        if kfac is not None:
            kfac[("head",)] = (aug, d_out)
        d_pooled = d_out @ params.head[:, :-1]
        mask = store.mask
        dY = d_pooled[:, None, :] * (mask / store.lengths[:, None])[..., None]
        gA, gB = {}, {}
        for l in range(c.blocks - 1, -1, -1):
            blk = store.blocks[l]
            Y, rstd = blk["Y"], blk["rstd"]
            dZ = rstd * (dY - dY.mean(axis=-1, keepdims=True)
                         - Y * (dY * Y).mean(axis=-1, keepdims=True))
            dX = dZ.copy()
            dHcat = dZ @ self.base[f"blocks.{l}.o"]
            X = blk["X"]
            for i in range(c.heads):
                hd = blk["heads"][i]
                dH = dHcat[..., i * c.head_dim:(i + 1) * c.head_dim]
                Att = hd["att"]
                dAtt = dH @ np.swapaxes(hd["v"], 1, 2)
                dproj = {"v": np.swapaxes(Att, 1, 2) @ dH}
                dS = Att * (dAtt - np.sum(dAtt * Att, axis=-1, keepdims=True)) / sqrt_d
                dproj["q"] = dS @ hd["k"]
                dproj["k"] = np.swapaxes(dS, 1, 2) @ hd["q"]
                for t in TARGETS:
                    dP = dproj[t]
                    dX += dP @ self.base[f"blocks.{l}.{t}"][i]
                    if (l, t) not in params.A:
                        continue
                    A_i = params.A[(l, t)][i]
                    B_i = params.B[(l, t)][i]
                    U = hd[t + "_U"]
                    keep = hd[t + "_keep"]
                    Xd = X if keep is None else X * keep
                    dU = s * (dP @ B_i.T)
                    dXd = dU @ A_i
                    dX += dXd if keep is None else dXd * keep
                    if per_sample:
                        ga = np.einsum("btz,btn->bzn", dU, Xd)
                        gb = s * np.einsum("btz,btd->bzd", U, dP)
                    else:
                        ga = np.einsum("btz,btn->zn", dU, Xd)
                        gb = s * np.einsum("btz,btd->zd", U, dP)
                    gA.setdefault((l, t), {})[i] = ga
                    gB.setdefault((l, t), {})[i] = gb
                    if kfac is not None:
                        # expand: every valid token is one sample of the shared weight
                        kfac[("A", l, t, i)] = (Xd[mask], dU[mask])
                        kfac[("B", l, t, i)] = ((s * U)[mask], dP[mask])
            dY = dX
        return gA, gB, g_head

    def gradient(self, params, store, d_out):
        """Summed gradient as a PeftParams-shaped object."""
        gA, gB, g_head = self.backward(params, store, d_out)
        A = {k: np.stack([gA[k][i] for i in range(self.config.heads)]) for k in gA}
        B = {k: np.stack([gB[k][i] for i in range(self.config.heads)]) for k in gB}
        return PeftParams(A, B, g_head)

    def jacobian(self, tokens, mask, params, kfac=None):
        """Outputs ``(B, C)`` and per-sample Jacobians ``(B, C, P_hat)``."""
        pooled, store = self.features(tokens, mask, params, cache=True)
        out = pooled @ params.head[:, :-1].T + params.head[:, -1]
        Bn, C = out.shape
        J = np.empty((Bn, C, self.n_trainable()))
        stats = {}
        for c in range(C):
            d_out = np.zeros((Bn, C))
            d_out[:, c] = 1.0
            collect = {} if kfac is not None else None
            gA, gB, g_head = self.backward(params, store, d_out, per_sample=True, kfac=collect)
            parts = []
            for key in self.adapter_keys:
                for i in range(self.config.heads):
                    parts.append(gA[key][i].reshape(Bn, -1))
                    parts.append(np.swapaxes(gB[key][i], 1, 2).reshape(Bn, -1))
            parts.append(g_head.reshape(Bn, -1))
            J[:, c, :] = np.hstack(parts)
            if kfac is not None:
                for name, (a, g) in collect.items():
                    stats.setdefault(name, [a, []])[1].append(g)
        if kfac is not None:
            kfac.update(stats)
        return out, J


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PeftTrainConfig:
    batch_size: int = 16
    lr_adapter: float = 3e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 50
    head_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _AdamW:
    def __init__(self, lr, cfg):
        self.lr = lr
        self.cfg = cfg
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x, g):
        c = self.cfg
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        x = x * (1.0 - self.lr * c.weight_decay)
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + c.eps)


@dataclass
class PeftTrainResult:
    params: PeftParams
    losses: list


def _mse(out, Y):
    return float(np.mean((out - Y) ** 2))


def train_peft_map(model, params, tokens, mask, Y, config=PeftTrainConfig(), seed=0):
    """Joint AdamW on adapters + head, then head-only refinement.

    Loss is the batch mean squared error. Dropout on the adapter path is
    active in the joint phase only; the head-only phase trains on the
    (deterministic) pooled features of the frozen adapted network.
    """
    Y = np.asarray(Y, dtype=np.float64)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n = len(Y)
    rng = np.random.default_rng(seed)
    params = params.copy()
    n_head = params.head.size
    opt_ad = _AdamW(config.lr_adapter, config)
    opt_head = _AdamW(config.lr_head, config)
    keys = model.adapter_keys
    losses = [_mse(model.forward(tokens, mask, params), Y)]

    def pack_adapters(p):
        if not keys:
            return np.empty(0)
        return np.concatenate([np.concatenate([p.A[k].ravel(), p.B[k].ravel()]) for k in keys])

    def unpack_adapters(vec, p):
        pos = 0
        for k in keys:
            a = p.A[k].size
            p.A[k] = vec[pos:pos + a].reshape(p.A[k].shape)
            pos += a
            b = p.B[k].size
            p.B[k] = vec[pos:pos + b].reshape(p.B[k].shape)
            pos += b

    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tok, msk = _trim(tokens[idx], mask[idx])
            pooled, store = model.features(tok, msk, params, rng=rng, cache=True)
            out = pooled @ params.head[:, :-1].T + params.head[:, -1]
            resid = out - Y[idx]
            total += float(np.sum(resid ** 2))
            d_out = 2.0 * resid / resid.size
            grad = model.gradient(params, store, d_out)
            if keys:
                vec = opt_ad.step(pack_adapters(params), pack_adapters(grad))
                unpack_adapters(vec, params)
            params.head = opt_head.step(params.head.ravel(), grad.head.ravel()).reshape(params.head.shape)
        loss = total / Y.size
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss in joint phase at epoch {len(losses) - 1}")
        losses.append(loss)

    feats = model.features(tokens, mask, params)
    aug = np.hstack([feats, np.ones((n, 1))])
    opt_head = _AdamW(config.lr_head, config)
    for _ in range(config.head_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            resid = aug[idx] @ params.head.T - Y[idx]
            total += float(np.sum(resid ** 2))
            g = 2.0 * resid.T @ aug[idx] / resid.size
            params.head = opt_head.step(params.head.ravel(), g.ravel()).reshape(params.head.shape)
        loss = total / Y.size
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss in head phase at epoch {len(losses) - 1}")
        losses.append(loss)
    return PeftTrainResult(params, losses)


def _trim(tokens, mask):
    T = int(mask.sum(axis=1).max())
    return tokens[:, :T], mask[:, :T]


# --------------------------------------------------------------------------
# Laplace over {adapters, head}
# --------------------------------------------------------------------------


@dataclass
class PeftPosterior:
    """Laplace posterior over adapter and head weights, conditioned on the base weights."""

    theta: np.ndarray
    curvature: CurvatureState
    base_digest: str
    evidence: float = None

    def save(self, path):
        arrays = {"theta": self.theta, "prior_prec": self.curvature.prior_prec,
                  "noise_var": np.array(self.curvature.noise_var),
                  "base_digest": np.array(self.base_digest)}
        for k, f in enumerate(self.curvature.jtj):
            arrays[f"kfac_A_{k}"] = f.A
            arrays[f"kfac_G_{k}"] = f.G
        np.savez(path, **arrays)


def _kfac_from_stats(model, stats):
    # A = sum a a^T, G = sum g g^T / rows; exact for the head, where rows = n
    factors = []
    for name, out_dim, in_dim in model.groups():
        a, gs = stats[name]
        A = a.T @ a
        G = sum(g.T @ g for g in gs) / len(a)
        factors.append(KfacFactors(_kfac_damp(A), _kfac_damp(G)).decompose())
    return factors


def peft_laplace(model, params, tokens, mask, Y, noise_var=0.1, prior_prec=1.0,
                 tune_steps=200, tune_noise=False, lr=0.1):
    """KFAC Laplace over adapters + head with layerwise prior precisions."""
    Y = np.asarray(Y, dtype=np.float64)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n = len(Y)
    stats = {}
    model.jacobian(tokens, mask, params, kfac=stats)
    factors = _kfac_from_stats(model, stats)
    slices, start = [], 0
    for _, o, i in model.groups():
        slices.append(slice(start, start + o * i))
        start += o * i
    curv = CurvatureState("kfac", factors, slices, float(noise_var),
                          np.full(len(slices), float(prior_prec)), n, model.n_outputs,
                          layerwise=True)
    theta = model.flatten(params)
    linear = _FlatModel(model, tokens, mask)
    evidence = None
    if tune_steps > 0:
        res = tune_prior_precision(linear, theta, curv, None, Y, per_layer=True,
                                   tune_noise=tune_noise, steps=tune_steps, lr=lr)
        curv = res.curvature
        evidence = res.evidence
    return PeftPosterior(theta, curv, model.base_digest, evidence)


class _FlatModel:
    """Adapter exposing ``forward(theta, X)`` for the evidence code."""

    def __init__(self, model, tokens, mask):
        self.model = model
        self.tokens = tokens
        self.mask = mask

    def forward(self, theta, X=None):
        return self.model.forward(self.tokens, self.mask, self.model.unflatten(theta))


def peft_predict(model, posterior, tokens, mask, full_cov=False, batch=256):
    params = model.unflatten(posterior.theta)
    means, Ms = [], []
    for start in range(0, len(tokens), batch):
        tok, msk = _trim(tokens[start:start + batch], mask[start:start + batch])
        out, J = model.jacobian(tok, msk, params)
        means.append(out)
        Ms.append(np.stack([posterior.curvature.whiten(J[:, c, :]) for c in range(out.shape[1])]))
    mean = np.vstack(means)
    M = np.concatenate(Ms, axis=1)  # (C, n, P)
    var = np.einsum("cnp,cnp->nc", M, M)
    cov = np.einsum("cnp,cmp->cnm", M, M) if full_cov else None
    return PosteriorPredictive(mean, var, cov)


# --------------------------------------------------------------------------
# surrogate wrapper
# --------------------------------------------------------------------------


class LoraSurrogate:
    """Re-initialized and re-trained every ``fit`` call (no warm start by default)."""

    name = "lora_transformer"

    def __init__(self, base_weights, config=TransformerConfig(), adapters=AdapterConfig(),
                 train=PeftTrainConfig(), noise_init=0.1, prior_init=1.0, tune_steps=200,
                 tune_noise=False, standardize=True, warm_start=False):
        self.base_weights = base_weights
        self.config = config
        self.adapters = adapters
        self.train = train
        self.noise_init = noise_init
        self.prior_init = prior_init
        self.tune_steps = tune_steps
        self.tune_noise = tune_noise
        self.standardize = standardize
        self.warm_start = warm_start
        self._params = None
        self.model = None

    def fit(self, strings, Y, seed=0):
        Y = np.asarray(Y, dtype=np.float64)
        Y = Y[:, None] if Y.ndim == 1 else Y
        if self.model is None or self.model.n_outputs != Y.shape[1]:
            self.model = ToyTransformer(self.base_weights, self.config, self.adapters, Y.shape[1])
            self._params = None
        if self.standardize:
            self.y_mu = Y.mean(axis=0)
            sd = Y.std(axis=0)
            self.y_sd = np.where(sd < 1e-12, 1.0, sd)
        else:
            self.y_mu, self.y_sd = np.zeros(Y.shape[1]), np.ones(Y.shape[1])
        Ys = (Y - self.y_mu) / self.y_sd
        tokens, mask = tokenize(strings, self.config.max_len)
        start = self._params if (self.warm_start and self._params is not None) \
            else self.model.init_params(seed)
        res = train_peft_map(self.model, start, tokens, mask, Ys, self.train, seed)
        self._params = res.params
        self.posterior = peft_laplace(self.model, res.params, tokens, mask, Ys, self.noise_init,
                                      self.prior_init, self.tune_steps, self.tune_noise)
        return self

    def predict(self, strings, full_cov=False):
        tokens, mask = tokenize(strings, self.config.max_len)
        post = peft_predict(self.model, self.posterior, tokens, mask, full_cov)
        sd = self.y_sd
        cov = None if post.covariances is None else post.covariances * (sd ** 2)[:, None, None]
        return PosteriorPredictive(post.means * sd + self.y_mu, post.variances * sd ** 2, cov)
