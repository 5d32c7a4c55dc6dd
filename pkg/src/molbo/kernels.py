"""Hot numeric kernels.

Every kernel exists twice: a numba-compiled version and a pure-numpy
version. The public wrappers dispatch on :data:`molbo._accel.USE_NUMBA`;
both variants are importable so the benchmark and the tests can compare them.
"""

import math

import numpy as np

from . import _accel
from ._accel import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


# --------------------------------------------------------------------------
# Tanimoto Gram matrix over packed bit vectors
# --------------------------------------------------------------------------


@njit
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit
def _tanimoto_gram_numba(a, b):
    n, words = a.shape
    m = b.shape[0]
    ca = np.zeros(n, dtype=np.int64)
    cb = np.zeros(m, dtype=np.int64)
    for i in range(n):
        for w in range(words):
            ca[i] += np.int64(_popcount64(a[i, w]))
    for j in range(m):
        for w in range(words):
            cb[j] += np.int64(_popcount64(b[j, w]))
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            inter = 0
            for w in range(words):
                inter += np.int64(_popcount64(a[i, w] & b[j, w]))
            union = ca[i] + cb[j] - inter
            out[i, j] = 1.0 if union == 0 else inter / union
    return out


def unpack_bits(packed):
    """Packed uint64 fingerprints as dense 0/1 float rows."""
    as_bytes = np.ascontiguousarray(packed).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little").astype(np.float64)


def _tanimoto_gram_numpy(a, b):
    fa = unpack_bits(a)
    fb = unpack_bits(b)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union == 0, 1.0, inter / np.where(union == 0, 1.0, union))
    return out


def tanimoto_gram(a, b):
    """Tanimoto similarities between rows of two packed ``uint64`` bit matrices."""
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"packed fingerprint widths differ: {a.shape} vs {b.shape}")
    if _accel.USE_NUMBA:
        return _tanimoto_gram_numba(a, b)
    return _tanimoto_gram_numpy(a, b)


# --------------------------------------------------------------------------
# Squared Euclidean distances
# --------------------------------------------------------------------------


@njit
def _sqdist_numba(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                s += diff * diff
            out[i, j] = s
    return out


def _sqdist_numpy(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sqdist(a, b):
    """Pairwise squared Euclidean distances, exact (no expansion trick)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if _accel.USE_NUMBA:
        return _sqdist_numba(a, b)
    return _sqdist_numpy(a, b)


# --------------------------------------------------------------------------
# MLP forward/backward and the Adam training loop
#
# Parameters live in one flat vector. Layer l owns an augmented block
# [W | b] of shape (fan_out, fan_in + bias), stored row-major.
# act: 0 = relu, 1 = tanh (hidden layers only; output layer is linear).
# --------------------------------------------------------------------------


def _mlp_loss_grad(theta, widths, act, bias, X, Y, noise_var):
    n_layers = widths.shape[0] - 1
    nb = 1 if bias else 0
    offsets = np.zeros(n_layers + 1, dtype=np.int64)
    for l in range(n_layers):
        offsets[l + 1] = offsets[l] + widths[l + 1] * (widths[l] + nb)

    hs = [X]
    h = X
    for l in range(n_layers):
        fan_in = widths[l]
        fan_out = widths[l + 1]
        Wa = theta[offsets[l]:offsets[l + 1]].reshape(fan_out, fan_in + nb)
        W = np.ascontiguousarray(Wa[:, :fan_in])
        z = h @ W.T
        if bias:
            z = z + Wa[:, fan_in]
        if l < n_layers - 1:
            if act == 0:
                h = np.maximum(z, 0.0)
            else:
                h = np.tanh(z)
        else:
            h = z
        hs.append(h)

    b = X.shape[0]
    resid = hs[n_layers] - Y
    loss = 0.5 * np.sum(resid * resid) / (b * noise_var)
    delta = resid / (b * noise_var)
    grad = np.zeros_like(theta)
    for l in range(n_layers - 1, -1, -1):
        fan_in = widths[l]
        fan_out = widths[l + 1]
        Wa = theta[offsets[l]:offsets[l + 1]].reshape(fan_out, fan_in + nb)
        gWa = grad[offsets[l]:offsets[l + 1]].reshape(fan_out, fan_in + nb)
        gWa[:, :fan_in] = delta.T @ hs[l]
        if bias:
            gWa[:, fan_in] = delta.sum(axis=0)
        if l > 0:
            W = np.ascontiguousarray(Wa[:, :fan_in])
            delta = delta @ W
            if act == 0:
                delta = delta * (hs[l] > 0.0)
            else:
                delta = delta * (1.0 - hs[l] * hs[l])
    return loss, grad


def _mlp_adam_numpy(theta, widths, act, bias, X, Y, perms, batch_size, lr, noise_var,
                    decay, beta1, beta2, eps):
    epochs = perms.shape[0]
    n = X.shape[0]
    theta = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = np.empty(epochs)
    step = 0
    for e in range(epochs):
        lr_e = 0.5 * lr * (1.0 + math.cos(math.pi * e / epochs))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perms[e, start:start + batch_size]
            loss, g = _mlp_loss_grad(theta, widths, act, bias, X[idx], Y[idx], noise_var)
            loss += 0.5 * decay * np.dot(theta, theta)
            g = g + decay * theta
            step += 1
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            mhat = m / (1.0 - beta1 ** step)
            vhat = v / (1.0 - beta2 ** step)
            theta = theta - lr_e * mhat / (np.sqrt(vhat) + eps)
            total += loss * idx.shape[0]
        losses[e] = total / n
        if not np.isfinite(losses[e]):
            return theta, losses[:e + 1]
    return theta, losses


_mlp_loss_grad_numba = njit(_mlp_loss_grad)


# Same loop as above; numba cannot cache closures, so the jitted twin is
# spelled out to call the jitted loss.
@njit
def _mlp_adam_numba(theta, widths, act, bias, X, Y, perms, batch_size, lr, noise_var,
                    decay, beta1, beta2, eps):
    epochs = perms.shape[0]
    n = X.shape[0]
    theta = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = np.empty(epochs)
    step = 0
    for e in range(epochs):
        lr_e = 0.5 * lr * (1.0 + math.cos(math.pi * e / epochs))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perms[e, start:start + batch_size]
            loss, g = _mlp_loss_grad_numba(theta, widths, act, bias, X[idx], Y[idx], noise_var)
            loss += 0.5 * decay * np.dot(theta, theta)
            g = g + decay * theta
            step += 1
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            mhat = m / (1.0 - beta1 ** step)
            vhat = v / (1.0 - beta2 ** step)
            theta = theta - lr_e * mhat / (np.sqrt(vhat) + eps)
            total += loss * idx.shape[0]
        losses[e] = total / n
        if not np.isfinite(losses[e]):
            return theta, losses[:e + 1]
    return theta, losses


def mlp_loss_grad(theta, widths, act, bias, X, Y, noise_var):
    """Batch loss ``sum ||y - g||^2 / (2 b noise_var)`` and its gradient."""
    fn = _mlp_loss_grad_numba if _accel.USE_NUMBA else _mlp_loss_grad
    return fn(np.ascontiguousarray(theta, dtype=np.float64), np.asarray(widths, dtype=np.int64),
              int(act), bool(bias), np.ascontiguousarray(X, dtype=np.float64),
              np.ascontiguousarray(Y, dtype=np.float64), float(noise_var))


def mlp_adam(theta, widths, act, bias, X, Y, perms, batch_size, lr, noise_var, decay,
             beta1=0.9, beta2=0.999, eps=1e-8):
    """Minibatch Adam with cosine-annealed learning rate.

    ``perms`` holds one row-permutation of the data per epoch, so the numba
    and numpy paths consume identical batches. ``decay`` adds
    ``decay/2 * ||theta||^2`` to every batch loss. Returns the final
    parameters and the mean loss per epoch (truncated at the first
    non-finite epoch).
    """
    fn = _mlp_adam_numba if _accel.USE_NUMBA else _mlp_adam_numpy
    return fn(np.ascontiguousarray(theta, dtype=np.float64), np.asarray(widths, dtype=np.int64),
              int(act), bool(bias), np.ascontiguousarray(X, dtype=np.float64),
              np.ascontiguousarray(Y, dtype=np.float64), np.ascontiguousarray(perms, dtype=np.int64),
              int(batch_size), float(lr), float(noise_var), float(decay),
              float(beta1), float(beta2), float(eps))
