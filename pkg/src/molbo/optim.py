"""Adam ascent for the small hyperparameter problems (GP evidence, Laplace evidence)."""

import numpy as np


def adam_ascent(fn, x0, lr, steps, lower=None, upper=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Maximize ``fn`` (returning value, gradient) with Adam in a box.

    Returns ``(best_x, best_value, history)``. The best iterate seen is kept,
    so the result never scores below the starting point.
    """
    x = np.array(x0, dtype=np.float64)
    lower = np.full_like(x, -np.inf) if lower is None else np.broadcast_to(lower, x.shape)
    upper = np.full_like(x, np.inf) if upper is None else np.broadcast_to(upper, x.shape)
    x = np.clip(x, lower, upper)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_val = x.copy(), -np.inf
    history = []
    for step in range(1, steps + 1):
        val, grad = fn(x)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            if step == 1:
                raise FloatingPointError("objective is non-finite at the starting point")
            break
        history.append(val)
        if val > best_val:
            best_x, best_val = x.copy(), val
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1 ** step)
        vhat = v / (1 - beta2 ** step)
        x = np.clip(x + lr * mhat / (np.sqrt(vhat) + eps), lower, upper)
    val, _ = fn(x)
    if np.isfinite(val):
        history.append(val)
        if val > best_val:
            best_x, best_val = x.copy(), val
    return best_x, best_val, history
