"""GAP, Pareto fronts and hypervolume (maximization convention throughout).

GAP_t = (incumbent_t - y_init_best) / (y_opt - y_init_best), taken as 1 when
the denominator vanishes. ``y_init_best`` is the best value in the initial
design by default; ``baseline="first"`` uses the first observation instead.
"""

import numpy as np


class HypervolumeError(ValueError):
    pass


def gap(incumbents, y_opt, y_init_best):
    inc = np.asarray(incumbents, dtype=np.float64)
    denom = y_opt - y_init_best
    if denom == 0:
        return np.ones_like(inc)
    return (inc - y_init_best) / denom


def dominates(a, b):
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points):
    """Non-dominated subset (duplicates collapsed), sorted lexicographically."""
    pts = np.unique(np.atleast_2d(np.asarray(points, dtype=np.float64)), axis=0)
    if pts.shape[0] == 0:
        return pts
    order = np.lexsort(pts.T[::-1])[::-1]  # lexicographically descending
    kept = []
    for i in order:
        p = pts[i]
        if not any(np.all(q >= p) for q in kept):
            kept.append(p)
    front = np.array(kept)
    return front[np.lexsort(front.T[::-1])]


def _hv2d(front, ref):
    # front: non-dominated, sorted by first objective descending
    hv = 0.0
    prev_y = ref[1]
    for x, y in front:
        if y > prev_y:
            hv += (x - ref[0]) * (y - prev_y)
            prev_y = y
    return hv


def hypervolume(points, ref):
    """Lebesgue measure dominated by ``points`` and bounded below by ``ref``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = np.asarray(ref, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    C = pts.shape[1]
    if C not in (2, 3) or ref.shape != (C,):
        raise HypervolumeError("hypervolume supports 2 or 3 objectives with a matching reference")
    if np.any(pts < ref):
        raise HypervolumeError("every point must dominate the reference point")
    front = pareto_front(pts)
    if C == 2:
        return _hv2d(front[np.argsort(-front[:, 0], kind="stable")], ref)
    # slice along the third objective
    levels = np.unique(front[:, 2])[::-1]
    hv = 0.0
    for k, z in enumerate(levels):
        below = levels[k + 1] if k + 1 < len(levels) else ref[2]
        layer = pareto_front(front[front[:, 2] >= z][:, :2])
        layer = layer[np.argsort(-layer[:, 0], kind="stable")]
        hv += (z - below) * _hv2d(layer, ref[:2])
    return hv


def reference_point(objectives):
    """Componentwise pool minimum minus 1% of the range."""
    Y = np.atleast_2d(np.asarray(objectives, dtype=np.float64))
    lo = Y.min(axis=0)
    span = Y.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return lo - 0.01 * span


def hypervolume_curve(values, ref):
    """Hypervolume of the growing observation prefix ``values[:k+1]``."""
    values = np.asarray(values, dtype=np.float64)
    return np.array([hypervolume(values[:k + 1], ref) for k in range(len(values))])
