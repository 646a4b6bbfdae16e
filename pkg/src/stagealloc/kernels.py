"""Hot inner loops, each with a numba path and a pure-numpy path.

The public functions dispatch on :data:`stagealloc._accel.USE_NUMBA`; the
``*_numba`` / ``*_numpy`` variants stay importable so tests and the benchmark
can run both on identical inputs.
"""

import numpy as np

from stagealloc import _accel
from stagealloc._accel import njit


# --------------------------------------------------------------------------
# pool adjacent violators


def _pav_loop(y, w):
    n = y.shape[0]
    vals = np.empty(n)
    wts = np.empty(n)
    sizes = np.empty(n, dtype=np.int64)
    top = -1
    for i in range(n):
        top += 1
        vals[top] = y[i]
        wts[top] = w[i]
        sizes[top] = 1
        while top > 0 and vals[top - 1] > vals[top]:
            tw = wts[top - 1] + wts[top]
            vals[top - 1] = (wts[top - 1] * vals[top - 1] + wts[top] * vals[top]) / tw
            wts[top - 1] = tw
            sizes[top - 1] += sizes[top]
            top -= 1
    out = np.empty(n)
    pos = 0
    for b in range(top + 1):
        for _ in range(sizes[b]):
            out[pos] = vals[b]
            pos += 1
    return out


pav_numba = njit(_pav_loop)


def pav_numpy(y, w):
    # PAV is inherently sequential; the fallback is the interpreted loop.
    return _pav_loop(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))


def pav(y, w=None):
    """Weighted least-squares non-decreasing fit of ``y`` (in given order)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.ascontiguousarray(w, dtype=np.float64)
    if _accel.USE_NUMBA:
        return pav_numba(y, w)
    return pav_numpy(y, w)


# --------------------------------------------------------------------------
# greedy quota-constrained assignment


def _greedy_loop(req, act, quota, n_requests):
    remaining = quota.copy()
    assigned = np.full(n_requests, -1, dtype=np.int64)
    left = n_requests
    for j in range(req.shape[0]):
        if left == 0:
            break
        r = req[j]
        a = act[j]
        if assigned[r] < 0 and remaining[a] > 0:
            assigned[r] = a
            remaining[a] -= 1
            left -= 1
    return assigned


greedy_numba = njit(_greedy_loop)


def greedy_numpy(req, act, quota, n_requests):
    return _greedy_loop(req, act, quota, n_requests)


def greedy_order(q):
    """Visit order of (request, action) pairs: Q descending, then request, then action."""
    m, a = q.shape
    req = np.repeat(np.arange(m, dtype=np.int64), a)
    act = np.tile(np.arange(a, dtype=np.int64), m)
    order = np.lexsort((act, req, -q.ravel()))
    return req[order], act[order]


def greedy_assign(q, quota):
    q = np.asarray(q, dtype=np.float64)
    req, act = greedy_order(q)
    quota = np.ascontiguousarray(quota, dtype=np.int64)
    if _accel.USE_NUMBA:
        return greedy_numba(req, act, quota, q.shape[0])
    return greedy_numpy(req, act, quota, q.shape[0])


# --------------------------------------------------------------------------
# batched Lagrangian argmax


@njit
def decide_numba(q, c, lam):
    m, a = q.shape
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        best = 0
        best_s = q[i, 0] - lam * c[i, 0]
        best_c = c[i, 0]
        for j in range(1, a):
            s = q[i, j] - lam * c[i, j]
            if s > best_s or (s == best_s and c[i, j] < best_c):
                best = j
                best_s = s
                best_c = c[i, j]
        out[i] = best
    return out


def decide_numpy(q, c, lam):
    score = q - lam * c
    top = score == score.max(axis=1, keepdims=True)
    cost = np.where(top, c, np.inf)
    cheapest = top & (cost == cost.min(axis=1, keepdims=True))
    return np.argmax(cheapest, axis=1).astype(np.int64)


def decide_batch(q, c, lam):
    """Per-row argmax of ``q - lam*c``; ties to lower cost, then lower index."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if _accel.USE_NUMBA:
        return decide_numba(q, c, float(lam))
    return decide_numpy(q, c, float(lam))


# --------------------------------------------------------------------------
# sliding-window variance


@njit
def window_variance_numba(x, window):
    n = x.shape[0]
    n_win = n - window + 1
    total = 0.0
    for s in range(n_win):
        mean = 0.0
        for k in range(window):
            mean += x[s + k]
        mean /= window
        acc = 0.0
        for k in range(window):
            d = x[s + k] - mean
            acc += d * d
        total += acc / window
    return total / n_win


def window_variance_numpy(x, window):
    views = np.lib.stride_tricks.sliding_window_view(x, window)
    return float(views.var(axis=1).mean())


def window_variance(x, window):
    """Mean over stride-1 windows of the population variance within each window."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _accel.USE_NUMBA:
        return float(window_variance_numba(x, int(window)))
    return window_variance_numpy(x, int(window))


# --------------------------------------------------------------------------
# system-model rollouts for the MPC balancer
#
# The system model is a 2-hidden-layer ReLU MLP on the standardized input
# [c, exo_1..exo_F, log1p(lam)] predicting the standardized next utilization.


@njit
def rollout_numba(c0, exo, lams, w1, b1, w2, b2, w3, b3, x_mean, x_std, y_mean, y_std):
    g, n = lams.shape
    f = exo.shape[1]
    d_in = f + 2
    h1 = w1.shape[1]
    h2 = w2.shape[1]
    traj = np.empty((g, n + 1))
    x = np.empty(d_in)
    a1 = np.empty(h1)
    a2 = np.empty(h2)
    for k in range(g):
        c = c0
        traj[k, 0] = c
        for i in range(n):
            x[0] = (c - x_mean[0]) / x_std[0]
            for j in range(f):
                x[j + 1] = (exo[i, j] - x_mean[j + 1]) / x_std[j + 1]
            x[d_in - 1] = (np.log1p(lams[k, i]) - x_mean[d_in - 1]) / x_std[d_in - 1]
            for u in range(h1):
                s = b1[u]
                for j in range(d_in):
                    s += x[j] * w1[j, u]
                a1[u] = s if s > 0.0 else 0.0
            for u in range(h2):
                s = b2[u]
                for j in range(h1):
                    s += a1[j] * w2[j, u]
                a2[u] = s if s > 0.0 else 0.0
            s = b3[0]
            for j in range(h2):
                s += a2[j] * w3[j, 0]
            c = y_mean + y_std * s
            if c < 0.0:
                c = 0.0
            traj[k, i + 1] = c
    return traj


def rollout_numpy(c0, exo, lams, w1, b1, w2, b2, w3, b3, x_mean, x_std, y_mean, y_std):
    g, n = lams.shape
    traj = np.empty((g, n + 1))
    c = np.full(g, float(c0))
    traj[:, 0] = c
    for i in range(n):
        x = np.empty((g, exo.shape[1] + 2))
        x[:, 0] = c
        x[:, 1:-1] = exo[i]
        x[:, -1] = np.log1p(lams[:, i])
        x = (x - x_mean) / x_std
        a1 = np.maximum(x @ w1 + b1, 0.0)
        a2 = np.maximum(a1 @ w2 + b2, 0.0)
        c = np.maximum(y_mean + y_std * (a2 @ w3 + b3)[:, 0], 0.0)
        traj[:, i + 1] = c
    return traj


def rollout(c0, exo, lams, params):
    """Roll ``len(exo)`` steps of the system model for each row of ``lams``.

    Returns an array ``(n_candidates, N+1)`` whose column 0 is ``c0``.
    """
    lams = np.ascontiguousarray(np.atleast_2d(lams), dtype=np.float64)
    exo = np.ascontiguousarray(exo, dtype=np.float64)
    args = (float(c0), exo, lams, *params)
    if _accel.USE_NUMBA:
        return rollout_numba(*args)
    return rollout_numpy(*args)


@njit
def mpc_cost_numba(traj, c_prev, budget, alpha, beta, per_step):
    g, m = traj.shape
    out = np.empty(g)
    for k in range(g):
        track = 0.0
        osc = 0.0
        over = False
        prev = c_prev
        w = 1.0
        for i in range(m):
            c = traj[k, i]
            track += w * (c - budget) ** 2
            d = w * (c - prev) ** 2
            if c >= budget:
                over = True
                osc += d
            elif not per_step:
                osc += d
            prev = c
            w *= alpha
        if per_step or over:
            out[k] = track + beta * osc
        else:
            out[k] = track
    return out


def mpc_cost_numpy(traj, c_prev, budget, alpha, beta, per_step):
    m = traj.shape[1]
    w = alpha ** np.arange(m)
    track = ((traj - budget) ** 2 * w).sum(axis=1)
    prev = np.concatenate([np.full((traj.shape[0], 1), c_prev), traj[:, :-1]], axis=1)
    d = (traj - prev) ** 2 * w
    if per_step:
        osc = np.where(traj >= budget, d, 0.0).sum(axis=1)
    else:
        osc = np.where((traj >= budget).any(axis=1), d.sum(axis=1), 0.0)
    return track + beta * osc


def mpc_cost(traj, c_prev, budget, alpha, beta, per_step=True):
    """Decay-weighted tracking cost plus gated oscillation penalty, per row."""
    traj = np.ascontiguousarray(np.atleast_2d(traj), dtype=np.float64)
    args = (traj, float(c_prev), float(budget), float(alpha), float(beta), bool(per_step))
    if _accel.USE_NUMBA:
        return mpc_cost_numba(*args)
    return mpc_cost_numpy(*args)

