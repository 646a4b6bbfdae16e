"""Independent reference computations used as test oracles. Written as
plain loops so they share no code with the package."""

import itertools
import math

import numpy as np


def central_diff(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gru_reference(o, h, Wx, Wh, bx, bh):
    H = h.shape[-1]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    gx = o @ Wx + bx
    gh = h @ Wh + bh
    r = sig(gx[:, :H] + gh[:, :H])
    z = sig(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1 - z) * n + z * h


def ranks(x):
    x = list(x)
    order = sorted(range(len(x)), key=lambda i: x[i])
    r = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            r[order[k]] = avg
        i = j + 1
    return r


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return cov / (sx * sy)


def utilization(trace, budget):
    return sum(min(c, budget) / budget for c in trace) / len(trace)


def overutilization(trace, budget):
    return sum((max(c, budget) - budget) / budget for c in trace) / len(trace)


def mpc_objective_loop(traj, c_prev, budget, alpha, beta, per_step=True):
    """traj[0] is the measured value; oscillation compares with the previous point."""
    j = 0.0
    osc = 0.0
    any_over = False
    prev = c_prev
    for i, c in enumerate(traj):
        w = alpha ** i
        j += w * (c - budget) ** 2
        if c >= budget:
            any_over = True
        if not per_step or c >= budget:
            osc += w * (c - prev) ** 2
        prev = c
    if per_step or any_over:
        j += beta * osc
    return j


def brute_force_allocation(true_q, quota):
    """Best ground-truth revenue over all quota-feasible assignments."""
    m, a = true_q.shape
    best = -math.inf
    for assign in itertools.product(range(a), repeat=m):
        counts = [0] * a
        for x in assign:
            counts[x] += 1
        if all(counts[k] <= quota[k] for k in range(a)):
            best = max(best, sum(true_q[i, x] for i, x in enumerate(assign)))
    return best


def pav_reference(y, w):
    """Weighted isotonic (non-decreasing) fit by repeated pooling."""
    blocks = [[float(v), float(wt), 1] for v, wt in zip(y, w)]
    i = 0
    while i < len(blocks) - 1:
        if blocks[i][0] > blocks[i + 1][0]:
            v1, w1, n1 = blocks[i]
            v2, w2, n2 = blocks[i + 1]
            blocks[i] = [(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, n1 + n2]
            del blocks[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    out = []
    for v, _, n in blocks:
        out += [v] * n
    return np.array(out)


def window_variance_loop(x, window):
    vals = []
    for s in range(len(x) - window + 1):
        seg = x[s:s + window]
        mu = sum(seg) / window
        vals.append(sum((v - mu) ** 2 for v in seg) / window)
    return sum(vals) / len(vals)
