"""Small-network core: dense and GRU layers with hand-written backward passes,
Adam, Glorot initialization, softplus, dropout and a deterministic checkpoint
container.

Parameters live in plain ``dict[str, np.ndarray]`` so optimizers and
checkpoints can walk them generically. Every layer accepts an optional leading
ensemble axis on its weights: ``W`` of shape ``(K, in, out)`` applied to
``x`` of shape ``(B, in)`` or ``(K, B, in)`` yields ``(K, B, out)``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# scalar transforms


def softplus(x):
    """ln(1 + e^x), overflow-safe for any finite input."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    # tanh form: one ufunc pass and no overflow
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def relu(x):
    return np.maximum(x, 0.0)


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back to ``shape`` (leading axes only)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# --------------------------------------------------------------------------
# dense


@dataclass
class DenseParams:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.shape[-1] != self.bias.shape[-1]:
            raise ShapeError(
                f"bias size {self.bias.shape[-1]} does not match weight output {self.weights.shape[-1]}"
            )


def dense_forward(x, W, b, activation="none"):
    """y = act(x @ W + b). Returns ``(y, cache)``."""
    if x.shape[-1] != W.shape[-2]:
        raise ShapeError(f"input dim {x.shape[-1]} != layer input dim {W.shape[-2]}")
    z = np.matmul(x, W) + _bias(b, W)
    if activation == "relu":
        y = np.maximum(z, 0.0)
    elif activation == "none":
        y = z
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, W, z, activation)


def dense_backward(dy, cache):
    """Returns ``(dx, dW, db)`` for the layer that produced ``cache``."""
    x, W, z, activation = cache
    dz = dy * (z > 0) if activation == "relu" else dy
    xt = np.swapaxes(x, -1, -2)
    dW = np.matmul(xt, dz)
    if dW.ndim > W.ndim:
        dW = _sum_to(dW, W.shape)
    db = _sum_to(dz.sum(axis=-2), W.shape[:-2] + W.shape[-1:])
    dx = np.matmul(dz, np.swapaxes(W, -1, -2))
    dx = _sum_to(dx, x.shape)
    return dx, dW, db


# --------------------------------------------------------------------------
# GRU (gate order r, z, n; reset applied to the hidden projection, as in
# the cuDNN/PyTorch formulation)


@dataclass
class GruParams:
    W_x: np.ndarray  # (..., I, 3H)
    W_h: np.ndarray  # (..., H, 3H)
    b_x: np.ndarray  # (..., 3H)
    b_h: np.ndarray  # (..., 3H)

    @property
    def hidden(self) -> int:
        return self.W_h.shape[-2]

    def as_dict(self, prefix=""):
        return {f"{prefix}W_x": self.W_x, f"{prefix}W_h": self.W_h,
                f"{prefix}b_x": self.b_x, f"{prefix}b_h": self.b_h}


def _bias(b, W):
    return b[..., None, :] if W.ndim == 3 else b


def gru_step(o, h_prev, p: GruParams):
    """One GRU step. Returns ``(h, cache)``."""
    H = p.hidden
    if o.shape[-1] != p.W_x.shape[-2]:
        raise ShapeError(f"observation dim {o.shape[-1]} != GRU input dim {p.W_x.shape[-2]}")
    if h_prev.shape[-1] != H:
        raise ShapeError(f"hidden dim {h_prev.shape[-1]} != GRU hidden dim {H}")
    gx = np.matmul(o, p.W_x) + _bias(p.b_x, p.W_x)
    gh = np.matmul(h_prev, p.W_h) + _bias(p.b_h, p.W_h)
    r = sigmoid(gx[..., :H] + gh[..., :H])
    z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:]
    n = np.tanh(gx[..., 2 * H:] + r * hn)
    h = (1.0 - z) * n + z * h_prev
    return h, (o, h_prev, p, r, z, n, hn)


def gru_backward(dh, cache):
    """Returns ``(grads, d_o, d_h_prev)`` with grads keyed W_x, W_h, b_x, b_h."""
    o, h_prev, p, r, z, n, hn = cache
    dan = dh * (1.0 - z) * (1.0 - n * n)
    dar = dan * hn * r * (1.0 - r)
    daz = dh * (h_prev - n) * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=-1)
    dgh = np.concatenate([dar, daz, dan * r], axis=-1)

    def wgrad(inp, dg, W):
        g = np.matmul(np.swapaxes(inp, -1, -2), dg)
        return _sum_to(g, W.shape)

    grads = {
        "W_x": wgrad(o, dgx, p.W_x),
        "W_h": wgrad(h_prev, dgh, p.W_h),
        "b_x": _sum_to(dgx.sum(axis=-2), p.b_x.shape),
        "b_h": _sum_to(dgh.sum(axis=-2), p.b_h.shape),
    }
    d_o = _sum_to(np.matmul(dgx, np.swapaxes(p.W_x, -1, -2)), o.shape)
    dh_prev = dh * z + np.matmul(dgh, np.swapaxes(p.W_h, -1, -2))
    dh_prev = _sum_to(dh_prev, h_prev.shape)
    return grads, d_o, dh_prev


# --------------------------------------------------------------------------
# MLP stacks over dict params: keys f"{prefix}W{i}", f"{prefix}b{i}"


def mlp_forward(params, prefix, x, n_layers, dropout=0.0, rng=None):
    """ReLU hidden layers, linear output. Dropout on hidden activations only
    when ``rng`` is given (training)."""
    caches = []
    h = x
    for i in range(n_layers):
        last = i == n_layers - 1
        h, c = dense_forward(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"],
                             "none" if last else "relu")
        mask = None
        if not last and dropout > 0.0 and rng is not None:
            mask = dropout_mask(rng, h.shape, dropout)
            h = h * mask
        caches.append((c, mask))
    return h, caches


def mlp_backward(params, prefix, dy, caches, grads):
    """Accumulates into ``grads``; returns d(input)."""
    d = dy
    for i in reversed(range(len(caches))):
        c, mask = caches[i]
        if mask is not None:
            d = d * mask
        d, dW, db = dense_backward(d, c)
        grads[f"{prefix}W{i}"] = grads.get(f"{prefix}W{i}", 0.0) + dW
        grads[f"{prefix}b{i}"] = grads.get(f"{prefix}b{i}", 0.0) + db
    return d


def dropout_mask(rng, shape, rate):
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


# --------------------------------------------------------------------------
# initialization


def glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(rng, fan_in, fan_out, lead=()):
    b = glorot_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=tuple(lead) + (fan_in, fan_out))


def glorot_uniform_init(fan_in, fan_out, rng_seed) -> DenseParams:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    rng = np.random.default_rng(rng_seed)
    return DenseParams(glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out))


def init_mlp(rng, prefix, sizes, lead=()):
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}W{i}"] = glorot_uniform(rng, a, b, lead)
        params[f"{prefix}b{i}"] = np.zeros(tuple(lead) + (b,))
    return params


def init_gru(rng, prefix, n_in, hidden, lead=()):
    return {
        f"{prefix}W_x": glorot_uniform(rng, n_in, 3 * hidden, lead),
        f"{prefix}W_h": glorot_uniform(rng, hidden, 3 * hidden, lead),
        f"{prefix}b_x": np.zeros(tuple(lead) + (3 * hidden,)),
        f"{prefix}b_h": np.zeros(tuple(lead) + (3 * hidden,)),
    }


def gru_params(params, prefix) -> GruParams:
    return GruParams(params[f"{prefix}W_x"], params[f"{prefix}W_h"],
                     params[f"{prefix}b_x"], params[f"{prefix}b_h"])


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self, prefix):
        out = {f"{prefix}m/{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}v/{k}": a for k, a in self.v.items()})
        return out

    def meta(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, meta, arrays, prefix):
        st = cls(**meta)
        for key, a in arrays.items():
            if key.startswith(f"{prefix}m/"):
                st.m[key[len(prefix) + 2:]] = a.copy()
            elif key.startswith(f"{prefix}v/"):
                st.v[key[len(prefix) + 2:]] = a.copy()
        return st


def grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_update(params, grads, state: AdamState):
    """One Adam step over the keys of ``grads``. Returns ``(params, state)``.

    Raises :class:`NonFiniteGradient` without touching anything if a gradient
    is NaN or infinite.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != params[k].shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter {k} shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new = dict(params)
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(params[k])
            v = np.zeros_like(params[k])
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        new[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


# --------------------------------------------------------------------------
# checkpoint container: an .npz archive with fixed zip timestamps so that
# identical contents always produce identical bytes, plus a JSON meta entry


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH), buf.getvalue())
        payload = json.dumps(meta or {}, sort_keys=True).encode()
        zf.writestr(zipfile.ZipInfo("__meta__.json", date_time=_ZIP_EPOCH), payload)
    tmp.replace(path)


def load_checkpoint(path):
    arrays = {}
    meta = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == "__meta__.json":
                meta = json.loads(data)
            else:
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, meta


# --------------------------------------------------------------------------
# standardized MLP regressor


class MLPRegressor:
    """ReLU MLP fit by Adam on squared error, with inputs and targets
    standardized from the training data."""

    def __init__(self, n_in, hidden=(64, 64), n_out=1, seed=0):
        self.sizes = (n_in,) + tuple(hidden) + (n_out,)
        self.seed = seed
        self.params = init_mlp(np.random.default_rng([seed, 11]), "", self.sizes)
        self.x_mean = np.zeros(n_in)
        self.x_std = np.ones(n_in)
        self.y_mean = np.zeros(n_out)
        self.y_std = np.ones(n_out)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def fit(self, x, y, iterations=2000, batch=256, lr=3e-3):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float).reshape(len(x), -1)
        if len(x) < 2:
            raise ValueError("need at least 2 training rows")
        self.x_mean, self.x_std = x.mean(0), x.std(0) + 1e-8
        self.y_mean, self.y_std = y.mean(0), y.std(0) + 1e-8
        xs = (x - self.x_mean) / self.x_std
        ys = (y - self.y_mean) / self.y_std
        rng = np.random.default_rng([self.seed, 12])
        opt = AdamState(lr=lr)
        b = min(batch, len(x))
        for _ in range(iterations):
            idx = rng.integers(0, len(x), b)
            out, caches = mlp_forward(self.params, "", xs[idx], self.n_layers)
            grads = {}
            mlp_backward(self.params, "", 2.0 * (out - ys[idx]) / b, caches, grads)
            self.params, opt = adam_update(self.params, grads, opt)
        return self

    def predict(self, x):
        xs = (np.asarray(x, dtype=float) - self.x_mean) / self.x_std
        out, _ = mlp_forward(self.params, "", xs, self.n_layers)
        return out * self.y_std + self.y_mean

    def to_arrays(self, prefix=""):
        out = {f"{prefix}{k}": v for k, v in self.params.items()}
        out.update({f"{prefix}x_mean": self.x_mean, f"{prefix}x_std": self.x_std,
                    f"{prefix}y_mean": self.y_mean, f"{prefix}y_std": self.y_std})
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        n_layers = sum(1 for k in arrays if k.startswith(f"{prefix}W"))
        sizes = [arrays[f"{prefix}W0"].shape[0]] + [arrays[f"{prefix}W{i}"].shape[1] for i in range(n_layers)]
        m = cls(sizes[0], tuple(sizes[1:-1]), sizes[-1])
        m.params = {f"W{i}": arrays[f"{prefix}W{i}"].copy() for i in range(n_layers)}
        m.params.update({f"b{i}": arrays[f"{prefix}b{i}"].copy() for i in range(n_layers)})
        for k in ("x_mean", "x_std", "y_mean", "y_std"):
            setattr(m, k, arrays[f"{prefix}{k}"].copy())
        return m
