"""Small fully connected network with hand-written backprop.

Hidden layers are affine -> (optional) layer norm -> ReLU; the output layer
is affine only.  Everything is float64 and works on row batches: inputs of
shape (n, dims[0]) produce outputs of shape (n, dims[-1]).

Parameters are kept as one flat list in this order, which is also the
checkpoint order::

    W0, b0, [g0, s0], W1, b1, [g1, s1], ..., W_last, b_last

with W_i of shape (dims[i], dims[i+1]) and g/s the layer-norm gain/shift
of hidden layer i (present only when layernorm is enabled).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError, VersionError

LN_EPS = 1e-5
CHECKPOINT_FORMAT = "wedmodel"
CHECKPOINT_VERSION = "1"


@dataclass
class Mlp:
    dims: list[int]
    layernorm: bool
    params: list[np.ndarray]
    ln_eps: float = LN_EPS

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def layer(self, i):
        """(W, b, gain, shift) of layer i; gain/shift are None where absent."""
        k = 0
        for j in range(self.n_layers):
            hidden = j < self.n_layers - 1
            ln = self.layernorm and hidden
            if j == i:
                w, b = self.params[k], self.params[k + 1]
                if ln:
                    return w, b, self.params[k + 2], self.params[k + 3]
                return w, b, None, None
            k += 4 if ln else 2
        raise IndexError(i)

    def layers(self) -> list[tuple]:
        return [self.layer(i) for i in range(self.n_layers)]

    def weight_matrices(self) -> list[np.ndarray]:
        return [self.layer(i)[0] for i in range(self.n_layers)]

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
            if self.layernorm and i < self.n_layers - 1:
                names += [f"g{i}", f"s{i}"]
        return names

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Mlp":
        return Mlp(list(self.dims), self.layernorm, [p.copy() for p in self.params], self.ln_eps)

    def validate(self) -> None:
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ConfigError(f"invalid layer dims {self.dims}")
        expected = expected_shapes(self.dims, self.layernorm)
        if [p.shape for p in self.params] != expected:
            raise ShapeError("parameter shapes do not match layer dims")


@dataclass
class GradientSet:
    params: list[np.ndarray]
    dx: np.ndarray


def expected_shapes(dims, layernorm):
    shapes = []
    n = len(dims) - 1
    for i in range(n):
        shapes += [(dims[i], dims[i + 1]), (dims[i + 1],)]
        if layernorm and i < n - 1:
            shapes += [(dims[i + 1],), (dims[i + 1],)]
    return shapes


def init_mlp(dims, seed=0, layernorm=True) -> Mlp:
    """Uniform fan-in init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), same for b."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least input and output dims")
    if any(d < 1 for d in dims):
        raise ConfigError(f"zero-width layer in {dims}")
    rng = np.random.default_rng(seed)
    params = []
    n = len(dims) - 1
    for i in range(n):
        bound = 1.0 / np.sqrt(dims[i])
        params.append(rng.uniform(-bound, bound, (dims[i], dims[i + 1])))
        params.append(rng.uniform(-bound, bound, dims[i + 1]))
        if layernorm and i < n - 1:
            params.append(np.ones(dims[i + 1]))
            params.append(np.zeros(dims[i + 1]))
    return Mlp(dims, layernorm, params)


def _as_batch(m: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects width {m.in_dim}")
    return x, single


def forward_cached(m: Mlp, x):
    """Forward pass on a (n, d_in) batch, returning (output, cache)."""
    h = x
    cache = []
    last = m.n_layers - 1
    for i, (w, b, g, s) in enumerate(m.layers()):
        a = h @ w
        a += b
        if i == last:
            cache.append((h, None, None, None))
            return a, cache
        if g is not None:
            xhat, inv_std, y, h_next = _kernels.ln_relu_forward(a, g, s, m.ln_eps)
        else:
            xhat = inv_std = None
            y, h_next = a, np.maximum(a, 0.0)
        cache.append((h, xhat, inv_std, y))
        h = h_next
    raise AssertionError("unreachable")


def forward(m: Mlp, x):
    xb, single = _as_batch(m, x)
    out, _ = forward_cached(m, xb)
    return out[0] if single else out


def backward_cached(m: Mlp, cache, upstream, need_dx=True, need_params=True) -> GradientSet:
    """Gradients of sum(upstream * output) w.r.t. every parameter and the input.

    With need_params=False only the input gradient is formed (latent fitting
    through a frozen network).
    """
    layers = m.layers()
    offsets = np.cumsum([0] + [2 if g is None else 4 for _, _, g, _ in layers])
    grads = [None] * len(m.params)
    d = upstream
    for i in reversed(range(m.n_layers)):
        w, b, g, s = layers[i]
        h, xhat, inv_std, y = cache[i]
        k = offsets[i]
        if i < m.n_layers - 1:
            if g is not None:
                d, grads[k + 2], grads[k + 3] = _kernels.ln_relu_backward(d, g, xhat, inv_std, y, need_params)
            else:
                d = np.where(y > 0, d, 0.0)
        if need_params:
            grads[k] = h.T @ d
            grads[k + 1] = d.sum(axis=0)
        if i > 0 or need_dx:
            d = d @ w.T
    return GradientSet(grads, d if need_dx else None)


def backward(m: Mlp, x, upstream) -> GradientSet:
    xb, single = _as_batch(m, x)
    up = np.asarray(upstream, dtype=float)
    if single:
        up = up[None, :]
    if up.shape != (xb.shape[0], m.out_dim):
        raise ShapeError(f"upstream has shape {up.shape}, expected {(xb.shape[0], m.out_dim)}")
    _, cache = forward_cached(m, xb)
    gs = backward_cached(m, cache, up)
    if single:
        gs.dx = gs.dx[0]
    return gs


def l1_loss(pred, target):
    """Mean absolute error and its subgradient (sign(0) taken as 0)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DomainError("l1_loss of empty vectors")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def l2_penalty(v, weight):
    """weight * ||v||^2 and its gradient."""
    v = np.asarray(v, dtype=float)
    return float(weight * np.dot(v.ravel(), v.ravel())), 2.0 * weight * v


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adam_init(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8) -> OptimState:
    return OptimState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, betas, eps)


def adam_step(params, grads, state: OptimState):
    """Bias-corrected Adam update, applied to `params` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", step=state.step)
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def spectral_norm(w, n_iter=50, seed=0):
    """Largest singular value by power iteration on W^T W."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(n_iter):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = w.T @ (u / nu)
        sigma = np.linalg.norm(v)
        v /= sigma
    return float(sigma)


def clip_spectral_norm(m: Mlp, bound, n_iter=20):
    """Rescale every weight matrix whose spectral norm exceeds `bound`."""
    for w in m.weight_matrices():
        sigma = spectral_norm(w, n_iter)
        if sigma > bound:
            w *= bound / sigma
    return m


# --- checkpoints -----------------------------------------------------------

def mlp_to_dict(m: Mlp) -> dict:
    return {
        "dims": list(m.dims),
        "layernorm": m.layernorm,
        "ln_eps": m.ln_eps,
        "activation": "relu-hidden/identity-output",
        "param_order": m.param_names(),
        "params": [p.ravel().tolist() for p in m.params],
    }


def mlp_from_dict(data: dict) -> Mlp:
    dims = [int(d) for d in data["dims"]]
    shapes = expected_shapes(dims, data["layernorm"])
    flat = data["params"]
    if len(flat) != len(shapes):
        raise FormatError("checkpoint parameter count does not match architecture")
    params = []
    for arr, shape in zip(flat, shapes):
        a = np.asarray(arr, dtype=float)
        if a.size != int(np.prod(shape)):
            raise FormatError(f"parameter of size {a.size} cannot take shape {shape}")
        params.append(a.reshape(shape))
    return Mlp(dims, bool(data["layernorm"]), params, float(data.get("ln_eps", LN_EPS)))


def save_checkpoint(path, kind: str, networks: dict, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "networks": {name: mlp_to_dict(m) for name, m in networks.items()},
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, kind: str | None = None):
    """Returns (networks, meta); raises VersionError on a version mismatch."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {payload.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
    if kind is not None and payload.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')!r}")
    networks = {name: mlp_from_dict(d) for name, d in payload["networks"].items()}
    return networks, payload.get("meta", {})
