"""Minimal dense-tensor reverse-mode autodiff: enough for small MLPs,
variational reparameterization, and Adam.

All data is float64. A Tape records ops while active (``with Tape() as t:``);
``t.backward(loss)`` runs the reverse sweep. Ops outside a tape (or on inputs
that don't require grad) just compute values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op's contract."""


class ContractError(ValueError):
    """An op precondition was violated (e.g. non-scalar loss)."""


class NumericError(FloatingPointError):
    """NaN/inf where finite values are required."""


_ACTIVE_TAPE = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records (inputs, output, backward_fn) triples; single-threaded."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, inputs, output, backward):
        self.nodes.append((inputs, output, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into t.grad for every traced tensor."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for inputs, output, backward in reversed(self.nodes):
            if output.grad is None:
                continue
            gs = backward(output.grad)
            for t, g in zip(inputs, gs):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace(inputs, out_data, backward):
    """Create the output tensor, recording on the active tape if any input is traced."""
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.record(inputs, out, backward)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        (a, b),
        a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    return _trace(
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _trace((a,), out, lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return _trace((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _trace((a,), out, lambda g: (g / (2.0 * out),))


def square(a):
    a = _as_tensor(a)
    return _trace((a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _trace((a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _trace((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def clip(a, lo, hi):
    a = _as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _trace((a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _trace((a,), out, backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    return _trace((a,), a.data.reshape(shape), lambda g: (g.reshape(a.data.shape),))


def transpose(a):
    a = _as_tensor(a)
    return _trace((a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _trace(
        tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=axis))
    )


def gather_rows(a, idx):
    """Select rows a[idx]; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _trace((a,), a.data[idx], backward)


def logsumexp(a, axis):
    """Row-stable logsumexp; saves softmax weights for backward."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _trace((a,), out, backward)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    lse = logsumexp(a, axis=axis)
    # exp(a - lse) keeps rows on the simplex to machine precision
    return exp(sub(a, reshape(lse, _expand_shape(a.data.shape, axis))))


def _expand_shape(shape, axis):
    s = list(shape)
    s[axis % len(s)] = 1
    return tuple(s)


def scatter_mean(values, cell, n_cells):
    """Per-cell mean of rows of `values` grouped by int index `cell`.

    Returns (means (n_cells, D), counts (n_cells,)); empty cells are zero.
    Backward distributes g / count back to the contributing rows.
    """
    values = _as_tensor(values)
    cell = np.asarray(cell, dtype=np.int64)
    d = values.data.shape[1]
    sums = np.zeros((n_cells, d))
    np.add.at(sums, cell, values.data)
    counts = np.bincount(cell, minlength=n_cells).astype(np.float64)
    denom = np.maximum(counts, 1.0)
    means = sums / denom[:, None]

    def backward(g):
        return ((g / denom[:, None])[cell],)

    return _trace((values,), means, backward), counts


def bilinear_gather(grid, pts_frac):
    """Bilinear interpolation on a (H, W, D) lattice at fractional coords.

    pts_frac is (Q, 2) in lattice units (row, col), already clamped to
    [0, H-1] x [0, W-1]. Differentiable in `grid` only.
    """
    grid = _as_tensor(grid)
    h, w, _ = grid.data.shape
    p = np.asarray(pts_frac, dtype=np.float64)
    i0 = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, h - 2)
    j0 = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, w - 2)
    fi = (p[:, 0] - i0)[:, None]
    fj = (p[:, 1] - j0)[:, None]
    w00 = (1 - fi) * (1 - fj)
    w01 = (1 - fi) * fj
    w10 = fi * (1 - fj)
    w11 = fi * fj
    g = grid.data
    out = (
        w00 * g[i0, j0]
        + w01 * g[i0, j0 + 1]
        + w10 * g[i0 + 1, j0]
        + w11 * g[i0 + 1, j0 + 1]
    )

    def backward(gout):
        gg = np.zeros_like(grid.data)
        np.add.at(gg, (i0, j0), w00 * gout)
        np.add.at(gg, (i0, j0 + 1), w01 * gout)
        np.add.at(gg, (i0 + 1, j0), w10 * gout)
        np.add.at(gg, (i0 + 1, j0 + 1), w11 * gout)
        return (gg,)

    return _trace((grid,), out, backward)


def box_smooth(grid):
    """3x3 box average over the leading two axes of an (H, W, D) grid.

    Edge cells average over their in-bounds neighbors only, so a constant
    grid is a fixed point. Linear, hence backward is the transposed stencil.
    """
    grid = _as_tensor(grid)
    h, w, _ = grid.data.shape
    counts = _box_counts(h, w)

    def forward(x):
        acc = np.zeros_like(x)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                acc[max(0, -di) : h - max(0, di), max(0, -dj) : w - max(0, dj)] += x[
                    max(0, di) : h - max(0, -di), max(0, dj) : w - max(0, -dj)
                ]
        return acc / counts[:, :, None]

    out = forward(grid.data)

    def backward(g):
        gn = g / counts[:, :, None]
        acc = np.zeros_like(g)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                acc[max(0, di) : h - max(0, -di), max(0, dj) : w - max(0, -dj)] += gn[
                    max(0, -di) : h - max(0, di), max(0, -dj) : w - max(0, dj)
                ]
        return (acc,)

    return _trace((grid,), out, backward)


def _box_counts(h, w):
    c = np.full((h, w), 9.0)
    c[0, :] = c[-1, :] = 6.0
    c[:, 0] = c[:, -1] = 6.0
    c[0, 0] = c[0, -1] = c[-1, 0] = c[-1, -1] = 4.0
    return c


def where_mask(mask, a, b):
    """Select per-element between tensors by a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _trace(
        (a, b),
        np.where(mask, a.data, b.data),
        lambda g: (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        ),
    )


# ---------------------------------------------------------------------------
# MLPs


@dataclass
class MlpSpec:
    """Layer widths [in, h1, ..., out] plus activation choices."""

    widths: list
    hidden: str = "tanh"  # tanh | relu
    output: str = "linear"  # linear | softmax

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractError("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ContractError("widths must be positive")
        if self.hidden not in ("tanh", "relu"):
            raise ContractError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in ("linear", "softmax"):
            raise ContractError(f"unknown output activation {self.output!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


def init_mlp(spec, rng):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and biases."""
    params = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True))
        params.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), True))
    return params


def mlp_forward(spec, params, x):
    """Apply the MLP to a batch (B, in) -> (B, out)."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != spec.widths[0]:
        raise ShapeError(
            f"mlp_forward: input {x.data.shape} vs expected (*, {spec.widths[0]})"
        )
    act = tanh if spec.hidden == "tanh" else relu
    h = x
    for i in range(spec.n_layers):
        h = add(matmul(h, params[2 * i]), params[2 * i + 1])
        if i < spec.n_layers - 1:
            h = act(h)
    if spec.output == "softmax":
        h = softmax(h, axis=-1)
    return h


def mlp_params_zero_last(params):
    """Zero the final layer in place (residual heads start at identity)."""
    params[-2].data[:] = 0.0
    params[-1].data[:] = 0.0
    return params


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(state, params, grads):
    """Bias-corrected Adam; epsilon is scaled by sqrt(1 - beta2^t) so the
    first-step magnitude is lr*|g| / (|g| + eps*sqrt(1-beta2)).

    Rejects the whole update if any gradient is non-finite.
    """
    if len(grads) != len(params):
        raise ShapeError("adam_step: grads/params length mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps * math.sqrt(c2))
    return params, state


def grads_of(params):
    """Collect .grad buffers (zeros where untouched) after a backward pass."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grads(params):
    for p in params:
        p.grad = None
