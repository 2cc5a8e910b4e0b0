"""Numeric substrate: masked softmax, layer norm, a small reverse-mode tape and
a central-difference gradient checker.

Everything runs in float64. Masks are boolean arrays (``True`` = allowed);
``-inf`` never appears in arithmetic.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "EmptyAttentionRowError",
    "softmax_masked",
    "layer_norm",
    "Tape",
    "Var",
    "grad_check",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class EmptyAttentionRowError(ValueError):
    pass


def softmax_masked(scores, allowed) -> np.ndarray:
    """Softmax along the last axis restricted to ``allowed`` positions.

    Blocked positions get exactly 0. Works on vectors or stacks of rows.
    """
    scores = np.asarray(scores, dtype=np.float64)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    if not np.all(allowed.any(axis=-1)):
        raise EmptyAttentionRowError("empty attention row")
    shifted = np.where(allowed, scores, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, scores - row_max, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return np.asarray(gain) * (x - mu) / np.sqrt(var + eps) + np.asarray(bias)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "value", "grad", "index")

    def __init__(self, tape: "Tape", value: np.ndarray, index: int):
        self.tape = tape
        self.value = value
        self.grad = None
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Ordered record of primitive ops supporting reverse-mode differentiation.

    Each node stores its forward function, parent indices, saved context and a
    vector-Jacobian product. ``replay`` re-runs the forward functions in tape
    order from the current leaf values.
    """

    def __init__(self):
        self.nodes: list[tuple] = []  # (forward, parents, ctx, vjp)
        self.vars: list[Var] = []

    # -- leaves ---------------------------------------------------------
    def leaf(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        v = Var(self, value, len(self.vars))
        self.vars.append(v)
        self.nodes.append((None, (), None, None))
        return v

    param = leaf

    def const(self, value) -> Var:
        return self.leaf(value)

    def _as_var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.leaf(x)

    def record(self, forward: Callable, parents: Sequence, vjp: Callable) -> Var:
        """Add a node. ``forward(*values) -> (out, ctx)``; ``vjp(g, ctx, *values)``
        returns one gradient (or None) per parent."""
        parents = tuple(self._as_var(p) for p in parents)
        out, ctx = forward(*(p.value for p in parents))
        v = Var(self, out, len(self.vars))
        self.vars.append(v)
        self.nodes.append((forward, tuple(p.index for p in parents), ctx, vjp))
        return v

    def replay(self) -> None:
        for idx, (forward, parents, _, vjp) in enumerate(self.nodes):
            if forward is None:
                continue
            out, ctx = forward(*(self.vars[p].value for p in parents))
            self.vars[idx].value = out
            self.nodes[idx] = (forward, parents, ctx, vjp)

    def backward(self, out: Var) -> None:
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for v in self.vars:
            v.grad = None
        out.grad = np.ones_like(out.value)
        for idx in range(out.index, -1, -1):
            forward, parents, ctx, vjp = self.nodes[idx]
            g = self.vars[idx].grad
            if forward is None or g is None:
                continue
            pgrads = vjp(g, ctx, *(self.vars[p].value for p in parents))
            for p, pg in zip(parents, pgrads):
                if pg is None:
                    continue
                pv = self.vars[p]
                pg = _unbroadcast(pg, pv.value.shape)
                pv.grad = pg if pv.grad is None else pv.grad + pg

    # -- primitives -----------------------------------------------------
    def add(self, a, b) -> Var:
        return self.record(lambda x, y: (x + y, None), (a, b),
                           lambda g, _, x, y: (g, g))

    def sub(self, a, b) -> Var:
        return self.record(lambda x, y: (x - y, None), (a, b),
                           lambda g, _, x, y: (g, -g))

    def mul(self, a, b) -> Var:
        return self.record(lambda x, y: (x * y, None), (a, b),
                           lambda g, _, x, y: (g * y, g * x))

    def scale(self, a, c: float) -> Var:
        return self.record(lambda x: (x * c, None), (a,), lambda g, _, x: (g * c,))

    def matmul(self, a, b) -> Var:
        def vjp(g, _, x, y):
            gx = g @ np.swapaxes(y, -1, -2) if y.ndim > 1 else np.multiply.outer(g, y)
            if x.ndim > 1:
                gy = np.swapaxes(x, -1, -2) @ g
            else:
                gy = np.multiply.outer(x, g)
            return gx, gy
        return self.record(lambda x, y: (x @ y, None), (a, b), vjp)

    def transpose(self, a, axes: tuple) -> Var:
        inv = tuple(np.argsort(axes))
        return self.record(lambda x: (np.transpose(x, axes), None), (a,),
                           lambda g, _, x: (np.transpose(g, inv),))

    def reshape(self, a, shape: tuple) -> Var:
        return self.record(lambda x: (x.reshape(shape), None), (a,),
                           lambda g, _, x: (g.reshape(x.shape),))

    def gather(self, a, index) -> Var:
        """Rows ``a[index]`` (first axis); repeated indices accumulate."""
        index = np.asarray(index)

        def vjp(g, _, x):
            out = np.zeros_like(x)
            np.add.at(out, index, g)
            return (out,)
        return self.record(lambda x: (x[index], None), (a,), vjp)

    def concat(self, parts: Sequence, axis: int = 0) -> Var:
        def forward(*xs):
            return np.concatenate(xs, axis=axis), np.cumsum([x.shape[axis] for x in xs])[:-1]

        def vjp(g, splits, *xs):
            return tuple(np.split(g, splits, axis=axis))
        return self.record(forward, parts, vjp)

    def sum(self, a) -> Var:
        return self.record(lambda x: (np.array(x.sum()), None), (a,),
                           lambda g, _, x: (np.broadcast_to(g, x.shape).copy(),))

    def mean(self, a) -> Var:
        return self.record(lambda x: (np.array(x.mean()), None), (a,),
                           lambda g, _, x: (np.broadcast_to(g / x.size, x.shape).copy(),))

    def mean_rows(self, a) -> Var:
        """Mean over the second-to-last axis."""
        return self.record(lambda x: (x.mean(axis=-2), None), (a,),
                           lambda g, _, x: (np.broadcast_to(np.expand_dims(g, -2) / x.shape[-2], x.shape).copy(),))

    def square(self, a) -> Var:
        return self.record(lambda x: (x * x, None), (a,), lambda g, _, x: (2.0 * g * x,))

    def exp(self, a) -> Var:
        return self.record(lambda x: (np.exp(x), None), (a,), lambda g, _, x: (g * np.exp(x),))

    def log(self, a) -> Var:
        return self.record(lambda x: (np.log(x), None), (a,), lambda g, _, x: (g / x,))

    def gelu(self, a) -> Var:
        def forward(x):
            cdf = 0.5 * (1.0 + erf(x / _SQRT2))
            return x * cdf, cdf

        def vjp(g, cdf, x):
            return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)
        return self.record(forward, (a,), vjp)

    def layer_norm(self, x, gain, bias, eps: float = 1e-5) -> Var:
        def forward(x, w, b):
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
            xhat = xc * inv
            return w * xhat + b, (xhat, inv)

        def vjp(g, ctx, x, w, b):
            xhat, inv = ctx
            gx_hat = g * w
            n = x.shape[-1]
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
            return gx, g * xhat, g
        return self.record(forward, (x, gain, bias), vjp)

    def softmax_masked(self, scores, allowed) -> Var:
        allowed = np.asarray(allowed, dtype=bool)

        def forward(s):
            p = softmax_masked(s, allowed)
            return p, p

        def vjp(g, p, s):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
        return self.record(forward, (scores,), vjp)

    def log_softmax(self, logits) -> Var:
        def forward(x):
            m = x.max(axis=-1, keepdims=True)
            lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
            out = x - lse
            return out, np.exp(out)

        def vjp(g, p, x):
            return (g - p * g.sum(axis=-1, keepdims=True),)
        return self.record(forward, (logits,), vjp)

    def normalize_rows(self, a, eps: float = 1e-12) -> Var:
        """L2-normalise along the last axis."""
        def forward(x):
            norm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + eps
            return x / norm, norm

        def vjp(g, norm, x):
            y = x / norm
            return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)
        return self.record(forward, (a,), vjp)


def grad_check(f: Callable, params: Sequence, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, *param_vars)`` must build a scalar :class:`Var` on ``tape``.
    Relative error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        out = f(tape, *[tape.param(v) for v in values])
        val = float(out.value)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite objective")
        return tape, out, val

    tape, out, _ = evaluate(params)
    tape.backward(out)
    analytic = [tape.vars[i].grad for i in range(len(params))]

    worst = 0.0
    for pi, p in enumerate(params):
        ga = analytic[pi] if analytic[pi] is not None else np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = evaluate(params)[2]
            p[idx] = orig - h
            fm = evaluate(params)[2]
            p[idx] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(ga[idx] - num) / max(1.0, abs(num)))
    return worst
