"""Minimal dense-tensor reverse-mode automatic differentiation.

Values are numpy arrays recorded on a :class:`Tape`; calling
:meth:`Tape.backward` on a scalar loss node accumulates gradients into the
participating :class:`Parameter` objects.  The op set is exactly what the
prediction model needs, plus batched variants of matmul and a few layout
ops so a whole training step stays inside large BLAS calls.

The default dtype is float64; a tape can be created with float32 when
throughput matters more than the last digits (gradient checks always run
in float64).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Parameter:
    """Named learnable array with an accumulated gradient of equal shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class Node:
    __slots__ = ("value", "parents", "vjps", "needs_grad", "grad", "param")

    def __init__(self, value, parents=(), vjps=(), needs_grad=False, param=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.needs_grad = needs_grad
        self.grad = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tape:
    """Records ops for one forward pass; backward runs once per tape."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._nodes: list[Node] = []
        self._consumed = False

    # -- leaves ------------------------------------------------------------

    def _record(self, node: Node) -> Node:
        self._nodes.append(node)
        return node

    def param(self, p: Parameter) -> Node:
        value = p.value.astype(self.dtype, copy=False)
        return self._record(Node(value, needs_grad=True, param=p))

    def const(self, x) -> Node:
        if isinstance(x, Node):
            return x
        return self._record(Node(np.asarray(x, dtype=self.dtype)))

    def _wrap(self, value, parents, vjps) -> Node:
        needs = any(p.needs_grad for p in parents)
        if not needs:
            return self._record(Node(value))
        return self._record(Node(value, parents=tuple(parents), vjps=tuple(vjps),
                                 needs_grad=True))

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        """Matrix product with optional transpose of b's last two axes.

        Supports 2-D x 2-D, batched x 2-D, 2-D x batched, and batched x
        batched with broadcastable leading axes.
        """
        av, bv = a.value, b.value
        bm = np.swapaxes(bv, -1, -2) if transpose_b else bv
        if av.shape[-1] != bm.shape[-2]:
            raise ShapeError(
                f"matmul: inner dims differ, {av.shape} @ "
                f"{bv.shape}{'^T' if transpose_b else ''}"
            )
        out = av @ bm

        def da(g):
            return _unbroadcast(g @ np.swapaxes(bm, -1, -2), av.shape)

        def db(g):
            gb = np.swapaxes(av, -1, -2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
            return _unbroadcast(gb, bv.shape)

        return self._wrap(out, (a, b), (da, db))

    def spmm(self, s, x: Node) -> Node:
        """Constant sparse (n, n) matrix times dense (..., n, d) node."""
        s = sp.csr_matrix(s)
        xv = x.value
        if xv.shape[-2] != s.shape[1]:
            raise ShapeError(f"spmm: {s.shape} @ {xv.shape}")
        st = s.T.tocsr()

        def apply(mat, v):
            if v.ndim == 2:
                return np.asarray(mat @ v, dtype=v.dtype)
            lead = v.shape[:-2]
            flat = np.moveaxis(v.reshape(-1, *v.shape[-2:]), 0, -1)
            flat = flat.reshape(v.shape[-2], -1)
            out = np.asarray(mat @ flat, dtype=v.dtype)
            out = out.reshape(s.shape[0], -1, int(np.prod(lead)))
            return np.moveaxis(out, -1, 0).reshape(*lead, s.shape[0], v.shape[-1])

        out = apply(s.astype(self.dtype), xv)
        stc = st.astype(self.dtype)
        return self._wrap(out, (x,), (lambda g: apply(stc, g),))

    def add(self, a: Node, b: Node) -> Node:
        out = a.value + b.value
        return self._wrap(
            out,
            (a, b),
            (lambda g: _unbroadcast(g, a.value.shape),
             lambda g: _unbroadcast(g, b.value.shape)),
        )

    def add_bias_row(self, x: Node, bias: Node) -> Node:
        """Add a (d,) bias to every row of (..., d)."""
        if bias.value.ndim != 1 or x.value.shape[-1] != bias.value.shape[0]:
            raise ShapeError(f"add_bias_row: {x.value.shape} + {bias.value.shape}")
        return self.add(x, bias)

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._wrap(x.value * c, (x,), (lambda g: g * c,))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = np.where(mask, x.value, 0.0)
        return self._wrap(out, (x,), (lambda g: g * mask,))

    def sigmoid(self, x: Node) -> Node:
        v = x.value
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return self._wrap(out, (x,), (lambda g: g * out * (1.0 - out),))

    def softmax_rows(self, x: Node) -> Node:
        v = x.value
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def dx(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return out * (g - dot)

        return self._wrap(out, (x,), (dx,))

    def layernorm_rows(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
        """Normalize the last axis, then scale and shift."""
        if gamma.value.shape != (x.value.shape[-1],) or beta.value.shape != gamma.value.shape:
            raise ShapeError(
                f"layernorm_rows: gamma/beta {gamma.value.shape}/{beta.value.shape} "
                f"vs x {x.value.shape}"
            )
        v = x.value
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (v - mu) * inv
        out = xhat * gamma.value + beta.value
        d = v.shape[-1]

        def dx(g):
            gy = g * gamma.value
            return inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            )

        def dgamma(g):
            return (g * xhat).reshape(-1, d).sum(axis=0)

        def dbeta(g):
            return g.reshape(-1, d).sum(axis=0)

        return self._wrap(out, (x, gamma, beta), (dx, dgamma, dbeta))

    def concat_last_axis(self, parts: Sequence[Node]) -> Node:
        sizes = [p.value.shape[-1] for p in parts]
        out = np.concatenate([p.value for p in parts], axis=-1)
        offsets = np.cumsum([0] + sizes)

        def make_vjp(i):
            return lambda g: g[..., offsets[i]:offsets[i + 1]]

        return self._wrap(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))

    def stack(self, parts: Sequence[Node]) -> Node:
        """Stack along a new leading axis."""
        out = np.stack([p.value for p in parts], axis=0)

        def make_vjp(i):
            return lambda g: g[i]

        return self._wrap(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))

    def reshape(self, x: Node, shape) -> Node:
        orig = x.value.shape
        return self._wrap(x.value.reshape(shape), (x,), (lambda g: g.reshape(orig),))

    def flatten(self, x: Node) -> Node:
        return self.reshape(x, (-1,))

    def transpose_axes(self, x: Node, perm) -> Node:
        perm = tuple(perm)
        inv = tuple(np.argsort(perm))
        return self._wrap(
            np.ascontiguousarray(np.transpose(x.value, perm)),
            (x,),
            (lambda g: np.transpose(g, inv),),
        )

    def slice_rows(self, x: Node, start: int, stop: int) -> Node:
        """Contiguous slice along axis 0."""
        orig = x.value.shape

        def dx(g):
            full = np.zeros(orig, dtype=g.dtype)
            full[start:stop] = g
            return full

        return self._wrap(x.value[start:stop].copy(), (x,), (dx,))

    def sum_all(self, x: Node) -> Node:
        shape = x.value.shape
        return self._wrap(
            np.asarray(x.value.sum(), dtype=self.dtype),
            (x,),
            (lambda g: np.broadcast_to(g, shape).astype(self.dtype),),
        )

    def focal_loss_mean(self, yhat: Node, y, lam: float, gamma: float,
                        clamp: float = 1e-7) -> Node:
        """Mean focal loss over all elements of yhat against binary labels y.

        Per-term loss: -lam * y * (1-p)^gamma * log p
                       -(1-lam) * (1-y) * p^gamma * log(1-p)
        with p clamped to [clamp, 1-clamp] before the logs.
        """
        yv = np.asarray(y, dtype=self.dtype)
        if yv.shape != yhat.value.shape:
            raise ShapeError(f"focal loss: labels {yv.shape} vs yhat {yhat.value.shape}")
        p = np.clip(yhat.value, clamp, 1.0 - clamp)
        inside = (yhat.value > clamp) & (yhat.value < 1.0 - clamp)
        logp = np.log(p)
        log1p = np.log1p(-p)
        omp = 1.0 - p
        terms = -lam * yv * omp ** gamma * logp - (1.0 - lam) * (1.0 - yv) * p ** gamma * log1p
        count = terms.size
        out = np.asarray(terms.sum() / count, dtype=self.dtype)

        def dyhat(g):
            # d/dp of the per-term loss; gradient is zero where the clamp binds
            pos = -lam * yv * (-gamma * omp ** (gamma - 1.0) * logp + omp ** gamma / p)
            if gamma == 0.0:
                neg_pow_term = 0.0
            else:
                neg_pow_term = gamma * p ** (gamma - 1.0) * log1p
            neg = -(1.0 - lam) * (1.0 - yv) * (neg_pow_term - p ** gamma / omp)
            return g * inside * (pos + neg) / count

        return self._wrap(out, (yhat,), (dyhat,))

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d loss / d parameter into every touched Parameter.

        The loss must be scalar and a tape can only run backward once.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; build a new tape")
        if np.ndim(loss.value) != 0 and np.size(loss.value) != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None or not node.needs_grad:
                continue
            if node.param is not None:
                node.param.grad += node.grad.astype(np.float64)
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.needs_grad:
                    continue
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + contrib


def grad_check(
    build: Callable[[], tuple[Tape, Node]],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct a fresh tape and scalar loss from the current
    parameter values each time it is called.
    """
    for p in params:
        p.zero_grad()
    tape, loss = build()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        ad = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build()[1].value)
            flat[i] = orig - h
            fm = float(build()[1].value)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(ad[i] - fd) / max(1e-8, abs(ad[i]) + abs(fd))
            worst = max(worst, rel)
    return worst
