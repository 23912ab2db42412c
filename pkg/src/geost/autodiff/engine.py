"""Tape-based reverse-mode differentiation over a fixed set of numpy primitives.

A :class:`Tape` records nodes in creation order, which is a topological order
by construction. ``Tape.backward`` walks it in reverse and accumulates
adjoints into every node that depends on a trainable leaf.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Var:
    __slots__ = ("tape", "id", "value", "grad", "kind", "inputs", "requires_grad", "_backward")

    def __init__(self, tape: "Tape", value: np.ndarray, kind: str, inputs: Tuple["Var", ...],
                 requires_grad: bool, backward: Optional[BackwardFn]):
        self.tape = tape
        self.id = len(tape.nodes)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.kind = kind
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._backward = backward if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.id} {self.kind} shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: List[Var] = []

    def constant(self, value) -> Var:
        return self._record("const", np.asarray(value), (), None, leaf_grad=False)

    def param(self, value) -> Var:
        """Trainable leaf; its adjoint is populated by :meth:`backward`."""
        return self._record("param", np.asarray(value), (), None, leaf_grad=True)

    def _record(self, kind, value, inputs, backward, leaf_grad=False) -> Var:
        requires = leaf_grad or any(x.requires_grad for x in inputs)
        node = Var(self, value, kind, tuple(inputs), requires, backward)
        self.nodes.append(node)
        return node

    def backward(self, loss: Var) -> None:
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


Operand = Union[Var, np.ndarray, float]


def _find_tape(xs: Sequence[Operand]) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x: Operand) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _lift_all(*xs: Operand) -> Tuple[Tape, List[Var]]:
    tape = _find_tape(xs)
    return tape, [_lift(tape, x) for x in xs]


# --- primitives -------------------------------------------------------------


def affine(x: Operand, W: Operand, b: Operand) -> Var:
    """Row-wise ``x @ W + b`` over the last axis of ``x``."""
    tape, (x, W, b) = _lift_all(x, W, b)
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
        raise ValueError(f"affine shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
    out = xv @ Wv + bv

    def backward(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ Wv.T, x2.T @ g2, g2.sum(axis=0)

    return tape._record("affine", out, (x, W, b), backward)


def leaky_relu(x: Operand, slope: float) -> Var:
    """``max(x, slope*x)``; the subgradient at 0 is 1."""
    if not 0 < slope < 1:
        raise ValueError("slope must lie in (0, 1)")
    tape, (x,) = _lift_all(x)
    pos = x.value >= 0
    out = np.where(pos, x.value, x.value * x.value.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return tape._record("leaky_relu", out, (x,), backward)


def gather_rows(x: Operand, idx) -> Var:
    """``out[i, j] = x[idx[i, j]]``; backward scatter-adds."""
    tape, (x,) = _lift_all(x)
    idx = np.asarray(idx)
    n = x.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("gather index out of range")
    out = x.value[idx]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx.ravel(), g.reshape(-1, *x.value.shape[1:]))
        return (gx,)

    return tape._record("gather_rows", out, (x,), backward)


def take_rows(x: Operand, idx) -> Var:
    """Index the first axis with an integer or an index array."""
    tape, (x,) = _lift_all(x)
    out = x.value[idx]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return tape._record("take_rows", out, (x,), backward)


def concat_last(a: Operand, b: Operand) -> Var:
    tape, (a, b) = _lift_all(a, b)
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise ValueError(f"concat shape mismatch: {a.value.shape} vs {b.value.shape}")
    split = a.value.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)

    def backward(g):
        return g[..., :split], g[..., split:]

    return tape._record("concat_last", out, (a, b), backward)


def mean_pool_neighbors(x: Operand) -> Var:
    """Mean over axis 1 of an ``[n, k, d]`` tensor."""
    tape, (x,) = _lift_all(x)
    if x.value.ndim != 3 or x.value.shape[1] < 1:
        raise ValueError("mean_pool_neighbors expects [n, k>=1, d]")
    k = x.value.shape[1]
    out = x.value.mean(axis=1)

    def backward(g):
        return (np.broadcast_to((g / g.dtype.type(k))[:, None, :], x.value.shape).copy(),)

    return tape._record("mean_pool", out, (x,), backward)


def chamfer(A: Operand, B: Operand) -> Var:
    """Symmetric Chamfer distance with squared distances and per-side means.

    Nearest-neighbor ties pick the lowest index, and gradients flow through
    those pairings.
    """
    tape, (A, B) = _lift_all(A, B)
    av, bv = A.value, B.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ValueError(f"chamfer expects [a, D] and [b, D], got {av.shape} and {bv.shape}")
    if len(av) == 0 or len(bv) == 0:
        raise ValueError("chamfer of an empty set")
    d2 = ((av[:, None, :] - bv[None, :, :]) ** 2).sum(-1)
    ia = d2.argmin(axis=1)
    ib = d2.argmin(axis=0)
    na, nb = len(av), len(bv)
    out = d2[np.arange(na), ia].mean() + d2[ib, np.arange(nb)].mean()

    def backward(g):
        dt = av.dtype.type
        diff_a = av - bv[ia]
        diff_b = av[ib] - bv
        ga = diff_a * dt(2.0 / na)
        gb = -diff_a * dt(2.0 / na)
        gb_full = np.zeros_like(bv)
        np.add.at(gb_full, ia, gb)
        ga_full = ga.copy()
        np.add.at(ga_full, ib, diff_b * dt(2.0 / nb))
        gb_full -= diff_b * dt(2.0 / nb)
        return ga_full * g, gb_full * g

    return tape._record("chamfer", np.asarray(out), (A, B), backward)


def squared_l2_rows(x: Operand) -> Var:
    tape, (x,) = _lift_all(x)
    out = (x.value**2).sum(axis=-1)

    def backward(g):
        return (2 * x.value * g[..., None],)

    return tape._record("squared_l2_rows", out, (x,), backward)


def l2_rows(x: Operand) -> Var:
    tape, (x,) = _lift_all(x)
    norm = np.sqrt((x.value**2).sum(axis=-1))

    def backward(g):
        safe = np.where(norm > 0, norm, 1)
        return (np.where(norm[..., None] > 0, x.value / safe[..., None], 0) * g[..., None],)

    return tape._record("l2_rows", norm, (x,), backward)


# --- plumbing ---------------------------------------------------------------


def add(a: Operand, b: Operand) -> Var:
    tape, (a, b) = _lift_all(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return tape._record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Var:
    tape, (a, b) = _lift_all(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    return tape._record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def add_n(xs: Sequence[Var]) -> Var:
    tape, xs = _lift_all(*xs)
    out = xs[0].value.copy()
    for x in xs[1:]:
        out = out + x.value
    return tape._record("add_n", out, tuple(xs), lambda g: (g,) * len(xs))


def scale(x: Operand, c: float) -> Var:
    tape, (x,) = _lift_all(x)
    c = x.value.dtype.type(c)
    return tape._record("scale", x.value * c, (x,), lambda g: (g * c,))


def total(x: Operand) -> Var:
    tape, (x,) = _lift_all(x)
    out = np.asarray(x.value.sum())
    return tape._record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.value.shape).copy(),))


def mean(x: Operand) -> Var:
    tape, (x,) = _lift_all(x)
    size = x.value.size
    out = np.asarray(x.value.mean())

    def backward(g):
        return (np.full(x.value.shape, g / g.dtype.type(size), dtype=x.value.dtype),)

    return tape._record("mean", out, (x,), backward)


def reshape(x: Operand, shape) -> Var:
    tape, (x,) = _lift_all(x)
    src = x.value.shape
    return tape._record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))
