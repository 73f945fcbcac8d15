"""Minimal reverse-mode autodiff over numpy arrays.

Every backward rule is itself built from the same primitives, so gradients
are differentiable again — enough machinery for an MLP discriminator with a
gradient penalty (gradient-of-gradient w.r.t. the parameters)."""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph: a value, its parents, and a function
    producing parent cotangents (as Vars) from the upstream cotangent."""

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.vjp = vjp  # (upstream: Var) -> tuple of Vars aligned with parents

    @property
    def shape(self):
        return self.value.shape


def const(value) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError("add requires equal shapes; use add_bias for broadcasting")
    return Var(a.value + b.value, (a, b), lambda up: (up, up))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda up: (neg(up),))


def sub(a: Var, b: Var) -> Var:
    return add(a, neg(b))


def scale(a: Var, c: float) -> Var:
    return Var(c * a.value, (a,), lambda up: (scale(up, c),))


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError("mul requires equal shapes")
    return Var(a.value * b.value, (a, b), lambda up: (mul(up, b), mul(up, a)))


def matmul(a: Var, b: Var) -> Var:
    return Var(
        a.value @ b.value,
        (a, b),
        lambda up: (matmul(up, transpose(b)), matmul(transpose(a), up)),
    )


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda up: (transpose(up),))


def add_bias(x: Var, b: Var) -> Var:
    """(n, h) + (h,) with broadcasting over rows."""
    return Var(x.value + b.value, (x, b), lambda up: (up, sum_rows(up)))


def sum_rows(x: Var) -> Var:
    """Sum a (n, h) array over rows to (h,)."""
    n = x.value.shape[0]
    return Var(x.value.sum(axis=0), (x,), lambda up: (broadcast_rows(up, n),))


def broadcast_rows(b: Var, n: int) -> Var:
    """Tile an (h,) array to (n, h)."""
    return Var(np.broadcast_to(b.value, (n,) + b.value.shape).copy(), (b,), lambda up: (sum_rows(up),))


def total(x: Var) -> Var:
    """Sum of all elements, as a scalar Var."""
    shape = x.value.shape
    return Var(x.value.sum(), (x,), lambda up: (broadcast_full(up, shape),))


def broadcast_full(s: Var, shape) -> Var:
    return Var(np.broadcast_to(s.value, shape).copy(), (s,), lambda up: (total(up),))


def mean(x: Var) -> Var:
    return scale(total(x), 1.0 / x.value.size)


def square(x: Var) -> Var:
    return mul(x, x)


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    gate = np.where(x.value > 0.0, 1.0, slope)  # constant w.r.t. differentiation
    return Var(x.value * gate, (x,), lambda up: (mul(up, const(gate)),))


def sigmoid(x: Var) -> Var:
    s = Var(1.0 / (1.0 + np.exp(-x.value)), (x,), None)
    # derivative s (1 - s), expressed in primitives so it stays differentiable
    s.vjp = lambda up: (mul(up, mul(s, sub(const(np.ones_like(s.value)), s))),)
    return s


def softplus(x: Var) -> Var:
    v = np.logaddexp(0.0, x.value)
    return Var(v, (x,), lambda up: (mul(up, sigmoid(x)),))


def gan_f(x: Var) -> Var:
    """f(x) = -log(1 + exp(-x)); monotone increasing, bounded above by 0."""
    return neg(softplus(neg(x)))


def grad(output: Var, wrt: list[Var]) -> list[Var]:
    """Cotangents of a scalar ``output`` w.r.t. each Var in ``wrt``.

    The result is made of Vars, so it can be differentiated again."""
    if output.value.shape != ():
        raise ValueError("grad expects a scalar output")
    order = []
    seen = set()

    def topo(v):
        if id(v) in seen:
            return
        seen.add(id(v))
        for p in v.parents:
            topo(p)
        order.append(v)

    topo(output)
    cotan: dict[int, Var] = {id(output): const(1.0)}
    for v in reversed(order):
        up = cotan.get(id(v))
        if up is None or v.vjp is None:
            continue
        for p, g in zip(v.parents, v.vjp(up)):
            acc = cotan.get(id(p))
            cotan[id(p)] = g if acc is None else add(acc, g)
    out = []
    for w in wrt:
        c = cotan.get(id(w))
        out.append(c if c is not None else const(np.zeros_like(w.value)))
    return out
