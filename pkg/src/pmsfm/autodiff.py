"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records every intermediate array produced while evaluating a scalar
loss; backward() then replays the recorded closures in reverse to accumulate
exact first derivatives into the leaves.  Ops are vectorized: one tape node
per array operation, so a full loss evaluation stays a few hundred nodes even
for thousands of residual terms.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("tape", "value", "grad", "_parents", "_backward")

    def __init__(self, tape, value, parents=(), backward=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward
        tape.nodes.append(self)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    def __init__(self):
        self.nodes = []

    def leaf(self, value):
        return Var(self, np.asarray(value, dtype=float))


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g, shape):
    """Sum g down to the given shape (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(var, g):
    if not isinstance(var, Var):
        return
    g = _unbroadcast(g, var.value.shape)
    if var.grad is None:
        var.grad = np.array(g)  # copy: g may alias another node's grad
    else:
        var.grad += g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad for every tape node."""
    tape = loss.tape
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for n in reversed(tape.nodes):
        if n.grad is not None and n._backward is not None:
            n._backward(n.grad)


# --- elementwise ops -----------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(_tape_of(a, b), av + bv, (a, b))
    def bw(g):
        _accum(a, g)
        _accum(b, g)
    out._backward = bw
    return out


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(_tape_of(a, b), av - bv, (a, b))
    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    out._backward = bw
    return out


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(_tape_of(a, b), av * bv, (a, b))
    def bw(g):
        _accum(a, g * bv)
        _accum(b, g * av)
    out._backward = bw
    return out


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(_tape_of(a, b), av / bv, (a, b))
    def bw(g):
        _accum(a, g / bv)
        _accum(b, -g * av / (bv * bv))
    out._backward = bw
    return out


def neg(a):
    out = Var(a.tape, -a.value, (a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def exp(a):
    ev = np.exp(value_of(a))
    out = Var(a.tape, ev, (a,))
    out._backward = lambda g: _accum(a, g * ev)
    return out


def log(a):
    av = value_of(a)
    out = Var(a.tape, np.log(av), (a,))
    out._backward = lambda g: _accum(a, g / av)
    return out


def sqrt(a):
    sv = np.sqrt(value_of(a))
    out = Var(a.tape, sv, (a,))
    out._backward = lambda g: _accum(a, g * 0.5 / sv)
    return out


def pow_const(a, p):
    av = value_of(a)
    out = Var(a.tape, av ** p, (a,))
    out._backward = lambda g: _accum(a, g * p * av ** (p - 1.0))
    return out


def safe_recip_pos(z, eps):
    """1/z where z > eps, exactly 0 elsewhere (no NaN for masked-out terms)."""
    zv = value_of(z)
    ok = zv > eps
    rv = np.where(ok, 1.0 / np.where(ok, zv, 1.0), 0.0)
    out = Var(z.tape, rv, (z,))
    out._backward = lambda g: _accum(z, np.where(ok, -g * rv * rv, 0.0))
    return out


# --- reductions and shape ops --------------------------------------

def vsum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = Var(a.tape, av.sum(axis=axis, keepdims=keepdims), (a,))
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, av.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, av.shape))
    out._backward = bw
    return out


def stack(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    out = Var(_tape_of(*xs), np.stack(vals, axis=axis), tuple(xs))
    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for x, gx in zip(xs, parts):
            _accum(x, gx)
    out._backward = bw
    return out


def concat(xs, axis=0):
    vals = [value_of(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    out = Var(_tape_of(*xs), np.concatenate(vals, axis=axis), tuple(xs))
    def bw(g):
        offs = np.cumsum([0] + sizes)
        for x, lo, hi in zip(xs, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(x, g[tuple(sl)])
    out._backward = bw
    return out


def reshape(a, shape):
    av = value_of(a)
    out = Var(a.tape, av.reshape(shape), (a,))
    out._backward = lambda g: _accum(a, g.reshape(av.shape))
    return out


def take(a, key):
    """Static basic indexing (slices / ints); gradient scatters back."""
    av = value_of(a)
    out = Var(a.tape, av[key], (a,))
    def bw(g):
        z = np.zeros_like(av)
        z[key] += g
        _accum(a, z)
    out._backward = bw
    return out


def gather(a, idx):
    """Row gather a[idx] along axis 0; backward is scatter-add."""
    av = value_of(a)
    idx = np.asarray(idx)
    out = Var(a.tape, av[idx], (a,))
    def bw(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        _accum(a, z)
    out._backward = bw
    return out


# --- batched linear algebra ----------------------------------------

def matmul33(A, B):
    """Batched matrix product (N,3,3) @ (N,3,3)."""
    Av, Bv = value_of(A), value_of(B)
    out = Var(_tape_of(A, B), np.einsum("nij,njk->nik", Av, Bv), (A, B))
    def bw(g):
        _accum(A, np.einsum("nik,njk->nij", g, Bv))
        _accum(B, np.einsum("nij,nik->njk", Av, g))
    out._backward = bw
    return out


def matvec(R, v):
    """Batched R @ v: (N,3,3), (N,3) -> (N,3)."""
    Rv, vv = value_of(R), value_of(v)
    out = Var(_tape_of(R, v), np.einsum("nij,nj->ni", Rv, vv), (R, v))
    def bw(g):
        _accum(R, np.einsum("ni,nj->nij", g, vv))
        _accum(v, np.einsum("nij,ni->nj", Rv, g))
    out._backward = bw
    return out


def matvec_t(R, v):
    """Batched R^T @ v: (N,3,3), (N,3) -> (N,3)."""
    Rv, vv = value_of(R), value_of(v)
    out = Var(_tape_of(R, v), np.einsum("nji,nj->ni", Rv, vv), (R, v))
    def bw(g):
        _accum(R, np.einsum("nj,ni->nji", vv, g))
        _accum(v, np.einsum("nji,ni->nj", Rv, g))
    out._backward = bw
    return out


def quat_to_rotmat(q):
    """Unit quaternions (N,4) -> rotation matrices (N,3,3), differentiable."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    two = 2.0
    r00 = 1.0 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1.0 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1.0 - two * (x * x + y * y)
    flat = stack([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=-1)
    return reshape(flat, (value_of(q).shape[0], 3, 3))


def normalize_rows(q):
    """Rows scaled to unit L2 norm, differentiable."""
    n = sqrt(vsum(mul(q, q), axis=-1, keepdims=True))
    return div(q, n)


def numeric_gradient(f, x0, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    for k in range(x0.size):
        hk = h * max(1.0, abs(x0.flat[k]))
        xp = x0.copy()
        xp.flat[k] += hk
        xm = x0.copy()
        xm.flat[k] -= hk
        g.flat[k] = (f(xp) - f(xm)) / (2 * hk)
    return g
