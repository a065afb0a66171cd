"""Reverse-mode differentiation over a recorded graph of registration primitives.

Every primitive computes its forward value with plain numpy and records a
hand-written adjoint. Only the handful of operations the registration losses
need are provided; there is no operator overloading.

    >>> p = Program(lambda m: ops.inner(m, m))
    >>> value, (grad,) = p.value_and_grad(np.ones(3))
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels, grid as G
from .similarity import MkLnccConfig, mk_lncc_arrays
from .smoothing import MultiGaussianKernel, smooth_array


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("value", "parents", "adjoint", "requires_grad")

    def __init__(self, value, parents=(), adjoint=None, requires_grad=None):
        self.value = value
        self.parents = tuple(parents)
        self.adjoint = adjoint
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def param(value) -> Node:
    """Leaf whose gradient is wanted."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False)


def _topological(out: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of the scalar ``out`` with respect to each node in ``wrt``."""
    if np.size(out.value) != 1:
        raise ValueError("backward needs a scalar output")
    grads = {id(out): np.ones_like(out.value, dtype=np.float64)}
    for node in reversed(_topological(out)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite adjoint encountered during backward pass")
        needs = tuple(p.requires_grad for p in node.parents)
        for p, pg in zip(node.parents, node.adjoint(g, needs)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    out_grads = []
    for w in wrt:
        g = grads.get(id(w))
        out_grads.append(np.zeros_like(w.value, dtype=np.float64) if g is None else g)
    return out_grads


class Program:
    """A loss recorded from a builder function of parameter nodes.

    Each call re-records the graph from the given inputs; replaying with the
    same inputs gives bitwise-identical values and gradients.
    """

    def __init__(self, build: Callable[..., Node]):
        self.build = build

    def value(self, *params) -> float:
        out = self.build(*[const(p) for p in params])
        return float(out.value)

    def value_and_grad(self, *params):
        nodes = [param(p) for p in params]
        out = self.build(*nodes)
        if not np.isfinite(out.value):
            raise NonFiniteError(f"loss evaluated to {float(out.value)}")
        return float(out.value), backward(out, nodes)


# ---------------------------------------------------------------------------
# primitives


class ops:
    """Namespace of differentiable primitives."""

    @staticmethod
    def add(a, b) -> Node:
        a, b = const(a), const(b)
        return Node(a.value + b.value, (a, b), lambda g, n: (g, g))

    @staticmethod
    def sub(a, b) -> Node:
        a, b = const(a), const(b)
        return Node(a.value - b.value, (a, b), lambda g, n: (g, -g))

    @staticmethod
    def scale(a, c: float) -> Node:
        a = const(a)
        return Node(c * a.value, (a,), lambda g, n: (c * g,))

    @staticmethod
    def lincomb(nodes, coeffs) -> Node:
        """sum_i c_i * x_i for same-shaped nodes."""
        nodes = [const(x) for x in nodes]
        coeffs = [float(c) for c in coeffs]
        value = coeffs[0] * nodes[0].value
        for c, x in zip(coeffs[1:], nodes[1:]):
            value = value + c * x.value
        return Node(value, nodes, lambda g, n: tuple(c * g for c in coeffs))

    @staticmethod
    def inner(a, b) -> Node:
        """Full contraction sum(a * b)."""
        a, b = const(a), const(b)
        value = np.sum(a.value * b.value)
        return Node(value, (a, b), lambda g, n: (
            g * b.value if n[0] else None, g * a.value if n[1] else None))

    @staticmethod
    def sqnorm(a) -> Node:
        a = const(a)
        return Node(np.sum(a.value * a.value), (a,), lambda g, n: (2.0 * g * a.value,))

    @staticmethod
    def crop(a, slices) -> Node:
        a = const(a)
        slices = tuple(slices)

        def adjoint(g, n):
            out = np.zeros_like(a.value)
            out[slices] = g
            return (out,)

        return Node(a.value[slices], (a,), adjoint)

    @staticmethod
    def matmul(a, b) -> Node:
        """Matrix-matrix or matrix-vector product."""
        a, b = const(a), const(b)

        def adjoint(g, n):
            ga = gb = None
            if n[0]:
                ga = np.outer(g, b.value) if b.value.ndim == 1 else g @ b.value.T
            if n[1]:
                gb = a.value.T @ g
            return ga, gb

        return Node(a.value @ b.value, (a, b), adjoint)

    @staticmethod
    def affine_map(A, b, coords: np.ndarray) -> Node:
        """A x + b at every coordinate; ``coords`` has shape (d, *dims)."""
        A, b = const(A), const(b)
        d = coords.shape[0]
        flat = coords.reshape(d, -1)
        value = (A.value @ flat + b.value[:, None]).reshape(coords.shape)

        def adjoint(g, n):
            gf = g.reshape(d, -1)
            return (gf @ flat.T if n[0] else None, gf.sum(axis=1) if n[1] else None)

        return Node(value, (A, b), adjoint)

    @staticmethod
    def interp(data, grid: G.GridSpec, points) -> Node:
        """Multilinear (clamped) interpolation of ``data`` at ``points``."""
        data, points = const(data), const(points)
        interp = G.Interpolator(grid, points.value)
        if points.requires_grad:
            value, jac = interp.value_and_point_gradient(data.value)
        else:
            value, jac = interp.apply(data.value), None
        scalar = data.value.ndim == grid.ndim

        def adjoint(g, n):
            gd = gp = None
            if n[0]:
                gd = interp.adjoint(g)
            if n[1]:
                gp = jac * g if scalar else np.einsum("c...,ca...->a...", g, jac)
            return gd, gp

        return Node(value, (data, points), adjoint)

    @staticmethod
    def resample(a, src: G.GridSpec, dst: G.GridSpec) -> Node:
        a = const(a)
        return Node(G.resample_array(a.value, src, dst), (a,),
                    lambda g, n: (G.resample_array_adjoint(g, src, dst),))

    @staticmethod
    def smooth(m, grid: G.GridSpec, kernel: MultiGaussianKernel) -> Node:
        m = const(m)
        return Node(smooth_array(m.value, grid, kernel), (m,),
                    lambda g, n: (smooth_array(g, grid, kernel),))

    @staticmethod
    def advection_rhs(phi, v, grid: G.GridSpec) -> Node:
        """-(D phi) v: the right-hand side of phi_t + (D phi) v = 0."""
        phi, v = const(phi), const(v)
        h = np.array(grid.spacing, dtype=np.float64)
        pad = (1,) if grid.ndim == 2 else ()
        p4 = phi.value.reshape(phi.value.shape + pad)
        v4 = v.value.reshape(v.value.shape + pad)
        value = _kernels.advection_rhs(p4, v4, h).reshape(phi.value.shape)

        def adjoint(g, n):
            gphi, gv = _kernels.advection_rhs_adjoint(g.reshape(g.shape + pad), p4, v4, h,
                                                      n[0], n[1])
            return (gphi.reshape(phi.value.shape) if n[0] else None,
                    gv.reshape(v.value.shape) if n[1] else None)

        return Node(value, (phi, v), adjoint)

    @staticmethod
    def mk_lncc(x, y, cfg: MkLnccConfig) -> Node:
        x, y = const(x), const(y)
        value, gx, gy = mk_lncc_arrays(x.value, y.value, cfg, with_grad=True)
        return Node(np.float64(value), (x, y), lambda g, n: (g * gx, g * gy))


# ---------------------------------------------------------------------------
# composite programs


def rk4_advect(phi0, v, grid: G.GridSpec, n_steps: int) -> Node:
    """Integrate phi_t = -(D phi) v over unit time with classical RK4."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = 1.0 / n_steps
    phi = const(phi0)
    for _ in range(n_steps):
        k1 = ops.advection_rhs(phi, v, grid)
        k2 = ops.advection_rhs(ops.lincomb([phi, k1], [1.0, 0.5 * dt]), v, grid)
        k3 = ops.advection_rhs(ops.lincomb([phi, k2], [1.0, 0.5 * dt]), v, grid)
        k4 = ops.advection_rhs(ops.lincomb([phi, k3], [1.0, dt]), v, grid)
        phi = ops.lincomb([phi, k1, k2, k3, k4], [1.0, dt / 6, dt / 3, dt / 3, dt / 6])
        if not np.all(np.isfinite(phi.value)):
            raise NonFiniteError("advection produced non-finite values; reduce the velocity or add steps")
    return phi


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, indices,
                           h: float = 1e-4) -> np.ndarray:
    """Central differences of ``fn`` at the given flat indices of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out
