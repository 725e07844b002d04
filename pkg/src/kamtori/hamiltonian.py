"""Integrable parts K(y) and closed-form test Hamiltonians.

During the iteration K_j = K_0 + K~_0 + ... + K~_{j-1}: an exact base (a
quadratic) plus angle averages of earlier perturbations, each stored as a
GridFunction on its own small action box.  Keeping the base exact avoids
differentiating a large function on a tiny box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .funcrep import GridFunction, cheb_diff_matrix, cheb_nodes, cheb_weights, barycentric_matrix


@dataclass(frozen=True)
class QuadraticBase:
    """c + b.y + y.A.y / 2."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    @classmethod
    def identity(cls, d: int) -> "QuadraticBase":
        return cls(np.eye(d), np.zeros(d), 0.0)

    def value(self, y):
        y = np.asarray(y)
        return self.c + y @ self.b + 0.5 * np.einsum("...i,ij,...j->...", y, self.A, y)

    def grad(self, y):
        return np.asarray(y) @ self.A.T + self.b

    def hess(self, y):
        y = np.asarray(y)
        return np.broadcast_to(self.A, y.shape[:-1] + self.A.shape)

    def third(self, y):
        y = np.asarray(y)
        d = self.A.shape[0]
        return np.zeros(y.shape[:-1] + (d, d, d))


class ActionInterpolant:
    """Polynomial interpolant through a node table with cached action derivatives.

    ``values`` has shape ``(M,)*d + trailing``; derivatives of order <= 3 are
    returned with the derivative axes placed right after the point axis.
    """

    def __init__(self, values: np.ndarray, domain):
        self.domain = domain
        self.d = domain.d
        self.M = values.shape[0]
        self.values = values
        self.trailing = values.shape[self.d:]
        D = cheb_diff_matrix(self.M)
        h = domain.halfwidth
        self._D = [D / h[i] if h[i] > 0 else np.zeros_like(D) for i in range(self.d)]
        self._cache = {}

    def _deriv(self, orders: tuple) -> np.ndarray:
        if orders not in self._cache:
            v = self.values
            for i, q in enumerate(orders):
                for _ in range(q):
                    v = np.moveaxis(np.tensordot(self._D[i], v, axes=([1], [i])), 0, i)
            self._cache[orders] = v
        return self._cache[orders]

    def weights(self, y):
        t_nodes = cheb_nodes(self.M)
        w = cheb_weights(self.M)
        out = []
        for i in range(self.d):
            h = self.domain.halfwidth[i]
            t = (y[..., i] - self.domain.center[i]) / h if h > 0 else np.zeros(y.shape[:-1])
            out.append(barycentric_matrix(t_nodes, w, t))
        return out

    def _interp(self, table, mats):
        out = np.einsum("m...,pm->p...", table, mats[0])
        for i in range(1, self.d):
            out = np.einsum("pm...,pm->p...", out, mats[i])
        return out

    def derivatives(self, y, order: int):
        """[value, gradient, Hessian, third derivative] up to ``order`` at points y (..., d)."""
        y = np.asarray(y)
        shape = y.shape[:-1]
        yf = y.reshape(-1, self.d)
        mats = self.weights(yf)
        d = self.d
        out = [self._interp(self.values, mats).reshape(shape + self.trailing)]
        for q in range(1, order + 1):
            combos = list(np.ndindex(*(d,) * q))
            parts = []
            for idx in combos:
                o = [0] * d
                for i in idx:
                    o[i] += 1
                parts.append(self._interp(self._deriv(tuple(o)), mats))
            arr = np.stack(parts, axis=1).reshape((yf.shape[0],) + (d,) * q + self.trailing)
            out.append(arr.reshape(shape + (d,) * q + self.trailing))
        return out


class ActionCorrection(ActionInterpolant):
    """The angle average of a GridFunction, as a function of the actions."""

    def __init__(self, f: GridFunction):
        v = np.asarray(f.mean())
        super().__init__(v.real.copy() if f.reality_flag else v, f.domain)


@dataclass(frozen=True)
class IntegrablePart:
    """K(y) = base(y) + sum of action corrections."""

    base: QuadraticBase
    corrections: tuple = field(default_factory=tuple)

    @property
    def d(self) -> int:
        return self.base.A.shape[0]

    def add(self, f: GridFunction) -> "IntegrablePart":
        if f.is_zero():
            return self
        return IntegrablePart(self.base, self.corrections + (ActionCorrection(f),))

    def value(self, y):
        out = self.base.value(y)
        for c in self.corrections:
            out = out + c.derivatives(y, 0)[0]
        return out

    def grad(self, y):
        out = self.base.grad(y)
        for c in self.corrections:
            out = out + c.derivatives(y, 1)[1]
        return out

    def hess(self, y):
        out = self.base.hess(y)
        for c in self.corrections:
            out = out + c.derivatives(y, 2)[2]
        return out

    def third(self, y):
        out = self.base.third(y)
        for c in self.corrections:
            out = out + c.derivatives(y, 3)[3]
        return out


@dataclass(frozen=True)
class TrigHamiltonian:
    """H(y, x) = y.A.y/2 + b.y + sum_k (a_k cos(k.x) + c_k sin(k.x)), closed form.

    Used as an independent reference: it never touches the grid machinery.
    """

    A: np.ndarray
    b: np.ndarray
    modes: np.ndarray
    cos_amp: np.ndarray
    sin_amp: np.ndarray

    @classmethod
    def build(cls, A, b, terms) -> "TrigHamiltonian":
        """``terms``: iterable of (k, a_cos, a_sin)."""
        terms = list(terms)
        d = np.asarray(A).shape[0]
        modes = np.array([t[0] for t in terms], dtype=float).reshape(-1, d)
        return cls(np.asarray(A, dtype=float), np.asarray(b, dtype=float), modes,
                   np.array([t[1] for t in terms], dtype=float),
                   np.array([t[2] for t in terms], dtype=float))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def value(self, y, x):
        y = np.asarray(y)
        ph = np.asarray(x) @ self.modes.T
        K = 0.5 * np.einsum("...i,ij,...j->...", y, self.A, y) + y @ self.b
        return K + np.cos(ph) @ self.cos_amp + np.sin(ph) @ self.sin_amp

    def grad_y(self, y, x):
        return np.asarray(y) @ self.A.T + self.b + 0.0 * np.asarray(x)

    def grad_x(self, y, x):
        ph = np.asarray(x) @ self.modes.T
        w = -np.sin(ph) * self.cos_amp + np.cos(ph) * self.sin_amp
        return w @ self.modes + 0.0 * np.asarray(y)

    def vector_field(self, z):
        """(dy/dt, dx/dt) = (-H_x, H_y) for z = (y, x) stacked on the last axis."""
        d = self.d
        y, x = z[..., :d], z[..., d:]
        return np.concatenate([-self.grad_x(y, x), self.grad_y(y, x)], axis=-1)

    def perturbation_terms(self) -> dict:
        """Complex Fourier terms {k: c_k} of the angle-dependent part."""
        out = {}
        for k, a, b in zip(self.modes.astype(int), self.cos_amp, self.sin_amp):
            kp, km = tuple(k), tuple(-k)
            out[kp] = out.get(kp, 0) + 0.5 * (a - 1j * b)
            out[km] = out.get(km, 0) + 0.5 * (a + 1j * b)
        return out


GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def worked_example(amplitude: float, modes=((1, 0), (1, 1)), A=None,
                   b=None) -> TrigHamiltonian:
    """|y|^2/2 + amplitude * sum_k cos(k.x), the d = 2 test family."""
    d = len(modes[0])
    A = np.eye(d) if A is None else np.asarray(A, dtype=float)
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
    return TrigHamiltonian.build(A, b, [(k, amplitude, 0.0) for k in modes])
