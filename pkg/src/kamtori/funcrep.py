"""Real-analytic functions on strip domains D_{r,s}(box).

A :class:`GridFunction` stores, for every Chebyshev collocation node in the
action box, the Fourier coefficients in the angles.  Angle operations are
exact in coefficient space; action dependence is the polynomial interpolant
through the nodes, which also provides the complex extension in ``y``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from math import factorial
from typing import Sequence

import numpy as np
from scipy import optimize

DEFAULT_ANGLE_MODES = 64
DEFAULT_ACTION_NODES = 16


# ---------------------------------------------------------------------------
# 1-d building blocks
# ---------------------------------------------------------------------------

def cheb_nodes(m: int) -> np.ndarray:
    """Chebyshev points of the second kind on [-1, 1] (decreasing)."""
    if m == 1:
        return np.zeros(1)
    return np.cos(np.pi * np.arange(m) / (m - 1))


def cheb_weights(m: int) -> np.ndarray:
    if m == 1:
        return np.ones(1)
    w = (-1.0) ** np.arange(m)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def cheb_diff_matrix(m: int) -> np.ndarray:
    """Spectral differentiation matrix on the second-kind points (Trefethen)."""
    if m == 1:
        return np.zeros((1, 1))
    x = cheb_nodes(m)
    c = np.ones(m)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(m)
    dx = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dx + np.eye(m))
    D -= np.diag(D.sum(axis=1))
    return D


def barycentric_matrix(nodes: np.ndarray, weights: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Rows of interpolation weights so that ``B @ values`` interpolates at ``t``.

    Works for complex ``t``; exact node hits are handled explicitly.
    """
    t = np.asarray(t)
    if nodes.size == 1:
        return np.ones(t.shape + (1,), dtype=complex)
    diff = t[..., None] - nodes
    hit = diff == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        q = weights / diff
        B = q / q.sum(axis=-1, keepdims=True)
    rows = hit.any(axis=-1)
    if np.any(rows):
        B[rows] = hit[rows].astype(B.dtype)
    return B


def mode_numbers(n: int) -> np.ndarray:
    """Integer wave numbers in FFT order for an ``n``-point grid."""
    return np.fft.fftfreq(n, d=1.0 / n).round().astype(int)


def _kill_nyquist(c: np.ndarray, n_angle_axes: int) -> np.ndarray:
    c = c.copy()
    for ax in range(c.ndim - n_angle_axes, c.ndim):
        n = c.shape[ax]
        if n % 2 == 0:
            idx = [slice(None)] * c.ndim
            idx[ax] = n // 2
            c[tuple(idx)] = 0.0
    return c


def _resize_modes(c: np.ndarray, n_new: int, n_angle_axes: int) -> np.ndarray:
    """Zero-pad or truncate the trailing angle axes of a coefficient array."""
    out = c
    for ax in range(c.ndim - n_angle_axes, c.ndim):
        n_old = out.shape[ax]
        k_old = mode_numbers(n_old)
        half = (min(n_old, n_new) - 1) // 2
        keep = np.abs(k_old) <= half
        shape = list(out.shape)
        shape[ax] = n_new
        new = np.zeros(shape, dtype=complex)
        src = np.nonzero(keep)[0]
        dst = k_old[keep] % n_new
        sl_src = [slice(None)] * out.ndim
        sl_dst = [slice(None)] * out.ndim
        sl_src[ax] = src
        sl_dst[ax] = dst
        new[tuple(sl_dst)] = out[tuple(sl_src)]
        out = new
    return out


# ---------------------------------------------------------------------------
# domain and function types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StripDomain:
    """Complex neighbourhood D_{r,s}(box) of a real action box times T^d."""

    box: np.ndarray
    r: float
    s: float

    def __post_init__(self):
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        if box.shape[1] != 2 or box.shape[0] < 1:
            raise ValueError("box must have shape (d, 2)")
        if np.any(box[:, 1] < box[:, 0]):
            raise ValueError("box lower bounds exceed upper bounds")
        if not self.r > 0:
            raise ValueError("action strip radius r must be positive")
        if not 0 < self.s <= 1:
            raise ValueError("angle strip half-width s must lie in (0, 1]")
        object.__setattr__(self, "box", box)

    @property
    def d(self) -> int:
        return self.box.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.box.mean(axis=1)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.box[:, 1] - self.box[:, 0])

    @classmethod
    def around(cls, center, halfwidth, r, s) -> "StripDomain":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        hw = np.broadcast_to(np.asarray(halfwidth, dtype=float), center.shape)
        return cls(np.stack([center - hw, center + hw], axis=1), r, s)

    def with_strips(self, r=None, s=None) -> "StripDomain":
        return StripDomain(self.box, self.r if r is None else r, self.s if s is None else s)

    def same_as(self, other: "StripDomain") -> bool:
        return (np.array_equal(self.box, other.box) and self.r == other.r
                and self.s == other.s)

    def to_dict(self) -> dict:
        return {"box": self.box.tolist(), "r": self.r, "s": self.s}


@dataclass(frozen=True)
class NormReport:
    sup_norm: float
    grid_spec: dict
    tail_bound: float
    sampled_max: float

    def __float__(self):
        return float(self.sup_norm)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Fourier (angles) x Chebyshev collocation (actions) representation.

    ``coeffs`` has shape ``(M,)*d + (N,)*d``: the first ``d`` axes index action
    nodes, the last ``d`` axes index Fourier modes in FFT order.
    """

    domain: StripDomain
    coeffs: np.ndarray
    reality_flag: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        d = self.domain.d
        if c.ndim != 2 * d:
            raise ValueError(f"coefficient table must have {2 * d} axes, got {c.ndim}")
        if len(set(c.shape[:d])) != 1 or len(set(c.shape[d:])) != 1:
            raise ValueError("node and mode counts must be equal across dimensions")
        object.__setattr__(self, "coeffs", c)

    # -- shape helpers ----------------------------------------------------
    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def angle_modes(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def action_nodes(self) -> int:
        return self.coeffs.shape[0]

    @property
    def modes(self) -> list[np.ndarray]:
        return [mode_numbers(self.angle_modes)] * self.d

    def nodes(self) -> list[np.ndarray]:
        """Action node coordinates along each dimension."""
        t = cheb_nodes(self.action_nodes)
        return [c + h * t for c, h in zip(self.domain.center, self.domain.halfwidth)]

    def node_points(self) -> np.ndarray:
        """All action nodes as an array of shape ``(M,)*d + (d,)``."""
        return np.stack(np.meshgrid(*self.nodes(), indexing="ij"), axis=-1)

    def angle_grid(self, n: int | None = None) -> np.ndarray:
        n = self.angle_modes if n is None else n
        g = 2 * np.pi * np.arange(n) / n
        return np.stack(np.meshgrid(*([g] * self.d), indexing="ij"), axis=-1)

    def abs_k1(self) -> np.ndarray:
        ks = np.meshgrid(*self.modes, indexing="ij")
        return sum(np.abs(k) for k in ks)

    # -- algebra ------------------------------------------------------------
    def _new(self, coeffs, reality=None, domain=None) -> "GridFunction":
        return GridFunction(self.domain if domain is None else domain, coeffs,
                            self.reality_flag if reality is None else reality)

    def _check_compatible(self, other: "GridFunction"):
        if not self.domain.same_as(other.domain) or self.coeffs.shape != other.coeffs.shape:
            raise ValueError("grid functions live on different domains or grids")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check_compatible(other)
            return self._new(self.coeffs + other.coeffs,
                             self.reality_flag and other.reality_flag)
        c = self.coeffs.copy()
        c[(slice(None),) * self.d + (0,) * self.d] += other
        return self._new(c, self.reality_flag and np.isrealobj(other))

    __radd__ = __add__

    def __neg__(self):
        return self._new(-self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            return product(self, other)
        return self._new(self.coeffs * other, self.reality_flag and np.isrealobj(other))

    __rmul__ = __mul__

    def mean(self) -> np.ndarray:
        """Angle average at every action node, shape ``(M,)*d``."""
        return self.coeffs[(slice(None),) * self.d + (0,) * self.d]

    def mean_function(self) -> "GridFunction":
        c = np.zeros_like(self.coeffs)
        idx = (slice(None),) * self.d + (0,) * self.d
        c[idx] = self.coeffs[idx]
        return self._new(c)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def resample(self, n_modes: int) -> "GridFunction":
        return self._new(_resize_modes(self.coeffs, n_modes, self.d))

    def values(self, oversample: int = 1) -> np.ndarray:
        """Values on the (oversampled) real angle grid at every action node."""
        n = self.angle_modes * oversample
        c = _resize_modes(self.coeffs, n, self.d) if oversample != 1 else self.coeffs
        axes = tuple(range(self.d, 2 * self.d))
        v = np.fft.ifftn(c, axes=axes) * n ** self.d
        return v.real if self.reality_flag else v

    # -- evaluation ---------------------------------------------------------
    def _action_matrices(self, y: np.ndarray) -> list[np.ndarray]:
        t_nodes = cheb_nodes(self.action_nodes)
        w = cheb_weights(self.action_nodes)
        mats = []
        for i in range(self.d):
            t = (y[..., i] - self.domain.center[i]) / self.domain.halfwidth[i] \
                if self.domain.halfwidth[i] > 0 else np.zeros_like(y[..., i])
            mats.append(barycentric_matrix(t_nodes, w, t))
        return mats

    def angle_values_at_nodes(self, x: np.ndarray) -> np.ndarray:
        """Fourier sums at angle points ``x`` (shape (P, d)) for all nodes.

        Returns shape ``(P,) + (M,)*d``.
        """
        x = np.asarray(x).reshape(-1, self.d)
        M, N, d = self.action_nodes, self.angle_modes, self.d
        k = mode_numbers(N)
        E = [np.exp(1j * np.outer(x[:, i], k)) for i in range(d)]
        c = self.coeffs.reshape((M ** d,) + (N,) * d)
        out = np.empty((x.shape[0], M ** d), dtype=complex)
        for a in range(M ** d):
            out[:, a] = _fourier_sum(c[a], E)
        return out.reshape((x.shape[0],) + (M,) * d)

    def evaluate_at_node(self, node_index: tuple, x: np.ndarray) -> np.ndarray:
        """Fourier sum at angle points ``x`` (shape (..., d)) for one action node."""
        x = np.asarray(x)
        shape = x.shape[:-1]
        x = x.reshape(-1, self.d)
        k = mode_numbers(self.angle_modes)
        E = [np.exp(1j * np.outer(x[:, i], k)) for i in range(self.d)]
        return _fourier_sum(self.coeffs[node_index], E).reshape(shape)

    def __call__(self, y, x) -> np.ndarray:
        return evaluate(self, y, x)


def _fourier_sum(c: np.ndarray, E: Sequence[np.ndarray]) -> np.ndarray:
    """sum_k c[k] prod_i E_i[p, k_i] for each point p (separable contraction)."""
    d = len(E)
    P = E[0].shape[0]
    T = E[0] @ c.reshape(c.shape[0], -1)  # (P, rest)
    for i in range(1, d):
        T = T.reshape((P, c.shape[i], -1))
        T = np.einsum("pkr,pk->pr", T, E[i])
    return T.reshape(P)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def from_coefficients(coeffs, domain: StripDomain, cutoffs: tuple[int, int] | None = None,
                      reality_flag: bool = True, check_reality: bool = True,
                      tol: float = 1e-12) -> GridFunction:
    """Build a :class:`GridFunction` from a coefficient table.

    ``coeffs`` is either an array of shape ``(M,)*d + (N,)*d`` (FFT order) or a
    mapping ``{k-tuple: value}`` where ``value`` is a scalar (action
    independent) or an array over the action nodes.  ``cutoffs`` is ``(N, M)``.
    """
    d = domain.d
    N, M = cutoffs if cutoffs is not None else (None, None)
    if isinstance(coeffs, dict):
        N = DEFAULT_ANGLE_MODES if N is None else N
        M = 1 if M is None else M
        table = np.zeros((M,) * d + (N,) * d, dtype=complex)
        for k, v in coeffs.items():
            k = tuple(int(q) for q in np.atleast_1d(k))
            if len(k) != d:
                raise ValueError(f"mode {k} has wrong dimension for d={d}")
            if max(abs(q) for q in k) > (N - 1) // 2:
                raise ValueError(f"mode {k} exceeds the angle cutoff N={N}")
            idx = (slice(None),) * d + tuple(q % N for q in k)
            table[idx] += np.broadcast_to(np.asarray(v, dtype=complex), (M,) * d)
        coeffs = table
    else:
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.ndim != 2 * d:
            raise ValueError(f"coefficient table must have {2 * d} axes")
        if N is not None and coeffs.shape[-1] != N:
            raise ValueError("coefficient table inconsistent with angle cutoff")
        if M is not None and coeffs.shape[0] != M:
            raise ValueError("coefficient table inconsistent with node count")
        coeffs = _kill_nyquist(coeffs, d)
    f = GridFunction(domain, coeffs, reality_flag)
    if reality_flag and check_reality:
        err = reality_defect(f)
        scale = max(1.0, float(np.abs(coeffs).max(initial=0.0)))
        if err > tol * scale:
            raise ValueError(f"reality symmetry violated (defect {err:.3e})")
    return f


def reality_defect(f: GridFunction) -> float:
    """max |f_{-k}(y) - conj f_k(y)| over the stored table."""
    c = f.coeffs
    flipped = c
    for ax in range(f.d, 2 * f.d):
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    return float(np.abs(flipped - np.conj(c)).max(initial=0.0))


def from_samples(values: np.ndarray, domain: StripDomain, reality_flag: bool = True,
                 n_modes: int | None = None) -> GridFunction:
    """Analyse samples on the (node, uniform angle) grid into a GridFunction.

    ``values`` has shape ``(M,)*d + (n,)*d``; ``n_modes`` optionally truncates
    (anti-aliasing by oversampled sampling).
    """
    d = domain.d
    values = np.asarray(values)
    n = values.shape[-1]
    axes = tuple(range(d, 2 * d))
    c = np.fft.fftn(values, axes=axes) / n ** d
    c = _kill_nyquist(c, d)
    if n_modes is not None and n_modes != n:
        c = _resize_modes(c, n_modes, d)
    if reality_flag:
        c = _symmetrize(c, d)
    return GridFunction(domain, c, reality_flag)


def _symmetrize(c: np.ndarray, d: int) -> np.ndarray:
    flipped = c
    for ax in range(d, 2 * d):
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    return 0.5 * (c + np.conj(flipped))


def from_callable(func, domain: StripDomain, n_modes: int = DEFAULT_ANGLE_MODES,
                  n_nodes: int = DEFAULT_ACTION_NODES, reality_flag: bool = True,
                  oversample: int = 1) -> GridFunction:
    """Sample ``func(y, x)`` (arrays of shape (..., d)) on the collocation grid."""
    proto = GridFunction(domain, np.zeros((n_nodes,) * domain.d + (n_modes,) * domain.d),
                         reality_flag)
    Y = proto.node_points()
    X = proto.angle_grid(n_modes * oversample)
    d = domain.d
    Yb = Y.reshape((n_nodes,) * d + (1,) * d + (d,))
    Xb = X.reshape((1,) * d + X.shape)
    vals = func(np.broadcast_to(Yb, (n_nodes,) * d + X.shape[:-1] + (d,)),
                np.broadcast_to(Xb, (n_nodes,) * d + X.shape))
    return from_samples(vals, domain, reality_flag, n_modes=n_modes)


def evaluate(f: GridFunction, y, x, check_domain: bool = True) -> np.ndarray:
    """Evaluate ``f`` at complex points ``(y, x)``; arrays of shape (..., d)."""
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    y, x = np.broadcast_arrays(y, x)
    shape = y.shape[:-1]
    d = f.d
    y = y.reshape(-1, d)
    x = x.reshape(-1, d)
    if check_domain:
        _check_in_domain(f.domain, y, x)
    out = np.empty(y.shape[0], dtype=complex)
    chunk = 4096
    for lo in range(0, y.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        V = f.angle_values_at_nodes(x[sl])  # (P, M..)
        out[sl] = _interp_nodes(f, V, y[sl])
    if f.reality_flag and not np.any(y.imag) and not np.any(x.imag):
        return out.real.reshape(shape)
    return out.reshape(shape)


def _interp_nodes(f: GridFunction, V: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Contract node values ``V`` (P, M..) with barycentric rows at ``y`` (P, d)."""
    mats = f._action_matrices(y)
    out = V
    for i in range(f.d):
        out = np.einsum("pm...,pm->p...", out, mats[i])
    return out


def _check_in_domain(domain: StripDomain, y: np.ndarray, x: np.ndarray, slack: float = 1e-9):
    if np.any(np.abs(x.imag) > domain.s * (1 + slack) + slack):
        raise ValueError("angle point outside the strip |Im x| <= s")
    if np.any(np.abs(y.imag) > domain.r * (1 + slack) + slack):
        raise ValueError("action point outside the strip |Im y| <= r")
    lo = domain.box[:, 0] - domain.r
    hi = domain.box[:, 1] + domain.r
    if np.any(y.real < lo - slack) or np.any(y.real > hi + slack):
        raise ValueError("action point outside the r-neighbourhood of the box")


def derivative(f: GridFunction, action_order: Sequence[int] = (), angle_order: Sequence[int] = (),
               max_order: int = 6) -> GridFunction:
    """Mixed derivative d_y^l d_x^k f.

    Angle derivatives multiply Fourier coefficients by (ik)^k; action
    derivatives apply the Chebyshev differentiation matrix along node axes.
    """
    d = f.d
    lo = tuple(action_order) or (0,) * d
    ko = tuple(angle_order) or (0,) * d
    if len(lo) != d or len(ko) != d:
        raise ValueError("multi-index length must equal d")
    if sum(lo) + sum(ko) > max_order:
        raise ValueError(f"derivative order exceeds configured maximum {max_order}")
    c = f.coeffs
    for i, q in enumerate(ko):
        if q:
            k = mode_numbers(f.angle_modes).astype(complex)
            shape = [1] * (2 * d)
            shape[d + i] = -1
            c = c * ((1j * k) ** q).reshape(shape)
    if any(lo):
        D = cheb_diff_matrix(f.action_nodes)
        for i, q in enumerate(lo):
            if not q:
                continue
            h = f.domain.halfwidth[i]
            Di = np.linalg.matrix_power(D, q) / h ** q if h > 0 else np.zeros_like(D)
            c = np.moveaxis(np.tensordot(Di, c, axes=([1], [i])), 0, i)
    g = GridFunction(f.domain, c, f.reality_flag)
    if sum(ko) > 0:
        rep = tail_estimate(f, f.domain.s)
        if rep > 1e-8 * max(np.abs(f.coeffs).max(initial=0.0), 1e-300):
            warnings.warn("Fourier tail is not negligible; derivative may be under-resolved",
                          RuntimeWarning, stacklevel=2)
    return g


def grad_y(f: GridFunction) -> list[GridFunction]:
    return [derivative(f, tuple(int(i == j) for j in range(f.d))) for i in range(f.d)]


def grad_x(f: GridFunction) -> list[GridFunction]:
    z = (0,) * f.d
    return [derivative(f, z, tuple(int(i == j) for j in range(f.d))) for i in range(f.d)]


def product(f: GridFunction, g: GridFunction) -> GridFunction:
    """Pointwise product; angle convolution is de-aliased by 2x zero padding."""
    f._check_compatible(g)
    d = f.d
    N = f.angle_modes
    axes = tuple(range(d, 2 * d))
    n2 = 2 * N
    vf = np.fft.ifftn(_resize_modes(f.coeffs, n2, d), axes=axes) * n2 ** d
    vg = np.fft.ifftn(_resize_modes(g.coeffs, n2, d), axes=axes) * n2 ** d
    c = np.fft.fftn(vf * vg, axes=axes) / n2 ** d
    c = _resize_modes(c, N, d)
    real = f.reality_flag and g.reality_flag
    if real:
        c = _symmetrize(c, d)
    return GridFunction(f.domain, c, real)


# coefficients of sampled data carry round-off at about this level relative to the largest
TAIL_NOISE_FLOOR = 1e-13


def tail_estimate(f: GridFunction, s: float) -> float:
    """Geometric extrapolation of sum_{|k|_1 > band} |f_k| e^{|k|_1 s}.

    The decay rate is fitted to the shell maxima of the outer half of the
    resolved spectrum; a non-decaying spectrum gives ``inf``.
    """
    a = np.abs(f.coeffs).reshape((-1,) + f.coeffs.shape[f.d:]).max(axis=0)
    if not np.any(a):
        return 0.0
    k1 = f.abs_k1()
    band = (f.angle_modes - 1) // 2
    shells = np.array([a[k1 == n].max(initial=0.0) for n in range(band + 1)])
    top = shells.max()
    floor = top * TAIL_NOISE_FLOOR
    if np.all(shells[-max(2, band // 4):] <= floor):
        return 0.0  # band-limited: resolved spectrum already ends
    lo = band // 2
    tail_shells = shells[lo:]
    mask = tail_shells > top * 1e-300
    if mask.sum() < 2:
        return 0.0
    n = np.arange(lo, band + 1)[mask]
    slope, icept = np.polyfit(n, np.log(tail_shells[mask]), 1)
    rate = slope + s  # log of per-shell ratio including strip weight
    last = max(shells[band], floor) * np.exp(band * s)
    if rate >= 0:
        return float("inf") if shells[band] > floor else float(last)
    q = np.exp(rate)
    # number of modes in shell n grows like 2^d n^(d-1)
    mult = 2 ** f.d * band ** (f.d - 1)
    return float(mult * last * q / (1 - q) ** f.d)


def sup_norm(f: GridFunction, r: float | None = None, s: float | None = None,
             oversample: int = 2, n_theta: int = 6, n_real: int = 3,
             refine: bool = True, center=None) -> NormReport:
    """Approximate sup |f| over D_{r,s}(box) by sampling its distinguished boundary.

    Angles: |Im x_i| = s with every sign pattern, on an oversampled FFT grid.
    Actions: real grid points of the box shifted by r e^{i theta} in every
    coordinate (maximum principle).  With ``center`` given the action set is
    the polydisc of radius r around that point instead.  The best sample is
    refined by local optimisation in the real parts of the angles.
    """
    d = f.d
    r = f.domain.r if r is None else r
    s = f.domain.s if s is None else s
    if r > f.domain.r * (1 + 1e-12) or s > f.domain.s * (1 + 1e-12):
        raise ValueError("norm strips must not exceed the representation strips")
    N = f.angle_modes * oversample
    k = mode_numbers(f.angle_modes)
    signs = list(itertools.product((-1.0, 1.0), repeat=d)) if s > 0 else [(0.0,) * d]
    axes = tuple(range(d, 2 * d))

    # node values of the complexified-angle fields, one per sign pattern
    fields = []
    for sg in signs:
        shape = [1] * (2 * d)
        c = f.coeffs
        for i in range(d):
            sh = list(shape)
            sh[d + i] = -1
            c = c * np.exp(-sg[i] * s * k).reshape(sh)
        c = _resize_modes(c, N, d) if oversample != 1 else c
        fields.append(np.fft.ifftn(c, axes=axes) * N ** d)

    ypts = _action_samples(f, r, n_theta, n_real, center)
    mats = f._action_matrices(ypts)
    best = (-1.0, None, None)
    for j, V in enumerate(fields):
        out = V
        for i in range(d):
            out = np.einsum("m...,pm->p...", out, mats[i]) if i == 0 else \
                np.einsum("pm...,pm->p...", out, mats[i])
        mags = np.abs(out)
        idx = np.unravel_index(np.argmax(mags), mags.shape)
        if mags[idx] > best[0]:
            best = (float(mags[idx]), idx, j)
    sampled = best[0]
    value = sampled
    if refine and sampled > 0:
        p, *xi = best[1]
        sg = np.array(signs[best[2]]) * s
        y0 = ypts[p]
        x0 = np.array(xi, dtype=float) * 2 * np.pi / N

        def neg(xr):
            return -abs(evaluate(f, y0, xr + 1j * sg, check_domain=False))

        res = optimize.minimize(neg, x0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-15 * sampled,
                                         "maxiter": 400})
        value = max(sampled, -float(res.fun))
    spec = {"r": r, "s": s, "angle_grid": N, "sign_patterns": len(signs),
            "action_samples": int(ypts.shape[0]), "refined": bool(refine),
            "center": None if center is None else np.asarray(center, dtype=float).tolist()}
    return NormReport(sup_norm=value, grid_spec=spec, tail_bound=tail_estimate(f, s),
                      sampled_max=sampled)


def _action_samples(f: GridFunction, r: float, n_theta: int, n_real: int,
                    center=None) -> np.ndarray:
    d = f.d
    if center is not None:
        Yr = np.asarray(center, dtype=float).reshape(1, d)
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        Th = np.stack(np.meshgrid(*([th] * d), indexing="ij"), axis=-1).reshape(-1, d)
        return (Yr + r * np.exp(1j * Th)).reshape(-1, d) if r > 0 else Yr.astype(complex)
    if f.action_nodes == 1:
        return f.domain.center[None, :].astype(complex)
    reals = [np.linspace(lo, hi, n_real) if hi > lo else np.array([lo])
             for lo, hi in f.domain.box]
    Yr = np.stack(np.meshgrid(*reals, indexing="ij"), axis=-1).reshape(-1, d)
    if r <= 0:
        return Yr.astype(complex)
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    Th = np.stack(np.meshgrid(*([th] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return (Yr[:, None, :] + r * np.exp(1j * Th)[None, :, :]).reshape(-1, d)


def norm(f: GridFunction, r: float | None = None, s: float | None = None, **kw) -> float:
    """Shorthand for ``sup_norm(...).sup_norm``."""
    return sup_norm(f, r, s, **kw).sup_norm


def cauchy_bound(p: int, fnorm: float, r: float, r_new: float, s: float, s_new: float,
                 action_order: int, angle_order: int) -> float:
    """p! |f|_{r,s} (r - r')^{-|l|} (s - s')^{-|k|}."""
    return factorial(p) * fnorm * (r - r_new) ** (-action_order) * (s - s_new) ** (-angle_order)


# ---------------------------------------------------------------------------
# tabular text I/O
# ---------------------------------------------------------------------------

def write_table(f: GridFunction, path) -> None:
    """Write the coefficient table: header, then rows ``node... k... re im``."""
    d = f.d
    M, N = f.action_nodes, f.angle_modes
    header = [
        "kamtori coefficient table v1",
        f"d: {d}",
        f"N: {N}",
        f"M: {M}",
        f"r: {float(f.domain.r)!r}",
        f"s: {float(f.domain.s)!r}",
        "box: " + " ".join(f"{float(lo)!r} {float(hi)!r}" for lo, hi in f.domain.box),
        f"real: {int(f.reality_flag)}",
        "columns: " + " ".join([f"node{i + 1}" for i in range(d)]
                               + [f"k{i + 1}" for i in range(d)] + ["re", "im"]),
    ]
    idx = np.indices(f.coeffs.shape).reshape(2 * d, -1).T
    k = mode_numbers(N)
    rows = np.column_stack([idx[:, :d], k[idx[:, d:]],
                            f.coeffs.real.ravel(), f.coeffs.imag.ravel()])
    fmt = ["%d"] * (2 * d) + ["%.17g", "%.17g"]
    np.savetxt(path, rows, fmt=fmt, header="\n".join(header))


def read_table(path) -> GridFunction:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if ":" in body:
                key, val = body.split(":", 1)
                meta[key.strip()] = val.strip()
    try:
        d, N, M = int(meta["d"]), int(meta["N"]), int(meta["M"])
        box = np.array(meta["box"].split(), dtype=float).reshape(d, 2)
        dom = StripDomain(box, float(meta["r"]), float(meta["s"]))
        real = bool(int(meta.get("real", "1")))
    except KeyError as exc:
        raise ValueError(f"coefficient table header misses field {exc}") from None
    rows = np.loadtxt(path, ndmin=2)
    c = np.zeros((M,) * d + (N,) * d, dtype=complex)
    nodes = rows[:, :d].astype(int)
    ks = rows[:, d:2 * d].astype(int) % N
    c[tuple(nodes.T) + tuple(ks.T)] = rows[:, 2 * d] + 1j * rows[:, 2 * d + 1]
    return from_coefficients(c, dom, (N, M), reality_flag=real)
