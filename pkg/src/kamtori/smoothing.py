"""Cut-off extension and analytic smoothing of finitely differentiable data.

Smoothing is a Fourier multiplier with symbol chi(s k), chi = 1 on [-1, 1] and
chi = 0 outside [-2, 2], applied in every variable.  Since chi is flat at the
origin, the associated kernel has unit mass and vanishing higher moments, so
polynomials in the actions pass through unchanged and band-limited angle data
with |k_i| <= 1/s is reproduced exactly.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import floor
from typing import Callable, Mapping

import numpy as np

from .funcrep import (GridFunction, StripDomain, from_coefficients, mode_numbers,
                      sup_norm)


# ---------------------------------------------------------------------------
# symbol and cut-off
# ---------------------------------------------------------------------------

def _psi(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    a = _psi(u)
    return a / (a + _psi(1.0 - np.asarray(u, dtype=float)))


def bump_symbol(t):
    """Smooth even symbol: 1 on |t| <= 1, 0 on |t| >= 2."""
    return 1.0 - smooth_step(np.abs(np.asarray(t, dtype=float)) - 1.0)


def tensor_symbol(s: float, ks: list[np.ndarray]) -> np.ndarray:
    """prod_i chi(s k_i) on the mesh built from the per-axis wave numbers ``ks``."""
    mesh = np.meshgrid(*ks, indexing="ij")
    out = np.ones(mesh[0].shape)
    for k in mesh:
        out = out * bump_symbol(s * k)
    return out


def box_cutoff(y: np.ndarray, box: np.ndarray, alpha_star: float) -> np.ndarray:
    """chi(y): 1 on the alpha_*/2-neighbourhood of D', 0 off the alpha_*-neighbourhood.

    D' is ``box`` shrunk by alpha_* on every side, so the support stays in ``box``.
    """
    y = np.asarray(y, dtype=float)
    w = 0.5 * alpha_star
    out = np.ones(y.shape[:-1])
    for i, (lo, hi) in enumerate(box):
        inner_lo, inner_hi = lo + w, hi - w
        out = out * smooth_step((y[..., i] - (inner_lo - w)) / w) \
                  * smooth_step(((inner_hi + w) - y[..., i]) / w)
    return out


@lru_cache(maxsize=None)
def kernel_constant(d: int = 1, n_xi: int = 4001, t_max: float = 120.0, n_t: int = 24001) -> float:
    """sup_{|eta| <= 1} int |k(t + i eta)| dt for the smoothing kernel, to the power d.

    This bounds sup |f_s| on the strip |Im| <= s by a multiple of sup |f| on the reals.
    """
    xi = np.linspace(-2.0, 2.0, n_xi)
    w = np.full(n_xi, xi[1] - xi[0])
    w[0] = w[-1] = 0.5 * w[0]
    chi = bump_symbol(xi)
    t = np.linspace(-t_max, t_max, n_t)
    dt = t[1] - t[0]
    best = 0.0
    for eta in (0.0, 0.5, 1.0):
        amp = chi * np.exp(-xi * eta) * w
        k = np.empty(n_t, dtype=complex)
        for lo in range(0, n_t, 4000):
            k[lo:lo + 4000] = np.exp(1j * np.outer(t[lo:lo + 4000], xi)) @ amp
        best = max(best, float(np.abs(k).sum() * dt / (2 * np.pi)))
    return best ** d


# ---------------------------------------------------------------------------
# finitely differentiable data
# ---------------------------------------------------------------------------

@dataclass
class FiniteRegFunction:
    """A sampler ``f(y, x)`` with finitely many derivatives.

    ``trig_terms`` optionally gives the exact form sum_k c_k(y) e^{i k.x} with
    polynomial coefficients ``c_k`` (callables of y or scalars); ``poly_part``
    is an angle-independent polynomial of the actions added on top.  Both are
    smoothed exactly.  ``box`` is the action box the data is defined on
    (``None`` for all of R^d).
    """

    sampler: Callable
    l: float
    d: int
    cl_norm_estimate: float | None = None
    box: np.ndarray | None = None
    trig_terms: Mapping | None = None
    poly_part: Callable | None = None
    action_free: bool = False
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.l > 0:
            raise ValueError("regularity exponent l must be positive")
        if self.box is not None:
            self.box = np.atleast_2d(np.asarray(self.box, dtype=float))

    def __call__(self, y, x):
        return self.sampler(np.asarray(y), np.asarray(x))

    def is_zero(self) -> bool:
        return bool(self.notes.get("zero", False))


def trig_function(terms: Mapping, d: int, l: float, poly_part: Callable | None = None,
                  box=None, cl_norm: float | None = None) -> FiniteRegFunction:
    """FiniteRegFunction from an exact trigonometric form (see class docstring)."""
    terms = {tuple(int(q) for q in k): v for k, v in terms.items()}

    def sampler(y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], x.shape[:-1])
        out = np.zeros(shape, dtype=complex)
        for k, c in terms.items():
            ck = c(y) if callable(c) else c
            out = out + ck * np.exp(1j * (x @ np.asarray(k, dtype=float)))
        if poly_part is not None:
            out = out + poly_part(y)
        return out.real

    action_free = poly_part is None and not any(callable(c) for c in terms.values())
    zero = poly_part is None and all((not callable(c)) and c == 0 for c in terms.values())
    f = FiniteRegFunction(sampler, l, d, None, box, terms, poly_part, action_free,
                          {"zero": zero})
    f.cl_norm_estimate = estimate_cl_norm(f) if cl_norm is None else cl_norm
    return f


def cosine_family(amplitude: float, modes, d: int, l: float) -> FiniteRegFunction:
    """amplitude * sum_k cos(k . x)."""
    terms = {}
    for k in modes:
        k = tuple(int(q) for q in k)
        kn = tuple(-q for q in k)
        terms[k] = terms.get(k, 0) + 0.5 * amplitude
        terms[kn] = terms.get(kn, 0) + 0.5 * amplitude
    return trig_function(terms, d, l)


# ---------------------------------------------------------------------------
# C^l norm estimate
# ---------------------------------------------------------------------------

def estimate_cl_norm(f: FiniteRegFunction, box=None, n_angle: int = 64, n_action: int = 9,
                     max_order: int = 4) -> float:
    """Estimate max_{|m| <= [l]} sup |d^m f| plus the Hoelder quotient of order {l}.

    Angle derivatives are spectral; action derivatives use second-order finite
    differences, repeated on a refined grid as a Richardson-type consistency
    check (recorded in ``f.notes``).  Orders above ``max_order`` are not
    resolvable by finite differences and are skipped for action directions.
    """
    box = f.box if box is None else np.atleast_2d(box)
    L = floor(f.l)
    frac = f.l - L
    depends_y = not f.action_free and box is not None
    if f.action_free or box is None:
        ests = [_cl_on_grid(f, None, n_angle, 1, L, frac, max_order)]
    else:
        ests = [_cl_on_grid(f, box, n_angle, n_action, L, frac, max_order),
                _cl_on_grid(f, box, n_angle, 2 * n_action - 1, L, frac, max_order)]
    if depends_y:
        rel = abs(ests[1] - ests[0]) / max(ests[1], 1e-300)
        f.notes["cl_richardson_rel_change"] = rel
        f.notes["cl_richardson_ok"] = bool(rel < 0.1)
    return float(max(ests))


def _cl_on_grid(f, box, n_angle, n_action, L, frac, max_order):
    d = f.d
    xg = 2 * np.pi * np.arange(n_angle) / n_angle
    X = np.stack(np.meshgrid(*([xg] * d), indexing="ij"), axis=-1)
    if box is None:
        Y = np.zeros(d)
        vals = np.asarray(f(np.broadcast_to(Y, X.shape), X), dtype=float)
        ys = None
    else:
        ys = [np.linspace(lo, hi, n_action) for lo, hi in box]
        Yg = np.stack(np.meshgrid(*ys, indexing="ij"), axis=-1)
        Yb = Yg.reshape((n_action,) * d + (1,) * d + (d,))
        Xb = X.reshape((1,) * d + X.shape)
        shape = (n_action,) * d + X.shape
        vals = np.asarray(f(np.broadcast_to(Yb, shape), np.broadcast_to(Xb, shape)), dtype=float)
    na = 0 if ys is None else d
    ax_angle = tuple(range(na, na + d))
    c = np.fft.fftn(vals, axes=ax_angle)
    c[np.abs(c) < 1e-14 * np.abs(c).max(initial=0.0)] = 0.0  # keep k^m from amplifying round-off
    k = mode_numbers(n_angle).astype(float)
    best = 0.0
    top_fields = []
    for order in range(L + 1):
        for m in _multi_indices(d + na, order):
            my, mx = m[:na], m[na:]
            if na and sum(my) > max_order:
                continue
            cc = c
            for i, q in enumerate(mx):
                if q:
                    sh = [1] * cc.ndim
                    sh[na + i] = -1
                    cc = cc * ((1j * k) ** q).reshape(sh)
            v = np.fft.ifftn(cc, axes=ax_angle).real
            for i, q in enumerate(my):
                for _ in range(q):
                    v = np.gradient(v, ys[i], axis=i, edge_order=2)
            best = max(best, float(np.abs(v).max()))
            if order == L:
                top_fields.append(v)
    if frac > 0 and top_fields:
        h = 2 * np.pi / n_angle
        for v in top_fields:
            for ax in ax_angle:
                for step in (1, 2, 4, 8, 16):
                    diff = np.abs(np.roll(v, -step, axis=ax) - v)
                    best = max(best, float(diff.max() / (step * h) ** frac))
    return best


def _multi_indices(n: int, order: int):
    for m in itertools.product(range(order + 1), repeat=n):
        if sum(m) == order:
            yield m


# ---------------------------------------------------------------------------
# extension by cut-off
# ---------------------------------------------------------------------------

class ExtensionError(ValueError):
    pass


def _fd_hessian(func, y: np.ndarray, h: float) -> np.ndarray:
    """Central-difference Hessian of an action-only function at points y (P, d)."""
    d = y.shape[-1]
    H = np.zeros(y.shape[:-1] + (d, d))
    E = np.eye(d) * h
    for i in range(d):
        for j in range(i, d):
            v = (func(y + E[i] + E[j]) - func(y + E[i] - E[j])
                 - func(y - E[i] + E[j]) + func(y - E[i] - E[j])) / (4 * h * h)
            H[..., i, j] = H[..., j, i] = v
    return H


def _fit_quadratic(func, box: np.ndarray, n: int = 7):
    """Least-squares quadratic c + b.y + y.A.y/2 through samples on the box."""
    d = box.shape[0]
    axes = [np.linspace(lo, hi, n) for lo, hi in box]
    Y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    cols = [np.ones(len(Y))] + [Y[:, i] for i in range(d)]
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    cols += [Y[:, i] * Y[:, j] * (0.5 if i == j else 1.0) for i, j in pairs]
    V = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(V, func(Y), rcond=None)
    A = np.zeros((d, d))
    for (i, j), a in zip(pairs, coef[1 + d:]):
        A[i, j] = A[j, i] = a
    return float(coef[0]), coef[1:1 + d].copy(), A


@dataclass(frozen=True)
class QuadraticPolynomial:
    c: float
    b: np.ndarray
    A: np.ndarray

    def __call__(self, y):
        y = np.asarray(y)
        return self.c + y @ self.b + 0.5 * np.einsum("...i,ij,...j->...", y, self.A, y)


def extend_with_cutoff(f: FiniteRegFunction, alpha_star: float, integrable: bool = False,
                       base: Callable | None = None, n_check: int = 9) -> FiniteRegFunction:
    """Extend data given on ``f.box`` to all of R^d x T^d.

    Perturbations become chi * f.  Integrable parts become K_hat + chi (K - K_hat)
    with a quadratic base K_hat (least-squares fit unless ``base`` is given);
    the Hessian of the extension is checked on a grid of the box against
    |(K_yy)^-1| <= 4 |T|.  Data already defined everywhere is returned as is.
    """
    if f.box is None:
        return f
    box = f.box
    if np.any(box[:, 1] - box[:, 0] <= 2 * alpha_star):
        raise ExtensionError("alpha_* leaves an empty inner set D'")
    d = f.d
    zero_x = np.zeros(d)

    if not integrable:
        def sampler(y, x):
            y = np.asarray(y, dtype=float)
            x = np.asarray(x, dtype=float)
            y, x = np.broadcast_arrays(y, x)
            chi = box_cutoff(y, box, alpha_star)
            out = np.zeros(y.shape[:-1])
            m = chi > 0
            if np.any(m):
                out[m] = chi[m] * np.asarray(f(y[m], x[m]), dtype=float)
            return out
        g = FiniteRegFunction(sampler, f.l, d, None, None, None, None, False,
                              {"extended_from": box.tolist(), "alpha_star": alpha_star,
                               "zero": f.is_zero()})
        g.cl_norm_estimate = f.cl_norm_estimate
        return g

    def K(y):
        return np.asarray(f(y, np.broadcast_to(zero_x, np.shape(y))), dtype=float)

    if base is None:
        base = QuadraticPolynomial(*_fit_quadratic(K, box))
    axes = [np.linspace(lo, hi, n_check) for lo, hi in box]
    Y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    h = 1e-3 * float(np.min(box[:, 1] - box[:, 0]))
    inner = Y + 0.0
    inner = np.clip(inner, box[:, 0] + 2 * h, box[:, 1] - 2 * h)
    Hk = _fd_hessian(K, inner, h)
    det = np.linalg.det(Hk)
    if np.any(np.abs(det) < 1e-12 * np.abs(Hk).max()):
        raise ExtensionError("Hessian of K is singular at a sample point of the box")
    T_norm = float(np.max([np.linalg.norm(np.linalg.inv(H), 2) for H in Hk]))
    resid = K(Y) - base(Y)
    exact = float(np.abs(resid).max()) <= 1e-13 * max(1.0, float(np.abs(K(Y)).max()))

    def remainder(y):
        y = np.asarray(y, dtype=float)
        chi = box_cutoff(y, box, alpha_star)
        out = np.zeros(y.shape[:-1])
        m = chi > 0
        if np.any(m):
            out[m] = chi[m] * (K(y[m]) - base(y[m]))
        return out

    def sampler(y, x):
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], np.shape(x)[:-1])
        if exact:
            return np.broadcast_to(base(y), shape)
        return np.broadcast_to(base(y) + remainder(y), shape)

    Hext = _fd_hessian(lambda y: base(y) + (0.0 if exact else remainder(y)), inner, h)
    inv_norm = float(np.max([np.linalg.norm(np.linalg.inv(H), 2) for H in Hext]))
    report = {"T_norm": T_norm, "extended_inverse_norm": inv_norm,
              "inverse_bound": 4 * T_norm, "inverse_ok": inv_norm <= 4 * T_norm,
              "base_residual": float(np.abs(resid).max()), "base_exact": exact}
    if not report["inverse_ok"]:
        raise ExtensionError(f"extended Hessian inverse {inv_norm:.3e} exceeds 4|T| = {4 * T_norm:.3e}")
    g = FiniteRegFunction(sampler, f.l, d, f.cl_norm_estimate, None, None, base, False,
                          {"extension": report, "alpha_star": alpha_star,
                           "extension_box": box.tolist(),
                           "remainder": None if exact else remainder})
    return g


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def jackson_smooth(f: FiniteRegFunction, s: float, domain: StripDomain | None = None,
                   n_modes: int = 64, n_nodes: int = 8, n_fine: int | None = None,
                   n_action_fft: int = 64) -> GridFunction:
    """Real-analytic approximant f_s as a GridFunction on ``domain`` with strip s.

    Exact for trigonometric data with polynomial coefficients.  Other samplers
    are smoothed through FFTs: on a fine periodic angle grid, and, if they
    depend on the actions, over a periodized action box three times the size
    of their support (only the part beyond ``poly_part``).
    """
    if not s > 0:
        raise ValueError("strip width must be positive")
    d = f.d
    if domain is None:
        domain = StripDomain(np.zeros((d, 2)), 1.0, min(s, 1.0))
        n_nodes = 1
    M = n_nodes
    proto = GridFunction(domain, np.zeros((M,) * d + (n_modes,) * d))
    Y = proto.node_points()
    if f.trig_terms is not None:
        table = {}
        for k, c in f.trig_terms.items():
            w = float(np.prod(bump_symbol(s * np.asarray(k, dtype=float))))
            if w == 0.0:
                continue
            val = c(Y) if callable(c) else np.full((M,) * d, c, dtype=complex)
            table[k] = table.get(k, 0) + w * np.asarray(val, dtype=complex)
        if f.poly_part is not None:
            z = (0,) * d
            table[z] = table.get(z, 0) + f.poly_part(Y)
        band = (n_modes - 1) // 2
        if any(max(abs(q) for q in k) > band for k in table):
            raise ValueError("n_modes too small for the smoothed band")
        return from_coefficients(table, domain, (n_modes, M), check_reality=True, tol=1e-10)

    n_fine = n_fine or max(4 * n_modes, int(2 ** np.ceil(np.log2(8.0 / s + 1))))
    kf = mode_numbers(n_fine)
    xg = 2 * np.pi * np.arange(n_fine) / n_fine
    X = np.stack(np.meshgrid(*([xg] * d), indexing="ij"), axis=-1)
    sym_x = tensor_symbol(s, [kf] * d)

    remainder = f.notes.get("remainder")
    if f.action_free:
        vals = np.asarray(f(np.broadcast_to(domain.center, X.shape), X), dtype=float)
        c = np.fft.fftn(vals) / n_fine ** d * sym_x
        c = _fold_modes(c, n_modes, d)
        table = np.broadcast_to(c, (M,) * d + c.shape).copy()
        return from_coefficients(table, domain, (n_modes, M), check_reality=False)

    if f.poly_part is not None:
        # poly_part passes unchanged; smooth only the compactly supported rest
        rest = remainder
        node_poly = f.poly_part(Y)
        table = np.zeros((M,) * d + (n_modes,) * d, dtype=complex)
        table[(slice(None),) * d + (0,) * d] = node_poly
        if rest is not None:
            table[(slice(None),) * d + (0,) * d] += _smooth_action_only(
                rest, f.notes.get("extension_box"), s, Y, n_action_fft, d)
        return from_coefficients(table, domain, (n_modes, M), check_reality=False)

    support = np.array(f.notes.get("extended_from")) if "extended_from" in f.notes else None
    if support is None:
        raise ValueError("action-dependent sampler needs an extension box or an exact form")
    table = _smooth_periodized(f, support, s, Y, n_modes, n_action_fft, n_fine, d)
    return from_coefficients(table, domain, (n_modes, M), check_reality=False)


def _fold_modes(c: np.ndarray, n_modes: int, d: int) -> np.ndarray:
    """Keep the modes |k_i| <= (n_modes-1)//2 of a fine FFT table (FFT order)."""
    n = c.shape[-1]
    kf = mode_numbers(n)
    band = (n_modes - 1) // 2
    keep = np.nonzero(np.abs(kf) <= band)[0]
    out = np.zeros(c.shape[:-d] + (n_modes,) * d, dtype=complex)
    idx_dst = kf[keep] % n_modes
    sl_src = np.ix_(*([keep] * d))
    sl_dst = np.ix_(*([idx_dst] * d))
    out[(Ellipsis,) + sl_dst] = c[(Ellipsis,) + sl_src]
    return out


def _periodic_action_grid(support: np.ndarray, n: int):
    lo, hi = support[:, 0], support[:, 1]
    diam = hi - lo
    L = 3 * diam
    start = lo - diam
    axes = [start[i] + L[i] * np.arange(n) / n for i in range(len(lo))]
    return axes, start, L


def _action_multiplier_eval(vals: np.ndarray, axes_y: tuple, start, L, s, Y, d):
    """Smooth along periodized action axes and evaluate at node points Y."""
    n = vals.shape[axes_y[0]]
    c = np.fft.fftn(vals, axes=axes_y) / n ** d
    m = mode_numbers(n)
    xi = [2 * np.pi * m / L[i] for i in range(d)]
    sym = tensor_symbol(s, xi)
    c = c * sym.reshape(sym.shape + (1,) * (c.ndim - d))
    Yf = Y.reshape(-1, d)
    out = []
    for yp in Yf:
        E = [np.exp(1j * xi[i] * (yp[i] - start[i])) for i in range(d)]
        t = c
        for i in range(d):
            t = np.tensordot(E[i], t, axes=([0], [0]))
        out.append(t)
    return np.array(out).reshape(Y.shape[:-1] + c.shape[d:])


def _smooth_action_only(rest, support, s, Y, n, d):
    if support is None:
        raise ValueError("extension box unknown for the integrable remainder")
    axes, start, L = _periodic_action_grid(np.asarray(support), n)
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = rest(G)
    return _action_multiplier_eval(vals, tuple(range(d)), start, L, s, Y, d).real


def _smooth_periodized(f, support, s, Y, n_modes, n_y, n_x, d):
    axes, start, L = _periodic_action_grid(support, n_y)
    Gy = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    xg = 2 * np.pi * np.arange(n_x) / n_x
    X = np.stack(np.meshgrid(*([xg] * d), indexing="ij"), axis=-1)
    shape = (n_y,) * d + (n_x,) * d + (d,)
    Yb = np.broadcast_to(Gy.reshape((n_y,) * d + (1,) * d + (d,)), shape)
    Xb = np.broadcast_to(X.reshape((1,) * d + X.shape), shape)
    vals = np.asarray(f(Yb, Xb), dtype=float)
    c = np.fft.fftn(vals, axes=tuple(range(d, 2 * d))) / n_x ** d
    c = c * tensor_symbol(s, [mode_numbers(n_x)] * d)
    c = _fold_modes(c, n_modes, d)
    return _action_multiplier_eval(c, tuple(range(d)), start, L, s, Y, d)


# ---------------------------------------------------------------------------
# rate benchmark
# ---------------------------------------------------------------------------

def smoothing_error_1d(func: Callable, s_list, n_fine: int = 2 ** 15) -> np.ndarray:
    """sup_x |f - f_s| on the real line for a 2 pi-periodic function of one angle."""
    x = 2 * np.pi * np.arange(n_fine) / n_fine
    v = func(x)
    c = np.fft.fft(v)
    k = mode_numbers(n_fine)
    errs = []
    for s in s_list:
        vs = np.fft.ifft(c * bump_symbol(s * k)).real
        errs.append(float(np.abs(vs - v).max()))
    return np.array(errs)


def fitted_slope(s_list, errors, floor_: float = 1e-14) -> float:
    s = np.asarray(s_list, dtype=float)
    e = np.asarray(errors, dtype=float)
    m = e > floor_
    if m.sum() < 2:
        return float("inf")
    return float(np.polyfit(np.log(s[m]), np.log(e[m]), 1)[0])


BENCH_FUNCTIONS = {
    "abs_sin_7_2": (lambda x: np.abs(np.sin(x)) ** 3.5, 3.5),
    "analytic_inv_cos": (lambda x: 1.0 / (1.5 - np.cos(x)), np.inf),
    "cos": (lambda x: np.cos(x), np.inf),
}


def smoothing_benchmark(names=("abs_sin_7_2", "analytic_inv_cos"), s_list=None,
                        n_fine: int = 2 ** 15) -> list[dict]:
    s_list = [2.0 ** -j for j in range(3, 9)] if s_list is None else list(s_list)
    rows = []
    for name in names:
        func, _ = BENCH_FUNCTIONS[name]
        errs = smoothing_error_1d(func, s_list, n_fine)
        slope = fitted_slope(s_list, errs)
        for s, e in zip(s_list, errs):
            rows.append({"function": name, "strip_width": s, "c0_error": float(e),
                         "fitted_slope": slope})
    return rows


def write_smoothing_csv(rows: list[dict], path) -> None:
    cols = ["function", "strip_width", "c0_error", "fitted_slope"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols})


# ---------------------------------------------------------------------------
# smoothing families
# ---------------------------------------------------------------------------

@dataclass
class SmoothingFamily:
    strips: np.ndarray
    approximants: list
    constant_C1: float
    differences: list = field(default_factory=list)

    def __post_init__(self):
        st = np.asarray(self.strips, dtype=float)
        if np.any(np.diff(st) >= 0) or np.any(st <= 0):
            raise ValueError("strips must be positive and strictly decreasing")
        self.strips = st


def smoothing_family(K: FiniteRegFunction | None, P: FiniteRegFunction, strips,
                     domain: StripDomain, C1: float, n_modes: int = 64,
                     n_nodes: int = 8) -> tuple[SmoothingFamily | None, SmoothingFamily]:
    """Approximants of K and P on every strip xi_j, with measured increments.

    The increment |P_j - P_{j-1}| is measured on the strip xi_j (the sup over
    the angle strip; the action strip of ``domain`` is used for the actions) and
    reported against C1 |P|_{C^l} xi_{j-1}^l.
    """
    strips = np.asarray(strips, dtype=float)

    def build(f):
        apps = []
        for xi in strips:
            dom = domain.with_strips(s=min(float(xi), 1.0))
            apps.append(jackson_smooth(f, float(xi), dom, n_modes, n_nodes))
        diffs = []
        for j in range(1, len(strips)):
            a, b = apps[j], apps[j - 1]
            diff = GridFunction(a.domain, a.coeffs - b.coeffs, True)
            meas = 0.0 if diff.is_zero() else sup_norm(diff, s=min(float(strips[j]), 1.0)).sup_norm
            bound = C1 * (f.cl_norm_estimate or 0.0) * strips[j - 1] ** f.l
            diffs.append({"j": j, "measured": meas, "bound": float(bound),
                          "ok": bool(meas <= bound)})
        return SmoothingFamily(strips, apps, C1, diffs)

    return (None if K is None else build(K)), build(P)
