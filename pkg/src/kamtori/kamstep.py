"""One Arnold KAM step for H = K(y) + P(y, x).

The step removes the Fourier modes 0 < |n|_1 <= kappa of P with the
generating function g(y', x) = sum -P_n(y') / (i K_y(y').n) e^{i n.x}, i.e.

    y = y' + g_x(y', x),    x' = x + g_{y'}(y', x),

and returns K' = K + <P>, the new perturbation

    P'(y', x') = P_+(y', phi(y', x')),   P_+ = P1 + P2 + (P - P_hat),
    P1 = int_0^1 (1-t) K_yy(y' + t g_x) g_x.g_x dt,
    P2 = int_0^1 P_y(y' + t g_x, x).g_x dt,

and the frequency conjugacy G = (dK')^{-1} o dK.  P' is never formed as a
difference of large quantities, so its relative accuracy survives when its
size drops far below machine epsilon times |H|.

The generating function is evaluated from the quotient formula at any action
point (the small-divisor identity then holds off the grid too); a tabulated
copy on the box of radius r_bar is kept for norms.
"""

from __future__ import annotations

import itertools
import warnings
import json
from dataclasses import dataclass, field, replace
from math import log

import numpy as np

from .cohomology import solve_cohomological
from .funcrep import (GridFunction, StripDomain, _kill_nyquist, _resize_modes, derivative,
                      from_samples, mode_numbers, sup_norm)
from .hamiltonian import ActionInterpolant, IntegrablePart
from .smoothing import smooth_step

GAUSS_ORDER = 8
_gl_t, _gl_w = np.polynomial.legendre.leggauss(GAUSS_ORDER)
GAUSS_T = 0.5 * (_gl_t + 1.0)
GAUSS_W = 0.5 * _gl_w

# modes whose coefficients sit this far below the largest one do not take part
# in the divisor condition or in the effective truncation order
ACTIVE_MODE_THRESHOLD = 1e-16


class StepConditionError(RuntimeError):
    """A named hypothesis of the step failed numerically."""

    def __init__(self, condition: dict, conditions: list | None = None):
        self.condition = condition
        self.conditions = conditions or [condition]
        super().__init__(f"condition ({condition['name']}) violated: lhs={condition['lhs']:.6e} "
                         f"rhs={condition['rhs']:.6e} slack={condition['slack']:.3e}")


def condition(name: str, lhs: float, rhs: float, strict: bool = False, note: str = "") -> dict:
    lhs, rhs = float(lhs), float(rhs)
    ok = lhs < rhs if strict else lhs <= rhs
    out = {"name": name, "lhs": lhs, "rhs": rhs, "slack": rhs - lhs, "passes": bool(ok)}
    if note:
        out["note"] = note
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepParams:
    """Scalars of one step.  ``None`` entries take their defining formula.

    ``C0`` enters L, ``C0_gen`` the generating-function bounds and ``C1`` the
    output bounds; all three are configuration constants.
    """

    r: float
    s: float
    sigma: float
    sigma_bar: float
    alpha: float
    tau: float
    K_bound: float
    T_bound: float
    rho: float
    d: int = 2
    eps: float | None = None
    eta: float | None = None
    r_check: float | None = None
    r_bar: float | None = None
    r_tilde: float | None = None
    C0: float = 1.0
    C0_gen: float = 1.0
    C1: float = 2.0

    def __post_init__(self):
        if not (0 < 2 * self.sigma < self.s <= 1):
            raise ValueError("need 0 < 2 sigma < s <= 1")
        if not 0 < self.sigma_bar <= 1:
            raise ValueError("need 0 < sigma_bar <= 1")
        if not 0 < self.rho < 1:
            raise ValueError("need 0 < rho < 1")
        for name in ("r", "alpha", "K_bound", "T_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tau < self.d - 1:
            raise ValueError("tau must be >= d - 1")
        if self.kappa < 1:
            raise ValueError("kappa = 6 lambda / sigma must be >= 1")
        if self.eta is None:
            object.__setattr__(self, "eta", self.T_bound * self.K_bound)
        if self.r_check is None:
            object.__setattr__(self, "r_check", self.r_check_max)
        if self.r_bar is None:
            object.__setattr__(self, "r_bar", self.r_bar_max())
        if self.r_tilde is None:
            object.__setattr__(self, "r_tilde", self.r_check * self.sigma_bar
                               / (16 * self.d * self.T_bound * self.K_bound))

    @property
    def nu(self) -> float:
        return self.tau + 1

    @property
    def lam(self) -> float:
        return log(1.0 / self.rho)

    @property
    def kappa(self) -> float:
        return 6.0 * self.lam / self.sigma

    @property
    def r_check_max(self) -> float:
        return self.r / (32 * self.d * self.T_bound * self.K_bound)

    def r_bar_max(self, kappa: float | None = None) -> float:
        k = self.kappa if kappa is None else kappa
        return min(self.alpha / (2 * self.d * self.K_bound * k ** self.nu), self.r_check)

    @property
    def s_bar(self) -> float:
        return self.s - 2.0 * self.sigma / 3.0

    @property
    def s_prime(self) -> float:
        return self.s - self.sigma

    @property
    def L(self) -> float | None:
        if self.eps is None:
            return None
        return self.C0 * self.eta * self.T_bound * self.eps / (self.r * self.r_tilde)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "r", "s", "sigma", "sigma_bar", "alpha", "tau", "K_bound", "T_bound", "rho", "d",
            "eps", "eta", "r_check", "r_bar", "r_tilde", "C0", "C0_gen", "C1")}
        out.update(nu=self.nu, lam=self.lam, kappa=self.kappa, s_bar=self.s_bar,
                   s_prime=self.s_prime, L=self.L)
        return out


def preconditions(params: StepParams, kappa_eff: float | None = None) -> list[dict]:
    """The step hypotheses, each as a named record with its slack."""
    p = params
    eps = 0.0 if p.eps is None else p.eps
    out = [
        condition("DefNArnExt1v501", p.sigma ** (-p.nu) * eps / (p.alpha * p.r), p.rho,
                  note="sigma^-nu eps/(alpha r) <= rho"),
        condition("DefNArnExt1v501", p.rho, 0.25, note="rho <= 1/4"),
        condition("DefNArnExt1v501", p.r, p.alpha * p.sigma ** p.nu / p.K_bound * (1 + 1e-12),
                  note="r <= alpha sigma^nu / K"),
        condition("DefNArn2v501", p.r_check, p.r_check_max * (1 + 1e-12),
                  note="r_check <= r/(32 d T K)"),
        condition("DefNArn2v501", p.r_bar, p.r_bar_max(kappa_eff) * (1 + 1e-12),
                  note="r_bar <= min(alpha/(2 d K kappa^nu), r_check)"
                  + ("" if kappa_eff is None else f" with effective kappa {kappa_eff:g}")),
        condition("cond1ExtExtv501", 0.0 if p.L is None else p.L, p.sigma_bar / 3.0,
                  note="L <= sigma_bar/3"),
    ]
    return out


# ---------------------------------------------------------------------------
# truncation and the generating function
# ---------------------------------------------------------------------------

def truncate_perturbation(P: GridFunction, kappa: float, rho: float | None = None,
                          smooth: bool = False) -> tuple[GridFunction, GridFunction]:
    """Split P = P_hat + P3 with P_hat supported on |n|_1 <= kappa.

    The default is a sharp cut; ``smooth`` tapers the band kappa/2 < |n|_1 <= kappa
    with a C-infinity step instead.  ``rho`` is accepted for symmetry with the
    step lemma and does not change the split.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    k1 = P.abs_k1().astype(float)
    if smooth:
        w = 1.0 - smooth_step(2.0 * k1 / kappa - 1.0)
    else:
        w = (k1 <= kappa).astype(float)
    c_hat = P.coeffs * w
    return P._new(c_hat), P._new(P.coeffs - c_hat)


def active_band(P: GridFunction, threshold: float = ACTIVE_MODE_THRESHOLD) -> int:
    """Largest |n|_1 > 0 carrying a coefficient above ``threshold`` times the largest one."""
    a = np.abs(P.coeffs).reshape((-1,) + P.coeffs.shape[P.d:]).max(axis=0)
    k1 = P.abs_k1()
    a = np.where(k1 > 0, a, 0.0)
    top = a.max(initial=0.0)
    if top == 0:
        return 0
    return int(k1[a > threshold * top].max())


class GeneratingFunction:
    """g(y', x) = sum_{0<|n|_1<=kappa} -P_n(y') / (i K_y(y').n) e^{i n.x}, exactly.

    ``tables(y, order)`` returns the Fourier coefficient tables of g and its
    first two action derivatives at the points ``y``; P_n(y') is the action
    interpolant of the input table and K is evaluated in closed form.
    """

    def __init__(self, P_hat: GridFunction, K: IntegrablePart, kappa: float):
        d = P_hat.d
        self.d = d
        self.K = K
        self.kappa = kappa
        self.N = P_hat.angle_modes
        self.domain = P_hat.domain
        k1 = P_hat.abs_k1()
        self.active = (k1 > 0) & (k1 <= kappa)
        c = np.where(self.active, P_hat.coeffs, 0.0)
        self.zero = not np.any(c)
        self._interp = ActionInterpolant(c, P_hat.domain)
        self.ks = [k.astype(float) for k in np.meshgrid(*P_hat.modes, indexing="ij")]

    def _contract(self, vec, extra=0):
        """sum_i vec[..., i] k_i, broadcast over the mode axes."""
        d = self.d
        out = 0
        for i in range(d):
            v = vec[..., i]
            out = out + v.reshape(v.shape + (1,) * d) * self.ks[i]
        return out

    def tables(self, y, order: int = 1) -> dict:
        y = np.atleast_2d(np.asarray(y))
        d = self.d
        P = y.shape[0]
        shape = (P,) + (self.N,) * d
        if self.zero:
            out = {"g": np.zeros(shape, complex)}
            if order >= 1:
                out["gy"] = np.zeros((P, d) + shape[1:], complex)
            if order >= 2:
                out["gyy"] = np.zeros((P, d, d) + shape[1:], complex)
            return out
        p = self._interp.derivatives(y, order)
        D = self._contract(self.K.grad(y))
        act = np.broadcast_to(self.active, D.shape)
        iD = np.where(act, 1j * D, 1.0)
        g = np.where(act, -p[0] / iD, 0.0)
        out = {"g": g}
        if order >= 1:
            Dy = self._contract(self.K.hess(y))  # (P, d, N..)
            gy = np.where(act[:, None], (-p[1] - 1j * Dy * g[:, None]) / iD[:, None], 0.0)
            out["gy"] = gy
        if order >= 2:
            Dyy = self._contract(self.K.third(y))  # (P, d, d, N..)
            num = (-p[2] - 1j * Dyy * g[:, None, None]
                   - 1j * Dy[:, :, None] * gy[:, None, :] - 1j * Dy[:, None, :] * gy[:, :, None])
            out["gyy"] = np.where(act[:, None, None], num / iD[:, None, None], 0.0)
        return out

    def dx(self, table, j: int):
        """Angle derivative d/dx_j of coefficient tables (mode axes last)."""
        return table * (1j * self.ks[j])

    def angle_tables(self, y, order: int = 1) -> dict:
        """Coefficient tables of g_x (d), g_y (d), g_yx (d,d), g_xx (d,d), g_yy (d,d)."""
        t = self.tables(y, order)
        d = self.d
        out = {"g": t["g"]}
        out["gx"] = np.stack([self.dx(t["g"], j) for j in range(d)], axis=1)
        out["gxx"] = np.stack([np.stack([self.dx(self.dx(t["g"], i), j) for j in range(d)], axis=1)
                               for i in range(d)], axis=1)
        if order >= 1:
            out["gy"] = t["gy"]
            out["gyx"] = np.stack([np.stack([self.dx(t["gy"][:, i], j) for j in range(d)], axis=1)
                                   for i in range(d)], axis=1)
        if order >= 2:
            out["gyy"] = t["gyy"]
        return out


def build_generating_function(P_hat: GridFunction, K: IntegrablePart, kappa: float,
                              domain: StripDomain | None = None,
                              sigma: float | None = None) -> GridFunction:
    """Tabulate g on ``domain`` (default: the domain of ``P_hat``).

    P_hat is re-sampled at the nodes of ``domain`` and handed to the
    small-divisor solver, so the table agrees with :class:`GeneratingFunction`
    at every node.
    """
    dom = P_hat.domain if domain is None else domain
    _, P_mf = _mean_free(P_hat)
    if dom is not P_hat.domain:
        M = P_hat.action_nodes
        proto = GridFunction(dom, np.zeros((M,) * P_hat.d + (P_hat.angle_modes,) * P_hat.d))
        Y = proto.node_points().reshape(-1, P_hat.d)
        interp = ActionInterpolant(P_mf.coeffs, P_hat.domain)
        c = interp.derivatives(Y, 0)[0].reshape(proto.coeffs.shape)
        P_mf = GridFunction(dom, c, P_hat.reality_flag)
    if P_mf.is_zero():
        return GridFunction(dom if sigma is None else dom.with_strips(s=dom.s - sigma),
                            np.zeros_like(P_mf.coeffs), True)
    return solve_cohomological(P_mf, K.grad, kappa=kappa, sigma=sigma)


def _mean_free(f: GridFunction):
    c = f.coeffs.copy()
    idx = (slice(None),) * f.d + (0,) * f.d
    mean = c[idx].copy()
    c[idx] = 0.0
    return mean, f._new(c)


# ---------------------------------------------------------------------------
# Fourier evaluation helpers
# ---------------------------------------------------------------------------

def _exp_rows(x, n_modes):
    k = mode_numbers(n_modes)
    return [np.exp(1j * np.outer(x[:, i], k)) for i in range(x.shape[1])]


def eval_shared(tables: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Fourier sums of tables ``(T,) + (N,)*d`` at points x (R, d); returns (R, T)."""
    d = x.shape[1]
    T = tables.shape[0]
    N = tables.shape[-1]
    E = _exp_rows(x, N)
    c = np.moveaxis(tables, 0, -1)  # (N.., T)
    R = x.shape[0]
    out = E[0] @ c.reshape(N, -1)
    for i in range(1, d):
        out = np.einsum("pkr,pk->pr", out.reshape(R, N, -1), E[i])
    return out.reshape(R, T)


def eval_pointwise(tables: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Fourier sums with per-point tables ``(R, T) + (N,)*d``; returns (R, T)."""
    d = x.shape[1]
    E = _exp_rows(x, tables.shape[-1])
    out = tables
    for i in range(d):
        out = np.einsum("ptk...,pk->pt...", out, E[i])
    return out


def grid_values(tables: np.ndarray, n: int) -> np.ndarray:
    """Values of tables ``(T,) + (N,)*d`` on the uniform n-point angle grid."""
    d = tables.ndim - 1
    c = _resize_modes(tables, n, d) if tables.shape[-1] != n else tables
    return np.fft.ifftn(c, axes=tuple(range(1, d + 1))) * n ** d


# ---------------------------------------------------------------------------
# the symplectic map
# ---------------------------------------------------------------------------

class GeneratingMap:
    """phi'(y', x') = (y' + g_x(y', x), x) with x solving x + g_{y'}(y', x) = x'."""

    def __init__(self, gen: GeneratingFunction, tol: float = 1e-14, maxiter: int = 60):
        self.gen = gen
        self.d = gen.d
        self.tol = tol
        self.maxiter = maxiter
        self.last_residual = 0.0
        self.last_contraction = 0.0

    def _tables_at(self, yp, order):
        t = self.gen.angle_tables(yp[None, :], order)
        return {k: v[0] for k, v in t.items()}

    def _solve(self, tabs, xp):
        """Newton for x + g_y(x) = x' with tables shared by all points."""
        d = self.d
        stack = np.concatenate([tabs["gy"], tabs["gyx"].reshape((d * d,) + tabs["gy"].shape[1:])])
        real = not np.iscomplexobj(xp)
        x = np.array(xp, dtype=complex)
        q = 0.0
        res = np.inf
        for it in range(self.maxiter):
            v = eval_shared(stack, x)
            gy = v[:, :d]
            gyx = v[:, d:].reshape(-1, d, d)
            if it == 0:
                q = float(np.abs(gyx).sum(axis=2).max(initial=0.0))
                if q >= 1:
                    raise StepConditionError(condition(
                        "cond1ExtExtv501", q, 1.0, strict=True,
                        note="angle map x -> x + g_y is not a contraction"))
            F = x + gy - xp
            res = float(np.abs(F).max(initial=0.0))
            if res <= self.tol:
                break
            x = x - np.linalg.solve(np.eye(d) + gyx, F[..., None])[..., 0]
        else:
            if res > 1e-12:
                raise RuntimeError(f"angle inversion did not converge (residual {res:.2e})")
        self.last_residual = max(self.last_residual, res)
        self.last_contraction = max(self.last_contraction, q)
        return (x.real if real else x), res

    @staticmethod
    def _shape(yp, xp, d):
        yp = np.atleast_2d(np.asarray(yp))
        xp = np.asarray(xp)
        if xp.ndim == 2:
            xp = np.broadcast_to(xp, (yp.shape[0],) + xp.shape)
        return yp, xp

    def angles(self, yp, xp):
        """x = phi(y', x') for y' (Q, d) and x' (Q, R, d) or (R, d)."""
        yp, xp = self._shape(yp, xp, self.d)
        out = np.empty(xp.shape, dtype=np.result_type(xp, yp, float))
        for q in range(yp.shape[0]):
            tabs = self._tables_at(yp[q], 1)
            out[q], _ = self._solve(tabs, xp[q])
        return out

    def forward(self, yp, xp):
        """(y, x) = phi'(y', x')."""
        yp, xp = self._shape(yp, xp, self.d)
        ys = np.empty(xp.shape, dtype=np.result_type(xp, yp, float))
        xs = np.empty_like(ys)
        for q in range(yp.shape[0]):
            tabs = self._tables_at(yp[q], 1)
            x, _ = self._solve(tabs, xp[q])
            gx = eval_shared(tabs["gx"], np.atleast_2d(x))
            gx = gx.real if not np.iscomplexobj(ys) else gx
            ys[q] = yp[q] + gx
            xs[q] = x
        return ys, xs

    def forward_points(self, yp, xp, chunk: int = 256):
        """phi' at unrelated points: y' (Q, d), x' (Q, d) -> (y, x), each (Q, d)."""
        yp = np.atleast_2d(np.asarray(yp))
        xp = np.atleast_2d(np.asarray(xp))
        d = self.d
        real = not (np.iscomplexobj(yp) or np.iscomplexobj(xp))
        ys = np.empty(yp.shape, dtype=float if real else complex)
        xs = np.empty_like(ys)
        for lo in range(0, yp.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            t = self.gen.angle_tables(yp[sl], 1)
            n = t["g"].shape[1:]
            stack = np.concatenate([t["gy"], t["gyx"].reshape((-1, d * d) + n)], axis=1)
            x = np.array(xp[sl], dtype=complex)
            res = np.inf
            for it in range(self.maxiter):
                v = eval_pointwise(stack, x)
                gy = v[:, :d]
                gyx = v[:, d:].reshape(-1, d, d)
                if it == 0:
                    q = float(np.abs(gyx).sum(axis=2).max(initial=0.0))
                    self.last_contraction = max(self.last_contraction, q)
                    if q >= 1:
                        raise StepConditionError(condition(
                            "cond1ExtExtv501", q, 1.0, strict=True,
                            note="angle map x -> x + g_y is not a contraction"))
                F = x + gy - xp[sl]
                res = float(np.abs(F).max(initial=0.0))
                if res <= self.tol:
                    break
                x = x - np.linalg.solve(np.eye(d) + gyx, F[..., None])[..., 0]
            if res > 1e-12:
                raise RuntimeError(f"angle inversion did not converge (residual {res:.2e})")
            gx = eval_pointwise(t["gx"], x)
            if real:
                x, gx = x.real, gx.real
            ys[sl] = yp[sl] + gx
            xs[sl] = x
        return ys, xs

    def jacobian(self, yp, xp):
        """D phi' at (y', x'), ordered (y, x) x (y', x'); shape (Q, R, 2d, 2d)."""
        yp, xp = self._shape(yp, xp, self.d)
        d = self.d
        Q, R = xp.shape[:2]
        out = np.empty((Q, R, 2 * d, 2 * d), dtype=np.result_type(xp, yp, float))
        I = np.eye(d)
        for q in range(Q):
            tabs = self._tables_at(yp[q], 2)
            x, _ = self._solve(tabs, xp[q])
            x = np.atleast_2d(x)
            v = eval_shared(np.concatenate([tabs["gyx"].reshape((d * d,) + tabs["g"].shape),
                                            tabs["gxx"].reshape((d * d,) + tabs["g"].shape),
                                            tabs["gyy"].reshape((d * d,) + tabs["g"].shape)]), x)
            if not np.iscomplexobj(out):
                v = v.real
            gyx = v[:, :d * d].reshape(-1, d, d)
            gxx = v[:, d * d:2 * d * d].reshape(-1, d, d)
            gyy = v[:, 2 * d * d:].reshape(-1, d, d)
            A = I + gyx
            Ainv = np.linalg.inv(A)
            dx_dyp = -Ainv @ gyy
            dy_dyp = I + np.swapaxes(gyx, 1, 2) + gxx @ dx_dyp
            dy_dxp = gxx @ Ainv
            out[q, :, :d, :d] = dy_dyp
            out[q, :, :d, d:] = dy_dxp
            out[q, :, d:, :d] = dx_dyp
            out[q, :, d:, d:] = Ainv
        return out


def invert_angle_map(gen: GeneratingFunction, domain: StripDomain | None = None) -> GeneratingMap:
    """Sampler for phi(y', .) = inverse of x -> x + g_{y'}(y', x); see :meth:`GeneratingMap.angles`."""
    return GeneratingMap(gen)


# ---------------------------------------------------------------------------
# frequency map
# ---------------------------------------------------------------------------

def _vec_norm(v):
    return float(np.abs(v).max(initial=0.0))


def _mat_norm(A):
    """Induced sup-norm (max row sum), maximised over leading axes."""
    return float(np.abs(A).sum(axis=-1).max(initial=0.0))


def _polydisc_samples(center, radius, n_theta=8, with_real=True):
    center = np.asarray(center, dtype=float)
    d = center.size
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    Th = np.stack(np.meshgrid(*([th] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = center + radius * np.exp(1j * Th)
    if with_real:
        pts = np.vstack([center[None, :].astype(complex), pts])
    return pts


class FrequencyMap:
    """G = (dK')^{-1} o dK near a label, by Newton iteration."""

    def __init__(self, K: IntegrablePart, K_prime: IntegrablePart, tol: float = 1e-15,
                 maxiter: int = 50):
        self.K = K
        self.K_prime = K_prime
        self.tol = tol
        self.maxiter = maxiter

    def __call__(self, y):
        y = np.asarray(y)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        target = self.K.grad(y)
        z = np.array(y, dtype=np.result_type(y, float))
        scale = 1.0 + np.abs(target).max(initial=0.0)
        for _ in range(self.maxiter):
            F = self.K_prime.grad(z) - target
            step = np.linalg.solve(self.K_prime.hess(z), F[..., None])[..., 0]
            z = z - step
            if np.abs(step).max(initial=0.0) <= self.tol * (1 + np.abs(z).max(initial=0.0)) \
                    and np.abs(F).max(initial=0.0) <= 1e-13 * scale:
                break
        return z[0] if single else z

    def defect(self, y) -> float:
        """max |dK'(G(y)) - dK(y)|."""
        return _vec_norm(self.K_prime.grad(self(y)) - self.K.grad(np.atleast_2d(y)))


@dataclass
class FrequencyUpdate:
    G: FrequencyMap
    K_prime: IntegrablePart
    norms: dict
    conditions: list


def update_frequency_map(K: IntegrablePart, K_tilde: GridFunction, r_check: float,
                         r_tilde: float, label=None, L: float | None = None,
                         T_bound: float | None = None, K_bound: float | None = None,
                         r: float | None = None) -> FrequencyUpdate:
    """Build K' = K + K_tilde and G = (dK')^{-1} o dK, with the implicit-function checks."""
    d = K.d
    label = K_tilde.domain.center if label is None else np.asarray(label, dtype=float)
    K_prime = K.add(K_tilde)
    G = FrequencyMap(K, K_prime)
    conds = []
    T0 = np.linalg.inv(K.hess(label[None, :])[0])
    Tn = _mat_norm(T0)
    # hypotheses: |1 - T F_y| <= c < 1 on D_rcheck, |F(label, z)| <= (1 - c) r_check / |T|
    ys = _polydisc_samples(label, r_check)
    c = _mat_norm(np.eye(d) - T0 @ K_prime.hess(ys))
    conds.append(condition("HypIFT", c, 1.0, strict=True, note="|1 - T F_y| <= c < 1"))
    zs = _polydisc_samples(label, r_tilde)
    F0 = K_prime.grad(label[None, :]) - K.grad(zs)
    conds.append(condition("HypIFT", _vec_norm(F0), (1 - min(c, 1.0)) * r_check / Tn,
                           note="|F(y0, .)| <= (1 - c) r_check / |T|"))
    Gz = G(zs)
    g_dev = _vec_norm(Gz - zs)
    ident = G.defect(zs)
    real_pts = zs[:1].real
    Gr = G(real_pts)
    T_tilde = np.linalg.inv(K_prime.hess(Gr)) - np.linalg.inv(K.hess(real_pts))
    norms = {"G_minus_id": g_dev, "conjugacy_defect": ident, "T_tilde": _mat_norm(T_tilde),
             "ift_c": c}
    if r is not None:
        kt = K_prime.corrections[-1] if K_prime is not K else None
        if kt is not None:
            H = kt.derivatives(_polydisc_samples(label, r / 2), 2)[2]
            norms["K_tilde_hess"] = _mat_norm(H)
    if L is not None:
        conds.append(condition("convEstExt01", g_dev, r_tilde * L, note="|G - id| <= r_tilde L"))
        if T_bound is not None:
            conds.append(condition("convEstExt01", norms["T_tilde"], T_bound * L,
                                   note="|T_tilde| <= T L"))
        if K_bound is not None and "K_tilde_hess" in norms:
            conds.append(condition("convEstExt01", norms["K_tilde_hess"], K_bound * L,
                                   note="|d^2 K_tilde| <= K L"))
    det = np.linalg.det(K_prime.hess(Gr))
    conds.append(condition("HPhiH'01", 0.0, float(np.abs(det).min()), strict=True,
                           note="det d^2 K' o G != 0"))
    return FrequencyUpdate(G, K_prime, norms, conds)


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    params: StepParams
    g: GridFunction
    phi_prime: GeneratingMap
    G: FrequencyMap
    K: IntegrablePart
    K_prime: IntegrablePart
    K_tilde: GridFunction
    P: GridFunction
    P_prime: GridFunction
    label: np.ndarray
    new_label: np.ndarray
    T_tilde: float
    norms: dict
    conditions: list = field(default_factory=list)
    log: list = field(default_factory=list)

    @property
    def passes(self) -> bool:
        return all(c["passes"] for c in self.conditions)

    def report(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "label": np.asarray(self.label, dtype=float).tolist(),
            "new_label": np.asarray(self.new_label, dtype=float).tolist(),
            "norms": {k: float(v) for k, v in self.norms.items()},
            "conditions": self.conditions,
            "domains": {"P": self.P.domain.to_dict(), "g": self.g.domain.to_dict(),
                        "P_prime": self.P_prime.domain.to_dict()},
            "log": self.log,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.report(), **kw)


def _node_fields(table: np.ndarray, d: int, n: int) -> np.ndarray:
    """Values of a node table (M..)+(N..) on the n-point angle grid: (n^d, M..)."""
    c = _resize_modes(table, n, d)
    v = np.fft.ifftn(c, axes=tuple(range(d, 2 * d))) * n ** d
    M = table.shape[0]
    return np.moveaxis(v.reshape((M,) * d + (n ** d,)), -1, 0)


def _contract_nodes(F: np.ndarray, mats: list, d: int) -> np.ndarray:
    """sum over nodes of F[b, m..] prod_i W_i[t, b, m_i]; returns (t, b)."""
    out = np.einsum("bm...,tbm->tb...", F, mats[0])
    for i in range(1, d):
        out = np.einsum("tbm...,tbm->tb...", out, mats[i])
    return out


def transform_perturbation(P: GridFunction, P3: GridFunction | None, gen: GeneratingFunction,
                           phi: GeneratingMap, K: IntegrablePart, domain: StripDomain,
                           n_nodes: int, oversample: int = 2) -> GridFunction:
    """P'(y', x') = P_+(y', phi(y', x')) sampled at the nodes of ``domain``."""
    d, N = P.d, P.angle_modes
    n2 = oversample * N
    proto = GridFunction(domain, np.zeros((n_nodes,) * d + (N,) * d))
    Yp = proto.node_points().reshape(-1, d)
    X = proto.angle_grid(n2).reshape(-1, d)
    nb = X.shape[0]
    Py = [_node_fields(derivative(P, tuple(int(i == j) for j in range(d))).coeffs, d, n2)
          for i in range(d)]
    Py = [f.real if P.reality_flag else f for f in Py]
    p_interp = ActionInterpolant(np.zeros((P.action_nodes,) * d), P.domain)
    p3 = None if P3 is None or P3.is_zero() else ActionInterpolant(P3.coeffs, P3.domain)
    vals = np.empty((Yp.shape[0], nb))
    for a, yp in enumerate(Yp):
        tabs = phi._tables_at(yp, 1)
        gx = grid_values(tabs["gx"], n2).real.reshape(d, nb).T  # (nb, d)
        yt = yp[None, None, :] + GAUSS_T[:, None, None] * gx[None]  # (8, nb, d)
        H = K.hess(yt)
        P1 = np.einsum("t,tpi,tpij,tpj->p", GAUSS_W * (1 - GAUSS_T),
                       np.broadcast_to(gx, yt.shape), H, np.broadcast_to(gx, yt.shape)).real
        mats = [m.reshape(GAUSS_ORDER, nb, -1) for m in p_interp.weights(yt.reshape(-1, d))]
        P2 = np.zeros(nb)
        for i in range(d):
            Pyt = _contract_nodes(Py[i], mats, d)  # (8, nb)
            P2 += np.einsum("t,tp->p", GAUSS_W, Pyt).real * gx[:, i]
        Pplus = P1 + P2
        if p3 is not None:
            c3 = p3.derivatives(yp[None, :], 0)[0]
            Pplus = Pplus + grid_values(c3, n2).real.reshape(nb)
        c_plus = np.fft.fftn(Pplus.reshape((n2,) * d)) / n2 ** d
        c_plus = _kill_nyquist(c_plus, d)
        x, _ = phi._solve(tabs, X)
        vals[a] = eval_shared(c_plus[None], x)[:, 0].real
    values = vals.reshape((n_nodes,) * d + (n2,) * d)
    return from_samples(values, domain, True, n_modes=N)


def kam_step(K: IntegrablePart, P: GridFunction, params: StepParams, label=None,
             out_halfwidth: float | None = None, out_nodes: int | None = None,
             oversample: int = 2, force: bool = False, smooth_truncation: bool = False,
             norm_kw: dict | None = None) -> StepResult:
    """One step; conditions failing before the transformation raise unless ``force``."""
    d = P.d
    nk = {"n_theta": 8} if norm_kw is None else norm_kw
    label = P.domain.center if label is None else np.asarray(label, dtype=float)
    log_lines = []
    P_norm = sup_norm(P, r=min(params.r, P.domain.r), s=params.s, center=label, **nk).sup_norm
    if params.eps is None:
        params = replace(params, eps=P_norm)
    kappa = params.kappa
    band = active_band(P)
    kappa_eff = min(kappa, band) if band > 0 else kappa
    conds = preconditions(params, kappa_eff)
    M = P.action_nodes
    M_out = M if out_nodes is None else out_nodes
    h_out = params.r_bar / 2 if out_halfwidth is None else out_halfwidth
    if P.is_zero():
        g_dom = StripDomain.around(label, params.r_bar, params.r_bar, params.s_bar)
        g = GridFunction(g_dom, np.zeros_like(P.coeffs))
        gen = GeneratingFunction(P, K, kappa)
        Pp = GridFunction(StripDomain.around(label, h_out, h_out, params.s_prime),
                          np.zeros((M_out,) * d + (P.angle_modes,) * d))
        return StepResult(params, g, GeneratingMap(gen), FrequencyMap(K, K), K, K,
                          P.mean_function(), P, Pp, label, label.copy(), 0.0,
                          {"P": 0.0, "P_prime": 0.0}, conds, ["zero perturbation: identity step"])
    failed = [c for c in conds if not c["passes"]]
    if failed:
        if not force:
            raise StepConditionError(failed[0], conds)
        log_lines.append("forced past: " + ", ".join(c["name"] + " (" + c.get("note", "") + ")"
                                                     for c in failed))

    P_hat, P3 = truncate_perturbation(P, kappa, params.rho, smooth=smooth_truncation)
    p3_norm = sup_norm(P3, r=min(params.r, P.domain.r), s=params.s_bar, center=label,
                       **nk).sup_norm if not P3.is_zero() else 0.0
    post = [condition("RussemanTroncation", p3_norm, 2 * params.rho * params.eps,
                      note="|P - P_hat| <= 2 rho eps")]

    # divisors on D_rbar(label) for the active modes
    gen = GeneratingFunction(P_hat, K, kappa)
    ys = _polydisc_samples(label, params.r_bar)
    om = K.grad(ys)
    k1 = P.abs_k1()
    ksel = (k1 > 0) & (k1 <= kappa_eff)
    kv = np.stack([k[ksel] for k in gen.ks], axis=-1)  # (nk, d)
    div = np.abs(om @ kv.T)
    bound = params.alpha / (2 * np.abs(kv).sum(axis=1) ** params.tau)
    ratio = float((div / bound).min(initial=np.inf))
    dcond = condition("ArnExtDiopCondExtv5", 1.0, ratio,
                      note="min |K_y(y').n| / (alpha/(2|n|^tau)) over D_rbar and active modes")
    if not dcond["passes"] and not force:
        raise StepConditionError(dcond, conds + [dcond])
    post.append(dcond)

    g_dom = StripDomain.around(label, params.r_bar, params.r_bar, params.s)
    g = build_generating_function(P_hat, K, kappa, domain=g_dom, sigma=2 * params.sigma / 3)
    with warnings.catch_warnings():
        # later steps carry a round-off floor in the high modes; the bounds only need sup norms
        warnings.filterwarnings("ignore", message="Fourier tail is not negligible")
        post.extend(_graf_checks(g, params, label, nk))

    phi = GeneratingMap(gen)
    K_tilde = P.mean_function()
    upd = update_frequency_map(K, K_tilde, params.r_check, params.r_tilde, label, params.L,
                               params.T_bound, params.K_bound, r=min(params.r, P.domain.r))
    post.extend(upd.conditions)
    new_label = upd.G(label)
    out_dom = StripDomain.around(new_label, h_out, h_out, params.s_prime)
    P3_use = None if P3.is_zero() else P3
    Pp = transform_perturbation(P, P3_use, gen, phi, K, out_dom, M_out, oversample)
    Pp_norm = sup_norm(Pp, r=h_out, s=params.s_prime, center=new_label, **nk).sup_norm
    post.append(condition("convEstExt01", Pp_norm, params.C1 * params.rho * params.eps,
                          note="|P'| <= C1 rho eps"))
    w_phi, dphi = _displacement_norms(phi, new_label, h_out, params)
    bound = params.C1 * params.eps / (params.alpha * params.r * params.sigma ** params.nu)
    post.append(condition("convEstExt01", w_phi, bound, note="|W phi_tilde| <= C1 eps/(alpha r sigma^nu)"))
    post.append(condition("convEstExt01", dphi, bound,
                          note="|pi_2 d_x' phi_tilde| <= C1 eps/(alpha r sigma^nu)"))
    post.append(condition("cond1ExtExtv501", phi.last_contraction, 1.0, strict=True,
                          note="sampled |d^2_{y'x} g| < 1 (angle map contraction)"))
    norms = {"P": P_norm, "P_prime": Pp_norm, "P3": p3_norm, "W_phi": w_phi,
             "pi2_dphi": dphi, "inverse_residual": phi.last_residual,
             "kappa_eff": float(kappa_eff), **upd.norms}
    return StepResult(params, g, phi, upd.G, K, upd.K_prime, K_tilde, P, Pp, label, new_label,
                      upd.norms["T_tilde"], norms, conds + post, log_lines)


def _graf_checks(g: GridFunction, params: StepParams, label, nk) -> list:
    d = g.d
    rb, sb = params.r_bar, params.s_bar
    base = params.C0_gen * (1 + 2 * params.rho) * params.eps / params.alpha
    Lbar = 2 * base / params.r * params.sigma ** (-params.tau)

    def nrm(f):
        return sup_norm(f, r=rb, s=sb, center=label, **nk).sup_norm

    out = [condition("GrafCNu", nrm(g), base * params.sigma ** (-params.tau), note="|g|")]
    gx = max(nrm(derivative(g, (0,) * d, tuple(int(i == j) for j in range(d))))
             for i in range(d))
    out.append(condition("GrafCNu", gx, base * params.sigma ** (-(params.tau + 1)), note="|g_x|"))
    vals = []
    for i in range(d):
        ei = tuple(int(i == j) for j in range(d))
        vals.append(nrm(derivative(g, ei)))
        for j in range(d):
            ej = tuple(int(j == q) for q in range(d))
            vals.append(params.sigma * nrm(derivative(g, ei, ej)))
            for k in range(j, d):
                ejk = tuple(int(j == q) + int(k == q) for q in range(d))
                vals.append(params.sigma ** 2 * nrm(derivative(g, ei, ejk)))
    out.append(condition("GrafCNu", max(vals), Lbar,
                         note="max(|g_y'|, sigma |g_y'x|, sigma^2 |g_y'xx|) <= L_bar"))
    return out


def _displacement_norms(phi: GeneratingMap, center, radius, params: StepParams,
                        n_angle: int = 8):
    """Sampled |W (phi' - id)| and |d_x' x - 1| on D_{radius, s'}(center)."""
    d = phi.d
    ys = _polydisc_samples(center, radius, n_theta=4)
    g1 = 2 * np.pi * np.arange(n_angle) / n_angle
    Xr = np.stack(np.meshgrid(*([g1] * d), indexing="ij"), axis=-1).reshape(-1, d)
    w_max = 0.0
    dphi = 0.0
    sp = params.s_prime
    for sg in itertools.product((-1.0, 1.0), repeat=d):
        Xc = Xr + 1j * sp * np.array(sg)
        yq, xq = phi.forward(ys, Xc)
        dy = np.abs(yq - ys[:, None, :]).max(initial=0.0) / params.r
        dx = np.abs(xq - Xc[None]).max(initial=0.0) / params.sigma
        w_max = max(w_max, dy, dx)
        J = phi.jacobian(ys, Xc)
        dphi = max(dphi, _mat_norm(J[..., d:, d:] - np.eye(d)))
    return float(w_max), float(dphi)
