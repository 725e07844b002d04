"""The full iteration: schedules, the smallness ledger, repeated steps and the limit torus."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from math import log

import numpy as np

from .frequencies import DiophantineSpec, check_diophantine, diophantine_margin
from .funcrep import GridFunction, StripDomain, evaluate, from_samples, sup_norm
from .hamiltonian import GOLDEN, IntegrablePart, QuadraticBase
from .kamstep import (FrequencyMap, StepConditionError, StepParams, _vec_norm, active_band,
                      condition, kam_step)
from .smoothing import FiniteRegFunction, QuadraticPolynomial, cosine_family, jackson_smooth, \
    trig_function

CLOSED_RTOL = 1e-12
GATING = ("SmaLConD", "DefNArnExt1v501", "DefNArn2v501", "cond1ExtExtv501", "FitnessEq1",
          "FitnessEq2", "FitnessEq3")


class SchemeConditionError(RuntimeError):
    """A hypothesis failed; ``condition`` names it, ``step`` says where."""

    def __init__(self, cond: dict, step: int, result=None):
        self.condition = cond
        self.step = step
        self.result = result
        super().__init__(f"step {step}: ({cond['name']}) violated: {cond.get('note', '')}; "
                         f"lhs {cond['lhs']:.6g} vs rhs {cond['rhs']:.6g}")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class TorusError(RuntimeError):
    """The angle component of the limit map is not invertible (no graph form)."""


def _closed(name, lhs, rhs, note="", gating=True):
    c = condition(name, float(lhs), float(rhs), note=note)
    c["passes"] = bool(lhs <= rhs * (1 + CLOSED_RTOL) if rhs >= 0 else lhs <= rhs)
    c["gating"] = gating
    return c


def _strict(name, lhs, rhs, note="", gating=True):
    c = condition(name, float(lhs), float(rhs), strict=True, note=note)
    c["gating"] = gating
    return c


# ---------------------------------------------------------------------------
# configuration and schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchemeConfig:
    """Scalars of a run.  ``eps`` is the C^l size of the perturbation.

    The constants C0..C6 and c are free configuration; the defaults are the
    values the worked example is certified with.  ``omega`` (target frequency)
    or ``label`` (action) fixes the torus followed.
    """

    alpha: float
    eps: float
    tau: float = 1.2
    l: float = 8.0
    d: int = 2
    K_bound: float = 1.0
    T_bound: float = 1.0
    eta: float | None = None
    C0: float = 5e-6
    C0_gen: float = 1.0
    C1: float = 5.0
    C2: float = 1.05
    C3: float = 0.25
    C4: float = 1.0
    C5: float = 1.0
    C6: float = 1.0
    c: float = 0.25
    m: float = 1.0
    m_hat: float = 0.5
    max_steps: int = 6
    tol: float = 1e-12
    n_modes: int = 32
    n_nodes: int = 6
    oversample: int = 2
    torus_grid: int = 32
    omega: tuple | None = None
    label: tuple | None = None

    def __post_init__(self):
        nu = self.tau + 1
        if not (self.l > 2 * nu > 2 * self.d >= 4):
            raise ValueError(f"config violates l > 2 nu > 2 d >= 4 (l={self.l}, nu={nu}, d={self.d})")
        if not 0 < self.m < self.l / 2 - nu:
            raise ValueError("need 0 < m < l/2 - nu")
        if not 0 < self.m_hat < min((self.m + 1) / nu, 2):
            raise ValueError("need 0 < m_hat < min((m+1)/nu, 2)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        for k in ("K_bound", "T_bound", "C0", "C0_gen", "C1", "C2", "C3", "tol"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.eta is None:
            object.__setattr__(self, "eta", self.T_bound * self.K_bound)
        if self.omega is not None and self.label is not None:
            raise ValueError("give either omega or label, not both")

    @property
    def nu(self) -> float:
        return self.tau + 1

    @property
    def sigma(self) -> float:
        return (self.eps ** 1.5 / (self.eta ** (2 * self.l / self.nu) * self.alpha
                                   * np.sqrt(self.K_bound))) ** (1 / (self.l + self.nu))

    @property
    def rho(self) -> float:
        if self.eps == 0:
            return 0.0
        return 2 * self.C1 * self.K_bound * self.eps / (self.alpha ** 2 * self.sigma ** (2 * self.nu))

    @property
    def alpha_star(self) -> float:
        return diophantine_margin(self.alpha, self.l, self.nu)

    @property
    def l_prime(self) -> float:
        l, nu = self.l, self.nu
        return max((6 + 2 * l / nu) * (l + nu) / (l - 2 * nu) - 2 * l * (l - nu) / (l - 2 * nu),
                   2 * l * (l + 3 * nu) / (nu * (l - 2 * nu)))

    @property
    def a(self) -> float:
        l, nu = self.l, self.nu
        return max((6 + 2 * l / nu) * (l + nu) - 2 * l * (l - nu),
                   2 * l * (l + 3 * nu) / nu) / (l - 2 * nu)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("omega", "label"):
            if out[k] is not None:
                out[k] = [float(v) for v in out[k]]
        out.update(nu=self.nu, sigma=self.sigma, rho=self.rho, alpha_star=self.alpha_star,
                   l_prime=self.l_prime, a=self.a)
        return out


@dataclass(frozen=True)
class Schedule:
    """Per-step sequences.  ``r_check_j[j]`` and ``r_tilde_j[j]`` hold the
    values indexed j+1 by the defining formulas (those used during step j)."""

    sigma_j: np.ndarray
    s_j: np.ndarray
    r_j: np.ndarray
    r_check_j: np.ndarray
    r_tilde_j: np.ndarray
    kappa_j: np.ndarray
    sigma_bar_j: np.ndarray
    xi: float
    xi_j: np.ndarray
    lam: float
    sigma0: float
    r0: float
    fitness: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.sigma_j)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in (
            "sigma_j", "s_j", "r_j", "r_check_j", "r_tilde_j", "kappa_j", "sigma_bar_j", "xi_j")}
        out.update(xi=self.xi, lam=self.lam, sigma0=self.sigma0, r0=self.r0)
        return out


def make_schedule(config: SchemeConfig, n: int | None = None) -> Schedule:
    """All sequences by direct formula for j = 0..n-1 (default max_steps + 2)."""
    c = config
    n = c.max_steps + 2 if n is None else n
    if c.eps == 0:
        raise ValueError("eps = 0 has no schedule (nothing to iterate)")
    nu, d, eta = c.nu, c.d, c.eta
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma0 = c.sigma / c.C2
        r0 = c.alpha * sigma0 ** nu / (2 * c.K_bound)
        lam = log(1.0 / c.rho)
        xi = 1.0 / (c.C2 * eta ** (1 / nu) * lam)
        j = np.arange(n, dtype=float)
        xp = np.float64(xi)
        sigma_j = sigma0 * xp ** j
        r_j = r0 * np.power(xp, nu * j)
        sched = Schedule(
            sigma_j=sigma_j,
            s_j=4 * sigma_j,
            r_j=r_j,
            r_check_j=r0 / (64 * d * eta) * np.power(xp, nu * j),
            r_tilde_j=r0 / (2 ** 11 * d ** 2 * eta ** 2) * np.power(xp, (nu + c.m) * j),
            kappa_j=6 * lam / sigma_j,
            sigma_bar_j=np.power(xp, c.m * j),
            xi=float(xi),
            xi_j=np.concatenate([[4 * sigma0], sigma_j[:-1]]),
            lam=float(lam),
            sigma0=float(sigma0),
            r0=float(r0),
        )
    object.__setattr__(sched, "fitness", fitness_conditions(config, sched))
    return sched


def fitness_conditions(config: SchemeConfig, sched: Schedule) -> list[dict]:
    """Nested-domain relations for j >= 1, plus the informational radius relation."""
    out = []
    s, sg, r = sched.s_j, sched.sigma_j, sched.r_j
    for j in range(1, sched.n):
        out.append({**_strict("FitnessEq1", s[j] + sg[j - 1] / 3, s[j - 1] / 2,
                              note="s_j + sigma_{j-1}/3 < s_{j-1}/2"), "j": j})
        lhs = 2 * r[j] + r[j - 1] * sg[j - 1] / 3
        out.append({**_strict("FitnessEq2", lhs, r[j - 1] / 2,
                              note="2 r_j + r_{j-1} sigma_{j-1}/3 < r_{j-1}/2"), "j": j})
        out.append({**_strict("FitnessEq3", lhs, sg[j - 1],
                              note="2 r_j + r_{j-1} sigma_{j-1}/3 < sigma_{j-1}"), "j": j})
    c = config
    for j in range(sched.n - 1):
        with np.errstate(invalid="ignore"):
            cap = min(c.alpha / (2 * c.d * 2 * c.K_bound * sched.kappa_j[j] ** c.nu),
                      sched.r_check_j[j])
        out.append({**_strict("EqRJPl1", 2 * r[j + 1], cap / 4, gating=False,
                              note="2 r_{j+1} < min(alpha/(2d 2K kappa_j^nu), r_check_{j+1})/4"
                                   " (informational)"), "j": j})
    return out


# ---------------------------------------------------------------------------
# the smallness ledger
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    conditions: list

    @property
    def passes(self) -> bool:
        return all(c["passes"] for c in self.conditions if c.get("gating", True))

    @property
    def failed(self) -> list:
        return [c for c in self.conditions if c.get("gating", True) and not c["passes"]]

    def first_failure(self) -> dict | None:
        f = self.failed
        return f[0] if f else None


def step_radii(config: SchemeConfig, sched: Schedule, j: int) -> dict:
    """r_check, r_tilde and L-free scalars of step j with the doubled bounds."""
    c = config
    K2, T2 = 2 * c.K_bound, 2 * c.T_bound
    r = sched.r_j[j]
    r_check_max = r / (32 * c.d * T2 * K2)
    r_check = min(sched.r_check_j[j], r_check_max)
    r_tilde = r_check * sched.sigma_bar_j[j] / (16 * c.d * T2 * K2)
    return {"K": K2, "T": T2, "eta": 4 * c.T_bound * c.K_bound, "r": r, "r_check": r_check,
            "r_check_schedule": sched.r_check_j[j], "r_tilde": r_tilde,
            "r_tilde_schedule": sched.r_tilde_j[j]}


def check_smallness(config: SchemeConfig, schedule: Schedule | None = None,
                    step_state: dict | None = None) -> ConditionReport:
    """Evaluate every named hypothesis with its slack.

    ``step_state`` may carry ``j`` and the measured ``eps`` of the current
    perturbation; otherwise j = 0 with eps = config.eps.
    """
    c = config
    st = step_state or {}
    j = int(st.get("j", 0))
    eps_j = float(st.get("eps", c.eps))
    lp = c.l_prime
    e1 = (c.l + 2 * c.nu) / (c.l - 2 * c.nu)
    e2 = 2 * c.l / (c.l - 2 * c.nu)
    out = [
        _closed("SmaLConD", c.alpha, c.K_bound / c.C3, note="alpha <= K / C3"),
        _closed("SmaLConD", c.C3 * c.eps * c.K_bound ** e1 * c.eta ** lp * c.alpha ** (-e2), 1.0,
                note="C3 eps K^((l+2nu)/(l-2nu)) eta^l' alpha^(-2l/(l-2nu)) <= 1"),
    ]
    if c.eps == 0 or eps_j == 0:
        out += [
            _closed("DefNArnExt1v501", 0.0, 0.0 if c.eps == 0 else c.rho,
                    note="sigma^-nu eps/(alpha r) <= rho"),
            _closed("DefNArnExt1v501", c.rho, 0.25, note="rho <= 1/4"),
            _closed("cond1ExtExtv501", 0.0, 1.0 / 3.0, note="L <= sigma_bar/3"),
        ]
        return ConditionReport(out)
    sched = make_schedule(c) if schedule is None else schedule
    if j >= sched.n:
        raise ValueError(f"schedule has {sched.n} terms, step {j} requested")
    sg, r = sched.sigma_j[j], sched.r_j[j]
    rr = step_radii(c, sched, j)
    with np.errstate(invalid="ignore", divide="ignore"):
        out += [
            _closed("DefNArnExt1v501", sg ** (-c.nu) * eps_j / (c.alpha * r), c.rho,
                    note="sigma_j^-nu eps_j/(alpha r_j) <= rho"),
            _closed("DefNArnExt1v501", c.rho, 0.25, note="rho <= 1/4"),
            _closed("DefNArnExt1v501", r, c.alpha * sg ** c.nu / rr["K"],
                    note="r_j <= alpha sigma_j^nu / (2K)"),
            _closed("DefNArn2v501", rr["r_check"], r / (32 * c.d * rr["T"] * rr["K"]),
                    note="r_check <= r/(32 d (2T)(2K))"),
        ]
        L = c.C0 * rr["eta"] * rr["T"] * eps_j / (r * rr["r_tilde"])
        out.append(_closed("cond1ExtExtv501", L, sched.sigma_bar_j[j] / 3,
                           note="L = C0 (4TK)(2T) eps_j/(r_j r_tilde_{j+1}) <= sigma_bar_j/3"))
    if j == 0:
        out += [dict(f) for f in sched.fitness]
    for f in out:
        f.setdefault("j", j)
    return ConditionReport(out)


# ---------------------------------------------------------------------------
# integrable parts
# ---------------------------------------------------------------------------

def quadratic_hamiltonian(A, b=None, c: float = 0.0, l: float = 8.0) -> FiniteRegFunction:
    """K(y) = c + b.y + y.A.y/2 as finitely differentiable data (smoothed exactly)."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
    return trig_function({}, d, l, poly_part=QuadraticPolynomial(float(c), b, A), cl_norm=None)


def as_integrable(K) -> IntegrablePart | None:
    """Exact IntegrablePart for quadratic data; ``None`` if K needs smoothing."""
    if isinstance(K, IntegrablePart):
        return K
    if isinstance(K, QuadraticBase):
        return IntegrablePart(K)
    if isinstance(K, FiniteRegFunction) and isinstance(K.poly_part, QuadraticPolynomial) \
            and not K.trig_terms and K.notes.get("remainder") is None:
        q = K.poly_part
        return IntegrablePart(QuadraticBase(np.asarray(q.A, float), np.asarray(q.b, float),
                                            float(q.c)))
    return None


def _smoothed_integrable(K: FiniteRegFunction, xi: float, domain: StripDomain,
                         n_nodes: int) -> tuple[IntegrablePart, GridFunction]:
    Kg = jackson_smooth(K, xi, domain.with_strips(s=min(xi, 1.0)), n_modes=1, n_nodes=n_nodes)
    d = K.d
    return IntegrablePart(QuadraticBase(np.zeros((d, d)), np.zeros(d))).add(Kg), Kg


def _label_for(K: IntegrablePart, omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    A, b = K.base.A, K.base.b
    y = np.linalg.solve(A, omega - b) if abs(np.linalg.det(A)) > 0 else np.zeros_like(omega)
    for _ in range(50):
        F = K.grad(y[None])[0] - omega
        step = np.linalg.solve(K.hess(y[None])[0], F)
        y = y - step
        if np.abs(step).max() <= 1e-15 * (1 + np.abs(y).max()):
            break
    return y


@dataclass
class AnchorReport:
    G0: FrequencyMap
    G0_minus_id: float
    dG0_minus_id: float
    defect: float
    bound: float | None

    @property
    def passes(self) -> bool:
        return self.bound is None or max(self.G0_minus_id, self.dG0_minus_id) <= self.bound


def frequency_anchor(K0, K, points, C1: float | None = None, eta: float | None = None,
                     xi0: float | None = None, l: float | None = None,
                     fd_step: float = 1e-6) -> AnchorReport:
    """G0 = (dK0)^-1 o dK by Newton, measured on ``points`` (n, d).

    The bound 2 C1 eta xi0^(l-1) is reported when its ingredients are given.
    """
    K0 = as_integrable(K0) or K0
    K = as_integrable(K) or K
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    G0 = FrequencyMap(K, K0)
    z = G0(pts)
    dev = float(np.abs(z - pts).max(initial=0.0))
    d = pts.shape[1]
    jac = 0.0
    for i in range(d):
        e = np.zeros(d)
        e[i] = fd_step
        col = (G0(pts + e) - G0(pts - e)) / (2 * fd_step)
        col[:, i] -= 1.0
        jac = max(jac, float(np.abs(col).max(initial=0.0)))
    defect = _vec_norm(K0.grad(z) - K.grad(pts))
    bound = None
    if None not in (C1, eta, xi0, l):
        bound = 2 * C1 * eta * xi0 ** (l - 1)
    return AnchorReport(G0, dev, jac, defect, bound)


# ---------------------------------------------------------------------------
# the limit torus
# ---------------------------------------------------------------------------

def compose_maps(maps: list, y, x):
    """phi_1 o ... o phi_J at points (y, x) of shape (Q, d); the last map acts first."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.broadcast_to(y, x.shape).copy()
    for phi in reversed(maps):
        y, x = phi.forward_points(y, x)
    return y, x


def _fourier_eval(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Real trigonometric interpolant with FFT coefficients c (n,)*d + (k,) at x (Q, d)."""
    d = x.shape[1]
    n = c.shape[0]
    ks = np.fft.fftfreq(n, 1.0 / n)
    ks[n // 2] = 0.0 if n % 2 == 0 else ks[n // 2]
    out = c
    E = [np.exp(1j * np.outer(x[:, i], ks)) for i in range(d)]
    out = np.einsum("a...,qa->q...", out, E[0])
    for i in range(1, d):
        out = np.einsum("qa...,qa->q...", out, E[i])
    return out.real


def _spectral(vals: np.ndarray, d: int) -> np.ndarray:
    n = vals.shape[0]
    c = np.fft.fftn(vals, axes=tuple(range(d))) / n ** d
    if n % 2 == 0:
        for i in range(d):
            idx = [slice(None)] * c.ndim
            idx[i] = n // 2
            c[tuple(idx)] = 0.0
    return c


@dataclass
class TorusEmbedding:
    """phi_*(y_*, .) sampled on an n^d angle grid with its graph form."""

    y_star: np.ndarray
    omega_star: np.ndarray
    n_grid: int
    angle_samples: np.ndarray  # (n^d, 2d): v then u
    graph_samples: np.ndarray  # (n^d, d): v(u^-1(x))
    K_star_value: float
    maps: list = field(default_factory=list, repr=False)
    stats: dict = field(default_factory=dict)
    diophantine: dict | None = None

    @property
    def d(self) -> int:
        return self.y_star.size

    def x_grid(self) -> np.ndarray:
        g = 2 * np.pi * np.arange(self.n_grid) / self.n_grid
        return np.stack(np.meshgrid(*([g] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)

    def _coeffs(self):
        if not hasattr(self, "_c"):
            d, n = self.d, self.n_grid
            X = self.x_grid()
            per = self.angle_samples.copy()
            per[:, d:] -= X
            self._c = _spectral(per.reshape((n,) * d + (2 * d,)), d)
        return self._c

    def embed(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(v, u) at arbitrary angles by trigonometric interpolation of the samples."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        vals = _fourier_eval(self._coeffs(), x)
        d = self.d
        return vals[:, :d], vals[:, d:] + x

    def angle_jacobians(self) -> tuple[np.ndarray, np.ndarray]:
        """d_x v and d_x u on the grid, each (n^d, d, d), by spectral differentiation."""
        d, n = self.d, self.n_grid
        c = self._coeffs()
        ks = np.fft.fftfreq(n, 1.0 / n)
        Dv = np.empty((n ** d, d, d))
        Du = np.empty((n ** d, d, d))
        for j in range(d):
            shape = [1] * d + [1]
            shape[j] = n
            dc = c * (1j * ks).reshape(shape)
            vals = np.fft.ifftn(dc * n ** d, axes=tuple(range(d))).real.reshape(n ** d, 2 * d)
            Dv[:, :, j] = vals[:, :d]
            Du[:, :, j] = vals[:, d:]
            Du[:, j, j] += 1.0
        return Dv, Du

    def compose(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(v, u) at arbitrary angles by stepwise composition of the stored maps."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return compose_maps(self.maps, self.y_star[None, :], x)

    def write_csv(self, path) -> None:
        d = self.d
        X = self.x_grid()
        cols = ([f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
                + [f"u{i + 1}" for i in range(d)] + [f"graph_v{i + 1}" for i in range(d)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for a in range(X.shape[0]):
                w.writerow([repr(float(v)) for v in np.concatenate(
                    [X[a], self.angle_samples[a], self.graph_samples[a]])])

    def summary(self) -> dict:
        return {"y_star": self.y_star.tolist(), "omega_star": self.omega_star.tolist(),
                "K_star": float(self.K_star_value), "n_grid": self.n_grid,
                "steps": len(self.maps), "stats": self.stats, "diophantine": self.diophantine}


def assemble_torus(maps: list, y_star, omega_star=None, K_star: float = 0.0, n_grid: int = 32,
                   tol: float = 1e-12, alpha: float | None = None, tau: float | None = None,
                   cutoff: int | None = None, seed: int = 0) -> TorusEmbedding:
    """Compose the step maps at y_* on an angle grid and put the torus in graph form."""
    y_star = np.asarray(y_star, dtype=float)
    d = y_star.size
    omega_star = np.zeros(d) if omega_star is None else np.asarray(omega_star, dtype=float)
    g = 2 * np.pi * np.arange(n_grid) / n_grid
    X = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    v, u = compose_maps(maps, y_star[None, :], X)
    emb = TorusEmbedding(y_star, omega_star, n_grid, np.concatenate([v, u], axis=1),
                         np.zeros((X.shape[0], d)), float(K_star), list(maps))
    # graph form: theta with u(theta) = x
    Dv, Du = emb.angle_jacobians()
    det = np.linalg.det(Du)
    if np.any(det <= 0):
        raise TorusError("angle map x -> u_*(y_*, x) is not orientation preserving on the grid")
    theta = X.copy()
    res = np.inf
    for _ in range(50):
        vv, uu = emb.embed(theta)
        F = uu - X
        res = float(np.abs(F).max(initial=0.0))
        if res <= tol:
            break
        J = _interp_jac(emb, theta)
        theta = theta - np.linalg.solve(J, F[..., None])[..., 0]
    if res > tol:
        raise TorusError(f"angle inversion did not converge (residual {res:.2e})")
    emb.graph_samples = emb.embed(theta)[0]
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, 2 * np.pi, size=(16, d))
    ve, ue = emb.embed(xs)
    vc, uc = emb.compose(xs)
    emb.stats = {
        "displacement": float(np.abs(v - y_star).max(initial=0.0)),
        "oscillation": float((v.max(axis=0) - v.min(axis=0)).max(initial=0.0)),
        "angle_shift": float(np.abs(u - X).max(initial=0.0)),
        "inversion_residual": res,
        "min_det_du": float(det.min()),
        "composition_consistency": float(max(np.abs(ve - vc).max(), np.abs(ue - uc).max())),
    }
    if alpha is not None and tau is not None and np.any(omega_star):
        rep = check_diophantine(DiophantineSpec(omega_star, alpha, tau,
                                                int(cutoff) if cutoff else 200))
        emb.diophantine = {"worst_k": list(rep.worst_k), "worst_value": rep.worst_value,
                           "alpha": alpha, "passes": rep.passes, "cutoff": rep.cutoff,
                           "note": rep.note}
    return emb


def _interp_jac(emb: TorusEmbedding, x: np.ndarray) -> np.ndarray:
    d, n = emb.d, emb.n_grid
    c = emb._coeffs()[..., d:]
    ks = np.fft.fftfreq(n, 1.0 / n)
    J = np.empty((x.shape[0], d, d))
    for j in range(d):
        shape = [1] * d + [1]
        shape[j] = n
        J[:, :, j] = _fourier_eval(c * (1j * ks).reshape(shape), x)
        J[:, j, j] += 1.0
    return J


# ---------------------------------------------------------------------------
# the driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: SchemeConfig
    schedule: Schedule | None
    steps: list
    history: list
    conditions: list
    status: str
    label: np.ndarray
    K_final: IntegrablePart
    P_final: GridFunction | None
    maps: list
    torus: TorusEmbedding | None = None
    log: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def norms(self) -> np.ndarray:
        return np.array([h["P_norm"] for h in self.history])

    @property
    def estimates_hold(self) -> bool:
        return all(c["passes"] for c in self.conditions if not c.get("gating", True))

    def report(self) -> dict:
        return {
            "status": self.status,
            "config": self.config.to_dict(),
            "schedule": None if self.schedule is None else self.schedule.to_dict(),
            "history": self.history,
            "conditions": self.conditions,
            "steps": [s.report() for s in self.steps],
            "label": np.asarray(self.label, dtype=float).tolist(),
            "torus": None if self.torus is None else self.torus.summary(),
            "log": self.log,
        }

    def write_json(self, path, header: dict | None = None) -> None:
        body = self.report()
        body["header"] = {"elapsed_seconds": self.elapsed, **(header or {})}
        with open(path, "w") as fh:
            json.dump(body, fh, indent=1, default=_json_default)

    def write_convergence_csv(self, path) -> None:
        cols = ["j", "P_norm", "ratio", "sigma_j", "s_j", "r_j", "kappa_j", "min_slack"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for h in self.history:
                w.writerow([h["j"]] + [repr(float(h[k])) if h[k] is not None else ""
                                       for k in cols[1:]])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)


def _increment(new: GridFunction, old: GridFunction) -> GridFunction | None:
    diff = new.coeffs - old.coeffs
    if not np.any(diff):
        return None
    return GridFunction(new.domain, diff, new.reality_flag and old.reality_flag)


def compose_increment(delta: GridFunction, maps: list, domain: StripDomain, n_modes: int,
                      n_nodes: int, oversample: int = 2) -> GridFunction:
    """delta o phi^j sampled on the node/angle grid of ``domain``."""
    d = domain.d
    n2 = oversample * n_modes
    proto = GridFunction(domain, np.zeros((n_nodes,) * d + (n_modes,) * d))
    Y = proto.node_points().reshape(-1, d)
    X = proto.angle_grid(n2).reshape(-1, d)
    yy = np.repeat(Y, X.shape[0], axis=0)
    xx = np.tile(X, (Y.shape[0], 1))
    yc, xc = compose_maps(maps, yy, xx)
    vals = np.asarray(evaluate(delta, yc, xc, check_domain=False)).real
    return from_samples(vals.reshape((n_nodes,) * d + (n2,) * d), domain, True, n_modes=n_modes)


def step_params(config: SchemeConfig, sched: Schedule, j: int, eps_j: float,
                kappa_eff: float | None = None, rho: float | None = None) -> tuple[StepParams, list]:
    """StepParams of step j with the doubled bounds; returns the binding log too."""
    c = config
    rr = step_radii(c, sched, j)
    log_lines = []
    if rr["r_check_schedule"] > rr["r_check"]:
        log_lines.append(f"step {j}: schedule r_check {rr['r_check_schedule']:.4g} exceeds "
                         f"r/(32 d T K) = {rr['r_check']:.4g}; the latter is used")
    p = StepParams(r=float(sched.r_j[j]), s=float(sched.s_j[j]), sigma=float(sched.sigma_j[j]),
                   sigma_bar=float(sched.sigma_bar_j[j]), alpha=c.alpha, tau=c.tau,
                   K_bound=rr["K"], T_bound=rr["T"], rho=c.rho if rho is None else rho, d=c.d,
                   eps=eps_j, eta=rr["eta"], r_check=rr["r_check"], r_bar=None,
                   r_tilde=rr["r_tilde"], C0=c.C0, C0_gen=c.C0_gen, C1=c.C1)
    cap = p.r_bar_max(kappa_eff)
    r_next = float(sched.r_j[j + 1]) if j + 1 < sched.n else float(sched.r_j[j]) * sched.xi ** c.nu
    r_bar = min(4 * r_next, cap)
    if r_bar < 4 * r_next:
        log_lines.append(f"step {j}: r_bar capped at {r_bar:.4g} < 4 r_(j+1) = {4 * r_next:.4g}")
    return replace(p, r_bar=r_bar), log_lines


def _estimates(config: SchemeConfig, sched: Schedule, j: int, res) -> list[dict]:
    """Per-step estimates of the iteration lemma, reported (not gating)."""
    c = config
    xi = sched.xi
    jj = j + 1
    out = [
        _closed("estfin2Ext01v501", res.norms["P_prime"], c.C1 * c.K_bound * sched.xi_j[j] ** c.l,
                note="|P_{j+1}| <= C1 K xi_j^l", gating=False),
        _closed("estGiidv201", res.norms.get("G_minus_id", 0.0),
                sched.r_tilde_j[j] * xi ** (2 * c.nu) * xi ** (c.m * j),
                note="|G_{j+1} - id| <= r_tilde_{j+1} xi^(2nu) xi^(m j)", gating=False),
        _closed("estfin2Ext03v501", max(res.norms.get("W_phi", 0.0), res.norms.get("pi2_dphi", 0.0)),
                xi ** (2 * c.nu) * xi ** (c.m * j),
                note="max(|W(phi - id)|, |pi2 d_x(phi - id)|) <= xi^(2nu) xi^(m j)", gating=False),
    ]
    for e in out:
        e["j"] = jj
    return out


def _measure(P: GridFunction, radius: float, s: float, center) -> float:
    if P.is_zero():
        return 0.0
    return sup_norm(P, r=min(radius, P.domain.r), s=min(s, P.domain.s), center=center,
                    n_theta=8).sup_norm


def run(K_raw, P_raw: FiniteRegFunction, config: SchemeConfig, force: bool = False,
        assemble: bool = True) -> RunResult:
    """Iterate KAM steps on K + P until |P_j| <= tol * eps or max_steps.

    Hypothesis failures raise SchemeConditionError (with the partial result)
    unless ``force``; growth of |P_j| two steps in a row raises DivergenceError.
    """
    t0 = time.perf_counter()
    c = config
    d = c.d
    log_lines = []
    K_exact = as_integrable(K_raw)
    base_dom = None

    # zero perturbation: nothing to iterate
    if P_raw.is_zero() or c.eps == 0:
        if K_exact is None:
            base_dom = StripDomain(np.array([[-1.0, 1.0]] * d), 1.0, 1.0)
            K_exact, _ = _smoothed_integrable(K_raw, 1.0, base_dom, c.n_nodes)
        y0 = _start_label(K_exact, c)
        rep = check_smallness(c)
        res = RunResult(c, None, [], [{"j": 0, "P_norm": 0.0, "ratio": None, "sigma_j": None,
                                       "s_j": None, "r_j": None, "kappa_j": None,
                                       "min_slack": None, "label": y0.tolist()}],
                        rep.conditions, "converged", y0, K_exact, None, [],
                        log=["zero perturbation: converged at step 0"])
        if assemble:
            res.torus = assemble_torus([], y0, K_exact.grad(y0[None])[0],
                                       float(K_exact.value(y0[None])[0]), c.torus_grid)
        res.elapsed = time.perf_counter() - t0
        return res

    sched = make_schedule(c)
    rho = c.rho
    if force and not 0 < rho < 1:
        log_lines.append(f"forced: rho = {rho:.4g} clamped to 1/4 for the step parameters")
        rho = 0.25

    # K_0 and the label
    if K_exact is None:
        y_guess = np.asarray(c.label if c.label is not None else c.omega, dtype=float)
        base_dom = StripDomain.around(y_guess, 4 * sched.r0, 2 * sched.r0, 1.0)
        K0, _ = _smoothed_integrable(K_raw, float(sched.xi_j[0]), base_dom, c.n_nodes)
        log_lines.append("K smoothed on an action box of half-width 4 r_0")
    else:
        K0 = K_exact
    y = _start_label(K0, c)
    xi0 = float(sched.xi_j[0])
    dom0 = StripDomain.around(y, float(sched.r_j[0]), float(sched.r_j[0]), min(xi0, 1.0))
    smooth_dom = dom0 if base_dom is None else base_dom.with_strips(s=min(xi0, 1.0))
    P_s = jackson_smooth(P_raw, xi0, dom0, n_modes=c.n_modes, n_nodes=c.n_nodes)
    P_prev_s = jackson_smooth(P_raw, xi0, smooth_dom, n_modes=c.n_modes, n_nodes=c.n_nodes) \
        if smooth_dom is not dom0 else P_s
    K_prev_s = None
    if K_exact is None:
        K_prev_s = jackson_smooth(K_raw, xi0, smooth_dom, n_modes=c.n_modes, n_nodes=c.n_nodes)

    P = P_s
    K = K0
    maps, steps, history, conds = [], [], [], []
    norms = []
    status = "max_steps"

    def partial(st):
        return RunResult(c, sched, steps, history, conds, st, y, K, P, maps, None, log_lines,
                         time.perf_counter() - t0)

    for j in range(c.max_steps + 1):
        if j > 0:
            xij = float(sched.xi_j[j])
            P_new = jackson_smooth(P_raw, xij, smooth_dom.with_strips(s=min(xij, 1.0)),
                                   n_modes=c.n_modes, n_nodes=c.n_nodes)
            deltas = [_increment(P_new, P_prev_s)]
            P_prev_s = P_new
            if K_prev_s is not None:
                K_new = jackson_smooth(K_raw, xij, smooth_dom.with_strips(s=min(xij, 1.0)),
                                       n_modes=c.n_modes, n_nodes=c.n_nodes)
                deltas.append(_increment(K_new, K_prev_s))
                K_prev_s = K_new
            for dlt in deltas:
                if dlt is not None:
                    P = P + compose_increment(dlt, maps, P.domain, c.n_modes, c.n_nodes,
                                              c.oversample)
                    log_lines.append(f"step {j}: smoothing increment composed with phi^{j}")
        eps_j = _measure(P, float(sched.r_j[j]), float(sched.s_j[j]), y)
        if P.domain.r < sched.r_j[j]:
            log_lines.append(f"step {j}: |P_j| measured on radius {P.domain.r:.4g} < r_j = "
                             f"{sched.r_j[j]:.4g} (domain margin binds)")
        norms.append(eps_j)
        ratio = eps_j / norms[-2] if len(norms) > 1 and norms[-2] > 0 else None
        rep = check_smallness(c, sched, {"j": j, "eps": eps_j})
        gating = [x for x in rep.conditions if x.get("gating", True)]
        history.append({"j": j, "P_norm": eps_j, "ratio": ratio,
                        "sigma_j": float(sched.sigma_j[j]), "s_j": float(sched.s_j[j]),
                        "r_j": float(sched.r_j[j]), "kappa_j": float(sched.kappa_j[j]),
                        "min_slack": float(min(x["slack"] for x in gating)),
                        "label": np.asarray(y, dtype=float).tolist()})
        conds.extend(rep.conditions if j == 0 else
                     [x for x in rep.conditions if x["name"] != "SmaLConD"])
        if j >= 1:
            conds.append({**_closed("calPjxijmoin1", eps_j,
                                    3 * c.C1 * c.K_bound * sched.xi_j[j - 1] ** c.l,
                                    note="|P^j| <= 3 C1 K xi_{j-1}^l", gating=False), "j": j})
        if j == 0 and not rep.passes and not force:
            # the gate comes first: outside it the smoothed data may vanish spuriously
            res = partial("condition_failed")
            raise SchemeConditionError(rep.first_failure(), 0, res)
        if eps_j <= c.tol * c.eps:
            status = "converged"
            break
        if len(norms) >= 3 and norms[-1] > norms[-2] > norms[-3]:
            status = "diverged"
            res = partial(status)
            raise DivergenceError(f"|P_j| grew two steps in a row at step {j}", res)
        if j == c.max_steps:
            break
        if not rep.passes:
            bad = rep.first_failure()
            if not force:
                res = partial("condition_failed")
                raise SchemeConditionError(bad, j, res)
            log_lines.append(f"step {j}: forced past ({bad['name']}) {bad.get('note', '')}")
        kap = float(sched.kappa_j[j])
        band = active_band(P)
        kappa_eff = min(kap, band) if band > 0 else kap
        if j + 1 >= sched.n:
            sched = make_schedule(c, j + 3)
        params, plog = step_params(c, sched, j, eps_j, kappa_eff, rho)
        log_lines.extend(plog)
        r_next = float(sched.r_j[j + 1])
        h_out = min(r_next, params.r_bar / 2)
        if h_out < r_next:
            log_lines.append(f"step {j}: output half-width r_bar/2 = {h_out:.4g} < r_(j+1)")
        try:
            res_j = kam_step(K, P, params, label=y, out_halfwidth=h_out, out_nodes=c.n_nodes,
                             oversample=c.oversample, force=force)
        except StepConditionError as e:
            res = partial("condition_failed")
            raise SchemeConditionError(e.condition, j, res) from e
        for x in res_j.conditions:
            x = dict(x)
            x["j"] = j
            x.setdefault("gating", x["name"] in GATING or x["name"] == "ArnExtDiopCondExtv5")
            conds.append(x)
        conds.extend(_estimates(c, sched, j, res_j))
        log_lines.extend(f"step {j}: {s}" for s in res_j.log)
        steps.append(res_j)
        maps.append(res_j.phi_prime)
        K, P, y = res_j.K_prime, res_j.P_prime, res_j.new_label
    result = RunResult(c, sched, steps, history, conds, status, y, K, P, maps, None, log_lines)
    if assemble and status == "converged":
        kmax = max((s.norms.get("kappa_eff", 0.0) for s in steps), default=0.0)
        omega_star = K.grad(np.asarray(y)[None])[0]
        result.torus = assemble_torus(maps, y, omega_star, float(K.value(np.asarray(y)[None])[0]),
                                      c.torus_grid, alpha=c.alpha, tau=c.tau,
                                      cutoff=max(int(kmax), 1))
        Hs = _sample_H(K_raw, P_raw, result.torus)
        if Hs is not None:
            result.torus.stats["conjugacy_defect"] = float(np.abs(Hs - result.torus.K_star_value).max())
    result.elapsed = time.perf_counter() - t0
    return result


@dataclass
class StepInput:
    """Everything step 0 of :func:`run` hands to the KAM step."""

    K: IntegrablePart
    P: GridFunction
    params: StepParams
    label: np.ndarray
    out_halfwidth: float
    schedule: Schedule
    log: list


def initial_step(K_raw, P_raw: FiniteRegFunction, config: SchemeConfig,
                 rho: float | None = None) -> StepInput:
    """Smooth the data to the strip xi_0 and build the step-0 parameters as run does."""
    c = config
    sched = make_schedule(c)
    K = as_integrable(K_raw)
    if K is None:
        raise ValueError("initial_step needs an integrable part with a closed form")
    y = _start_label(K, c)
    xi0 = float(sched.xi_j[0])
    dom0 = StripDomain.around(y, float(sched.r_j[0]), float(sched.r_j[0]), min(xi0, 1.0))
    P = jackson_smooth(P_raw, xi0, dom0, n_modes=c.n_modes, n_nodes=c.n_nodes)
    eps0 = _measure(P, float(sched.r_j[0]), float(sched.s_j[0]), y)
    band = active_band(P)
    kap = float(sched.kappa_j[0])
    kappa_eff = min(kap, band) if band > 0 else kap
    params, log_lines = step_params(c, sched, 0, eps0, kappa_eff, rho)
    h_out = min(float(sched.r_j[1]), params.r_bar / 2)
    return StepInput(K, P, params, y, h_out, sched, log_lines)


def _sample_H(K_raw, P_raw, torus: TorusEmbedding):
    v, u = torus.angle_samples[:, :torus.d], torus.angle_samples[:, torus.d:]
    Ki = as_integrable(K_raw)
    Kv = Ki.value(v) if Ki is not None else np.asarray(K_raw(v, u), dtype=float)
    return Kv + np.asarray(P_raw(v, u), dtype=float)


def _start_label(K: IntegrablePart, c: SchemeConfig) -> np.ndarray:
    if c.label is not None:
        return np.asarray(c.label, dtype=float)
    if c.omega is not None:
        return _label_for(K, c.omega)
    raise ValueError("config needs omega or label")


# ---------------------------------------------------------------------------
# the worked example
# ---------------------------------------------------------------------------

WORKED_OMEGA = (5.0, 5.0 * GOLDEN)
WORKED_MODES = ((1, 0), (1, 1))


def worked_example(amplitude: float = 1e-4, **overrides):
    """(K, P, config): |y|^2/2 + amplitude (cos x1 + cos(x1 + x2)) at omega = 5 (1, golden)."""
    K = quadratic_hamiltonian(np.eye(2), l=8.0)
    P = cosine_family(amplitude, WORKED_MODES, 2, 8.0)
    kw = dict(alpha=3.0, eps=float(P.cl_norm_estimate), omega=WORKED_OMEGA, tol=1e-100)
    kw.update(overrides)
    return K, P, SchemeConfig(**kw)
