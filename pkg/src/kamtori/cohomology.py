"""Small-divisor equation omega(y) . d_x g = -(f - <f>) on truncated Fourier spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gamma, sqrt

import numpy as np

from .funcrep import GridFunction, StripDomain, derivative, mode_numbers, sup_norm

DIVISOR_FLOOR = 1e-14


class CohomologyError(ValueError):
    """Raised for inputs the solver refuses (nonzero mean, tiny divisor)."""

    def __init__(self, message, mode=None, node=None):
        super().__init__(message)
        self.mode = mode
        self.node = node


def cohomological_constant(d: int, tau: float, l: int) -> float:
    """C_l = 2^(d+1-(tau+l)) sqrt(Gamma(2(tau+l)+1))."""
    return 2.0 ** (d + 1 - (tau + l)) * sqrt(gamma(2 * (tau + l) + 1))


def _frequencies_at_nodes(f: GridFunction, omega_map) -> np.ndarray:
    """Frequencies at every action node, shape ``(M,)*d + (d,)``."""
    d, M = f.d, f.action_nodes
    if callable(omega_map):
        om = np.asarray(omega_map(f.node_points()))
    else:
        om = np.asarray(omega_map)
    if om.shape == (d,):
        om = np.broadcast_to(om, (M,) * d + (d,))
    if om.shape != (M,) * d + (d,):
        raise ValueError(f"frequency array has shape {om.shape}, expected {(M,) * d + (d,)}")
    return om


def divisors(f: GridFunction, omega_map) -> np.ndarray:
    """omega(y_node) . n for every node and mode, shape ``(M,)*d + (N,)*d``."""
    om = _frequencies_at_nodes(f, omega_map)
    ks = np.meshgrid(*f.modes, indexing="ij")
    d = f.d
    out = np.zeros(om.shape[:-1] + ks[0].shape, dtype=om.dtype)
    for i in range(d):
        out = out + om[..., i].reshape(om.shape[:-1] + (1,) * d) * ks[i]
    return out


def solve_cohomological(f: GridFunction, omega_map, kappa: float | None = None,
                        sigma: float | None = None, floor: float = DIVISOR_FLOOR,
                        sign: float = -1.0, mean_tol: float = 1e-12) -> GridFunction:
    """Return g with <g> = 0 and omega . d_x g = sign * (f - <f>) on 0 < |n|_1 <= kappa.

    The default ``sign = -1`` gives the generating-function modes
    g_n = -f_n / (i omega . n).  ``omega_map`` is a callable on action points,
    a fixed frequency vector, or an array of node frequencies.  The result lives
    on the angle strip ``s - sigma`` when ``sigma`` is given.
    """
    mean = f.mean()
    scale = max(float(np.abs(f.coeffs).max(initial=0.0)), 1e-300)
    if np.abs(mean).max(initial=0.0) > mean_tol * scale:
        raise CohomologyError("input has nonzero angle average")
    div = divisors(f, omega_map)
    k1 = f.abs_k1()
    band = (f.angle_modes - 1) // 2
    kap = band * f.d if kappa is None else kappa
    active = (k1 > 0) & (k1 <= kap)
    active = np.broadcast_to(active, div.shape)
    small = active & (np.abs(div) < floor * np.broadcast_to(k1, div.shape))
    if np.any(small):
        idx = np.argwhere(small)[0]
        d = f.d
        node = tuple(int(i) for i in idx[:d])
        n = tuple(int(mode_numbers(f.angle_modes)[i]) for i in idx[d:])
        raise CohomologyError(f"small divisor |omega.n| below floor at mode {n}, node {node}",
                              mode=n, node=node)
    g = np.zeros_like(f.coeffs)
    with np.errstate(divide="ignore", invalid="ignore"):
        g[active] = sign * f.coeffs[active] / (1j * div[active])
    dom = f.domain if sigma is None else f.domain.with_strips(s=f.domain.s - sigma)
    return GridFunction(dom, g, f.reality_flag and np.isrealobj(div))


def transport(g: GridFunction, omega_map) -> GridFunction:
    """omega(y) . d_x g computed in coefficient space."""
    div = divisors(g, omega_map)
    return GridFunction(g.domain, 1j * div * g.coeffs, g.reality_flag)


def truncated_residual(g: GridFunction, f: GridFunction, omega_map, kappa: float,
                       sign: float = -1.0) -> float:
    """max over nodes and 0 < |n|_1 <= kappa of |(omega . d_x g)_n - sign f_n|."""
    r = transport(g, omega_map).coeffs - sign * f.coeffs
    mask = np.broadcast_to((g.abs_k1() > 0) & (g.abs_k1() <= kappa), r.shape)
    return float(np.abs(r[mask]).max(initial=0.0))


@dataclass
class BoundReport:
    passes: bool
    constant: float
    checks: list = field(default_factory=list)


def cohomological_bound_check(f: GridFunction, g: GridFunction, alpha: float, tau: float,
                              sigma: float, l: int, s: float | None = None,
                              **norm_kw) -> BoundReport:
    """Check |d_x^k g|_{s-sigma} <= C_l |f|_s alpha^-1 sigma^-(tau+l) for all |k|_1 = l."""
    d = f.d
    s = f.domain.s if s is None else s
    C = cohomological_constant(d, tau, l)
    fn = sup_norm(f, s=s, **norm_kw).sup_norm
    bound = C * fn / alpha * sigma ** (-(tau + l))
    checks = []
    orders = [k for k in np.ndindex(*(l + 1,) * d) if sum(k) == l]
    for k in orders:
        gk = derivative(g, (0,) * d, k, max_order=max(l, 1)) if l else g
        val = sup_norm(gk, s=s - sigma, **norm_kw).sup_norm
        checks.append({"k": tuple(int(q) for q in k), "lhs": val, "rhs": bound,
                       "slack": bound - val})
    return BoundReport(all(c["lhs"] <= c["rhs"] for c in checks), C, checks)


def angle_domain(d: int, s: float) -> StripDomain:
    """A single-node action domain for functions of the angles only."""
    return StripDomain(np.zeros((d, 2)), 1.0, s)
