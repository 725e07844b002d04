"""Diophantine conditions, non-resonant action sets and resonance measures.

Everything here is verified only up to a finite cutoff on |k|_1: a vector
reported as Diophantine is Diophantine *up to cutoff*, so the non-resonant
sets computed below are supersets of the true ones.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class DiophantineSpec:
    omega: np.ndarray
    alpha: float
    tau: float
    cutoff: int = 200

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "omega", omega)
        d = omega.size
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if d < 2:
            raise ValueError("frequency vectors need d >= 2")
        if self.tau < d - 1:
            raise ValueError(f"tau must be >= d-1 = {d - 1}")
        if int(self.cutoff) < 1:
            raise ValueError("cutoff must be >= 1")

    @property
    def nu(self) -> float:
        return self.tau + 1


@dataclass(frozen=True)
class ResonanceReport:
    worst_k: tuple
    worst_value: float
    passes: bool
    cutoff: int
    note: str = "verified up to cutoff only"


def _integer_vectors(d: int, cutoff: int) -> np.ndarray:
    """All nonzero k with |k|_1 <= cutoff and first nonzero entry positive."""
    out = []
    rng = range(-cutoff, cutoff + 1)
    if d == 1:
        return np.arange(1, cutoff + 1)[:, None]
    for head in itertools.product(rng, repeat=d - 1):
        rest = cutoff - sum(abs(h) for h in head)
        if rest < 0:
            continue
        tail = np.arange(-rest, rest + 1)
        block = np.column_stack([np.tile(head, (tail.size, 1)), tail])
        out.append(block)
    ks = np.vstack(out)
    nz = ks != 0
    first = np.argmax(nz, axis=1)
    lead = ks[np.arange(ks.shape[0]), first]
    keep = nz.any(axis=1) & (lead > 0)
    return ks[keep]


def _worst_bruteforce(omega: np.ndarray, tau: float, cutoff: int):
    ks = _integer_vectors(omega.size, cutoff)
    vals = np.abs(ks @ omega) * np.abs(ks).sum(axis=1) ** tau
    i = int(np.argmin(vals))
    return float(vals[i]), tuple(int(v) for v in ks[i])


def worst_values(omegas: np.ndarray, tau: float, cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    """min_{0<|k|_1<=cutoff} |omega.k| |k|_1^tau for many frequency vectors.

    The coordinate with the largest |omega_i| is eliminated: along each line
    of k with the other coordinates fixed only the two integers bracketing the
    real minimiser can beat |omega_i|, so the search is exact whenever the
    result is below max|omega_i| and falls back to brute force otherwise.

    Returns ``(values, worst_k)`` with shapes ``(P,)`` and ``(P, d)``.
    """
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    P, d = omegas.shape
    vals = np.full(P, np.inf)
    best_k = np.zeros((P, d), dtype=int)
    piv = np.argmax(np.abs(omegas), axis=1)
    for p_idx in np.unique(piv):
        rows = np.nonzero(piv == p_idx)[0]
        W = omegas[rows]
        others = [i for i in range(d) if i != p_idx]
        heads = _integer_vectors(d - 1, cutoff) if d > 1 else np.zeros((0, 0), int)
        # heads cover one half-space; the pivot coordinate carries the sign
        for h in _chunks(np.vstack([heads, -heads]) if d > 1 else heads, 4096):
            hn = np.abs(h).sum(axis=1)
            proj = W[:, others] @ h.T  # (P, H)
            wp = W[:, p_idx][:, None]
            kstar = -proj / wp
            for kp in (np.floor(kstar), np.ceil(kstar)):
                tot = hn[None, :] + np.abs(kp)
                ok = tot <= cutoff
                v = np.abs(proj + wp * kp) * np.where(ok, tot, 1.0) ** tau
                v = np.where(ok, v, np.inf)
                j = np.argmin(v, axis=1)
                vj = v[np.arange(len(rows)), j]
                better = vj < vals[rows]
                if np.any(better):
                    rb = rows[better]
                    vals[rb] = vj[better]
                    kk = np.zeros((better.sum(), d), dtype=int)
                    kk[:, others] = h[j[better]]
                    kk[:, p_idx] = kp[better, j[better]].astype(int)
                    best_k[rb] = kk
        # pure pivot-axis vectors k = (0,..,m,..,0)
        vp = np.abs(W[:, p_idx])
        better = vp < vals[rows]
        if np.any(better):
            vals[rows[better]] = vp[better]
            kk = np.zeros((better.sum(), d), dtype=int)
            kk[:, p_idx] = 1
            best_k[rows[better]] = kk
    unsure = vals >= np.abs(omegas).max(axis=1)
    for p in np.nonzero(unsure)[0]:
        vals[p], k = _worst_bruteforce(omegas[p], tau, cutoff)
        best_k[p] = k
    return vals, best_k


def _chunks(a: np.ndarray, n: int):
    for lo in range(0, a.shape[0], n):
        yield a[lo:lo + n]


def check_diophantine(spec: DiophantineSpec) -> ResonanceReport:
    vals, ks = worst_values(spec.omega[None, :], spec.tau, int(spec.cutoff))
    k = ks[0]
    # canonical sign: first nonzero entry positive
    nz = np.nonzero(k)[0]
    if nz.size and k[nz[0]] < 0:
        k = -k
    return ResonanceReport(worst_k=tuple(int(v) for v in k), worst_value=float(vals[0]),
                           passes=bool(vals[0] >= spec.alpha), cutoff=int(spec.cutoff))


def diophantine_margin(alpha: float, l: float, nu: float) -> float:
    """alpha_* = alpha^(1/(l - 2 nu)), the distance kept from the box boundary."""
    if l <= 2 * nu:
        raise ValueError("need l > 2 nu")
    return alpha ** (1.0 / (l - 2 * nu))


@dataclass(frozen=True)
class NonResonantSet:
    grid: list[np.ndarray]
    indicator: np.ndarray
    inner: np.ndarray
    worst: np.ndarray
    alpha: float
    tau: float
    cutoff: int
    margin: float
    note: str = "superset of the true set: resonances beyond cutoff are not checked"

    @property
    def fraction(self) -> float:
        return float(self.indicator.mean())


def build_nonresonant_set(Kmap: Callable[[np.ndarray], np.ndarray], box, alpha: float,
                          tau: float, grid_resolution: int | tuple, cutoff: int = 200,
                          l: float | None = None, nu: float | None = None,
                          margin: float | None = None) -> NonResonantSet:
    """Sampled indicator of {y in D' : K_y(y) is (alpha, tau)-Diophantine up to cutoff}.

    ``Kmap`` maps action points (..., d) to frequencies (..., d).  The inner
    set D' keeps a sup-norm distance ``margin`` (default alpha_* from ``l`` and
    ``nu = tau + 1``) from the boundary of ``box``.
    """
    box = np.atleast_2d(np.asarray(box, dtype=float))
    d = box.shape[0]
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("degenerate action box")
    if margin is None:
        margin = diophantine_margin(alpha, l, tau + 1 if nu is None else nu) if l is not None else 0.0
    res = np.broadcast_to(np.atleast_1d(grid_resolution), (d,))
    grid = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(box, res)]
    Y = np.stack(np.meshgrid(*grid, indexing="ij"), axis=-1)
    inner = np.all((Y - box[:, 0] >= margin) & (box[:, 1] - Y >= margin), axis=-1)
    worst = np.full(inner.shape, np.nan)
    if np.any(inner):
        om = np.asarray(Kmap(Y[inner]), dtype=float)
        worst[inner], _ = worst_values(om, tau, cutoff)
    indicator = inner & (np.nan_to_num(worst, nan=-1.0) >= alpha)
    return NonResonantSet(grid, indicator, inner, worst, alpha, tau, cutoff, margin)


@dataclass(frozen=True)
class MeasureTable:
    rows: list[dict]
    slope: float | None
    box: np.ndarray

    def write_csv(self, path) -> None:
        cols = ["alpha", "complement_measure", "stderr", "samples", "cutoff", "seed"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({c: (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols})


def resonant_measure(box, alpha_list, tau: float, cutoff: int, samples: int, seed: int = 0,
                     Kmap: Callable | None = None, margin: float = 0.0) -> MeasureTable:
    """Monte-Carlo estimate of meas(D' minus D_alpha) for each alpha.

    A single seeded sample set is shared by all alphas, which keeps the
    estimates nested (monotone in alpha).  The log-log slope against alpha is
    fitted when at least two alphas give a positive measure.
    """
    if samples < 10_000:
        raise ValueError("resonant_measure needs at least 1e4 samples")
    box = np.atleast_2d(np.asarray(box, dtype=float))
    inner_box = box + np.array([margin, -margin])
    if np.any(inner_box[:, 1] <= inner_box[:, 0]):
        raise ValueError("margin leaves an empty inner box")
    rng = np.random.default_rng(seed)
    lo, hi = inner_box[:, 0], inner_box[:, 1]
    Y = lo + (hi - lo) * rng.random((samples, box.shape[0]))
    om = Y if Kmap is None else np.asarray(Kmap(Y), dtype=float)
    worst, _ = worst_values(om, tau, cutoff)
    vol = float(np.prod(hi - lo))
    rows = []
    for a in alpha_list:
        p = float(np.mean(worst < a))
        rows.append({"alpha": float(a), "complement_measure": vol * p,
                     "stderr": vol * float(np.sqrt(p * (1 - p) / samples)),
                     "samples": int(samples), "cutoff": int(cutoff), "seed": int(seed)})
    good = [r for r in rows if r["complement_measure"] > 0]
    slope = None
    if len(good) >= 2:
        slope = float(np.polyfit(np.log([r["alpha"] for r in good]),
                                 np.log([r["complement_measure"] for r in good]), 1)[0])
    return MeasureTable(rows, slope, box)
