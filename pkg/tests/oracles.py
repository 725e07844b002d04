"""Independent reference computations shared by the tests (no kamtori imports)."""

import math

import numpy as np


def worst_value_double_loop(omega, tau, cutoff):
    """min over 0 < |k|_1 <= cutoff of |omega.k| |k|_1^tau, d = 2, plain Python loops."""
    w1, w2 = float(omega[0]), float(omega[1])
    best = math.inf
    for k1 in range(-cutoff, cutoff + 1):
        rest = cutoff - abs(k1)
        for k2 in range(-rest, rest + 1):
            if k1 == 0 and k2 == 0:
                continue
            n = abs(k1) + abs(k2)
            v = abs(k1 * w1 + k2 * w2) * n ** tau
            if v < best:
                best = v
    return best


def nonresonant_fraction_mc(box, alpha, tau, cutoff, samples, seed):
    """Monte-Carlo fraction of identity-frequency points passing the divisor test."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    Y = lo + (hi - lo) * rng.random((samples, 2))
    ok = np.ones(samples, dtype=bool)
    for k1 in range(0, cutoff + 1):
        for k2 in range(-(cutoff - k1), cutoff - k1 + 1):
            if k1 == 0 and k2 <= 0:
                continue
            n = k1 + abs(k2)
            ok &= np.abs(k1 * Y[:, 0] + k2 * Y[:, 1]) * n ** tau >= alpha
    p = ok.mean()
    return p, math.sqrt(p * (1 - p) / samples)


def schedule_rows(alpha, eps, tau, l, K, T, C1, C2, n):
    """Sequences of the iteration schedule by direct formula, one dict per j."""
    nu = tau + 1
    eta = T * K
    sigma = (eps ** 1.5 / (eta ** (2 * l / nu) * alpha * math.sqrt(K))) ** (1 / (l + nu))
    rho = 2 * C1 * K * eps / (alpha ** 2 * sigma ** (2 * nu))
    lam = math.log(1 / rho)
    xi = 1 / (C2 * eta ** (1 / nu) * lam)
    s0 = sigma / C2
    r0 = alpha * s0 ** nu / (2 * K)
    rows = []
    for j in range(n):
        sj = s0 * xi ** j
        rows.append({"sigma": sj, "s": 4 * sj, "r": r0 * xi ** (nu * j), "kappa": 6 * lam / sj})
    return {"sigma": sigma, "rho": rho, "xi": xi, "lam": lam, "rows": rows}


def cohomological_constant(d, tau, l):
    return 2 ** (d + 1 - (tau + l)) * math.sqrt(math.gamma(2 * (tau + l) + 1))


def random_zero_mean_terms(rng, max_l1=20, decay=0.35, d=2):
    """Real zero-mean trigonometric polynomial {k: c_k} with 0 < |k|_1 <= max_l1."""
    terms = {}
    for k in np.ndindex(*([2 * max_l1 + 1] * d)):
        k = tuple(q - max_l1 for q in k)
        n = sum(abs(q) for q in k)
        if n == 0 or n > max_l1 or k in terms:
            continue
        c = complex(rng.normal(), rng.normal()) * math.exp(-decay * n)
        terms[k] = c
        terms[tuple(-q for q in k)] = c.conjugate()
    return terms
