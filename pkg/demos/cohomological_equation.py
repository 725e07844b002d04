"""Solving omega . d_x g = -f for a random trigonometric polynomial."""

import math

import numpy as np

from kamtori.cohomology import (angle_domain, cohomological_bound_check, solve_cohomological,
                                truncated_residual)
from kamtori.frequencies import DiophantineSpec, check_diophantine
from kamtori.funcrep import from_coefficients

# A golden frequency vector and its Diophantine constant up to |k|_1 = 40
omega = np.array([1.0, (1 + math.sqrt(5)) / 2])
alpha = check_diophantine(DiophantineSpec(omega, 1e-6, 1.0, 40)).worst_value
print(f"alpha(omega) up to |k| = 40: {alpha:.4f}")

# A real zero-mean f with geometrically decaying modes, |k|_1 <= 20
rng = np.random.default_rng(1)
terms = {}
for k1 in range(-20, 21):
    for k2 in range(-20, 21):
        n = abs(k1) + abs(k2)
        if 0 < n <= 20 and (-k1, -k2) not in terms:
            c = complex(rng.normal(), rng.normal()) * math.exp(-0.35 * n)
            terms[(k1, k2)] = c
            terms[(-k1, -k2)] = c.conjugate()
f = from_coefficients(terms, angle_domain(2, 0.5), (64, 1))

g = solve_cohomological(f, omega, kappa=20)
print(f"truncated residual: {truncated_residual(g, f, omega, 20):.2e}")

# The explicit constant bounds g and its first derivatives on the shrunk strip
for sigma in (0.1, 0.2):
    for l in (0, 1):
        rep = cohomological_bound_check(f, g, alpha, 1.0, sigma, l)
        worst = max(c["lhs"] / c["rhs"] for c in rep.checks)
        print(f"sigma={sigma} l={l}: C_l={rep.constant:.3f}  max lhs/rhs={worst:.2e}")
