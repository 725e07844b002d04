"""One KAM step on |y|^2/2 + eps (cos x1 + cos(x1 + x2)) and its quadratic contraction."""

from dataclasses import replace

import numpy as np

from kamtori.kamstep import kam_step
from kamtori.scheme import initial_step, worked_example
from kamtori.smoothing import cosine_family

K, P, cfg = worked_example(1e-4)
inp = initial_step(K, P, cfg)
p = inp.params
print(f"sigma={p.sigma:.4f} s={p.s:.4f} r={p.r:.3e} rho={p.rho:.4f} kappa={p.kappa:.1f}")

res = kam_step(inp.K, inp.P, inp.params, label=inp.label, out_halfwidth=inp.out_halfwidth,
               out_nodes=cfg.n_nodes)
print(f"|P| = {res.norms['P']:.3e}  ->  |P'| = {res.norms['P_prime']:.3e}")
print(f"ratio {res.norms['P_prime'] / res.norms['P']:.2e} vs C1 rho = {p.C1 * p.rho:.3f}")

# every hypothesis and estimate is a named record with its slack
for c in res.conditions:
    print(f"  {c['name']:<22} {'ok ' if c['passes'] else 'BAD'} slack {c['slack']: .2e}  "
          f"{c.get('note', '')}")

# Same geometry, three amplitudes: |P'| scales like |P|^2
pts = []
for a in (1e-3, 1e-4, 1e-5):
    step = initial_step(K, cosine_family(a, ((1, 0), (1, 1)), 2, 8.0), cfg)
    r = kam_step(inp.K, step.P, replace(p, eps=step.params.eps), label=inp.label,
                 out_halfwidth=inp.out_halfwidth, out_nodes=cfg.n_nodes, force=True)
    pts.append((r.norms["P"], r.norms["P_prime"]))
    print(f"amplitude {a:.0e}: |P| {pts[-1][0]:.3e}  |P'| {pts[-1][1]:.3e}  {r.log}")
slope = np.polyfit(*np.log(np.array(pts)).T, 1)[0]
print(f"log-log slope {slope:.4f}")
