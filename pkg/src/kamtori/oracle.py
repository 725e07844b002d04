"""Independent checks of computed tori: direct flow integration and geometric defects."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class FlowError(RuntimeError):
    """The trajectory left the representable domain."""


def symplectic_matrix(d: int) -> np.ndarray:
    """J with dz/dt = J grad H for z = (y, x)."""
    Z, I = np.zeros((d, d)), np.eye(d)
    return np.block([[Z, -I], [I, Z]])


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, ..., 2d)
    energy_drift: float


def _rk4_step(f, z, h):
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_flow(H, z0, T: float, dt: float, record_every: int | None = None,
                   bound: float = 1e8) -> Trajectory:
    """Fixed-step RK4 for dy/dt = -H_x, dx/dt = H_y from z0 (..., 2d) up to time T.

    ``H`` provides ``vector_field(z)`` and ``value(y, x)``.  States are stored
    every ``record_every`` steps (default: start and end only).  Negative T
    integrates backwards.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.array(z0, dtype=float)
    d = z.shape[-1] // 2
    n = int(round(abs(T) / dt))
    h = np.sign(T) * dt if n else 0.0
    every = n if record_every is None or record_every <= 0 else record_every
    e0 = H.value(z[..., :d], z[..., d:])
    times, states = [0.0], [z.copy()]
    drift = 0.0
    for i in range(1, n + 1):
        z = _rk4_step(H.vector_field, z, h)
        if every and (i % every == 0 or i == n):
            if not np.all(np.isfinite(z)) or np.abs(z).max() > bound:
                raise FlowError(f"trajectory left the domain at t = {i * h:.6g}")
            times.append(i * h)
            states.append(z.copy())
            drift = max(drift, float(np.abs(H.value(z[..., :d], z[..., d:]) - e0).max()))
    if not np.all(np.isfinite(z)):
        raise FlowError("trajectory left the domain")
    return Trajectory(np.array(times), np.array(states), drift)


def angle_distance(a, b) -> np.ndarray:
    """Componentwise distance on the circle."""
    return np.abs(np.angle(np.exp(1j * (np.asarray(a) - np.asarray(b)))))


def phase_distance(z1, z2, d: int) -> np.ndarray:
    """max over components of |y1 - y2| and the angle distance of x1, x2."""
    dy = np.abs(z1[..., :d] - z2[..., :d])
    dx = angle_distance(z1[..., d:], z2[..., d:])
    return np.maximum(dy.max(axis=-1), dx.max(axis=-1))


@dataclass
class DefectReport:
    max_defect: float
    rows: list = field(default_factory=list)  # (sample, t, defect)
    energy_drift: float = 0.0

    def write_csv(self, path) -> None:
        write_defects_csv(self.rows, path)


def invariance_defect(H, torus, T: float = 100.0, sample_count: int = 32, dt: float = 1e-3,
                      n_checkpoints: int = 10, seed: int = 0, x0=None) -> DefectReport:
    """max over samples and checkpoint times t <= T of |flow_t(phi(x)) - phi(x + omega t)|.

    The reported defect at each checkpoint is the running maximum, so it is
    non-decreasing in t.
    """
    d = torus.d
    if x0 is None:
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(0.0, 2 * np.pi, size=(sample_count, d))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v, u = torus.embed(x0)
    z0 = np.concatenate([v, u], axis=1)
    n = int(round(T / dt))
    every = max(1, n // max(1, n_checkpoints))
    traj = integrate_flow(H, z0, T, dt, record_every=every)
    rows = []
    running = np.zeros(x0.shape[0])
    for t, z in zip(traj.times, traj.states):
        vt, ut = torus.embed(x0 + torus.omega_star * t)
        ref = np.concatenate([vt, ut], axis=1)
        running = np.maximum(running, phase_distance(z, ref, d))
        rows.extend((int(a), float(t), float(running[a])) for a in range(x0.shape[0]))
    return DefectReport(float(running.max(initial=0.0)), rows, traj.energy_drift)


def fd_jacobian(f, z, h: float = 1e-5) -> tuple[np.ndarray, float]:
    """Central-difference Jacobian of f: (Q, n) -> (Q, n), Richardson-extrapolated.

    Returns the Jacobians and the difference between the step-h and
    extrapolated estimates (an error indicator).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[1]

    def central(step):
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            cols.append((np.asarray(f(z + e)) - np.asarray(f(z - e))) / (2 * step))
        return np.stack(cols, axis=-1)

    J1 = central(h)
    J2 = central(h / 2)
    J = (4 * J2 - J1) / 3
    return J, float(np.abs(J - J2).max(initial=0.0))


def symplectic_defect(sampler, grid=None, h: float = 1e-5) -> float:
    """max over the grid of |D^T J D - J| (entrywise max).

    ``sampler`` is an array of Jacobians (..., 2d, 2d), an object with a
    ``jacobian(y, x)`` method (``grid`` = (y, x)), or a callable map on stacked
    points (``grid`` of shape (Q, 2d)), differentiated numerically.
    """
    if isinstance(sampler, np.ndarray):
        D = sampler
    elif hasattr(sampler, "jacobian"):
        y, x = grid
        D = sampler.jacobian(y, x)
    else:
        D, _ = fd_jacobian(sampler, grid, h)
    D = np.asarray(D)
    n = D.shape[-1]
    J = symplectic_matrix(n // 2)
    E = np.swapaxes(D, -1, -2) @ J @ D - J
    return float(np.abs(E).max(initial=0.0))


def isotropy_defect(torus) -> float:
    """max over the angle grid of the antisymmetric part of (d_x u)^T d_x v (spectral norm)."""
    Dv, Du = torus.angle_jacobians()
    M = np.swapaxes(Du, -1, -2) @ Dv
    A = 0.5 * (M - np.swapaxes(M, -1, -2))
    return float(np.linalg.norm(A, ord=2, axis=(-2, -1)).max(initial=0.0))


def write_defects_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", "defect"])
        for a, t, dfc in rows:
            w.writerow([a, repr(float(t)), repr(float(dfc))])
