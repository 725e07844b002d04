import numpy as np
import pytest

from kamtori.hamiltonian import TrigHamiltonian, worked_example
from kamtori.oracle import (FlowError, angle_distance, integrate_flow, invariance_defect,
                            isotropy_defect, symplectic_defect, symplectic_matrix)
from kamtori.scheme import TorusEmbedding

FREE = TrigHamiltonian.build(np.eye(2), np.zeros(2), [])
PENDULUM = TrigHamiltonian.build(np.eye(1), np.zeros(1), [((1,), 0.5, 0.0)])


def grid(n, d=2):
    g = 2 * np.pi * np.arange(n) / n
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)


def flat_torus(y_star, n=16, shift=0.0):
    y_star = np.asarray(y_star, dtype=float)
    X = grid(n, y_star.size)
    v = np.broadcast_to(y_star + shift, X.shape)
    return TorusEmbedding(y_star, y_star.copy(), n, np.concatenate([v, X], axis=1),
                          v.copy(), 0.5 * float(y_star @ y_star))


def graph_torus(y_star, S_grad, n=16):
    X = grid(n)
    v = y_star + S_grad(X)
    return TorusEmbedding(np.asarray(y_star), np.asarray(y_star), n,
                          np.concatenate([v, X], axis=1), v, 0.0)


# integrate_flow ---------------------------------------------------------------

def test_free_rotation():
    z0 = np.array([[1.0, 1.618, 0.3, 2.0]])
    tr = integrate_flow(FREE, z0, 10.0, 1e-2)
    z = tr.states[-1]
    assert np.allclose(z[:, :2], z0[:, :2], rtol=0, atol=1e-14)
    assert np.allclose(z[:, 2:], z0[:, 2:] + 10.0 * z0[:, :2], rtol=0, atol=1e-11)


def test_time_reversal():
    H = worked_example(0.1)
    z0 = np.array([[1.0, 0.6, 0.3, 2.0], [0.5, -0.2, 1.0, 4.0]])
    fwd = integrate_flow(H, z0, 10.0, 1e-3).states[-1]
    back = integrate_flow(H, fwd, -10.0, 1e-3).states[-1]
    assert np.abs(back - z0).max() <= 1e-9


def test_worked_example_energy_drift():
    H = worked_example(1e-4)
    rng = np.random.default_rng(0)
    z0 = np.concatenate([np.array([5.0, 3.09]) + rng.normal(0, 0.01, (4, 2)),
                         rng.uniform(0, 2 * np.pi, (4, 2))], axis=1)
    assert integrate_flow(H, z0, 100.0, 1e-3, record_every=10_000).energy_drift <= 1e-9


def test_rk4_order():
    # free rotation is integrated exactly, so the order is measured on a pendulum
    z0 = np.array([[0.3, 0.2]])
    ref = integrate_flow(PENDULUM, z0, 2.0, 1e-4).states[-1]
    e1 = np.abs(integrate_flow(PENDULUM, z0, 2.0, 0.1).states[-1] - ref).max()
    e2 = np.abs(integrate_flow(PENDULUM, z0, 2.0, 0.05).states[-1] - ref).max()
    assert 12 <= e1 / e2 <= 20


def test_nonpositive_step_rejected():
    with pytest.raises(ValueError):
        integrate_flow(FREE, np.zeros((1, 4)), 1.0, 0.0)


def test_escaping_trajectory_raises():
    with pytest.raises(FlowError):
        integrate_flow(FREE, np.array([[1e9, 0.0, 0.0, 0.0]]), 1.0, 0.5, bound=1e8)


def test_angle_distance_wraps():
    assert angle_distance(0.1, 2 * np.pi - 0.1) == pytest.approx(0.2)


# invariance_defect ------------------------------------------------------------

def test_unperturbed_torus_is_invariant():
    rep = invariance_defect(FREE, flat_torus([1.0, 1.618]), T=10.0, sample_count=8, dt=1e-2)
    assert rep.max_defect <= 1e-11


def test_injected_error_detected():
    rep = invariance_defect(FREE, flat_torus([1.0, 1.618], shift=1e-3), T=10.0,
                            sample_count=8, dt=1e-2)
    assert rep.max_defect >= 1e-3


@pytest.mark.parametrize("delta", [1e-5, 1e-4, 1e-3, 1e-2])
def test_detector_soundness(delta):
    rep = invariance_defect(FREE, flat_torus([1.0, 1.618], shift=delta), T=10.0,
                            sample_count=8, dt=1e-2)
    assert rep.max_defect >= delta / 2


def test_defect_non_decreasing_in_time(tmp_path):
    torus = flat_torus([1.0, 1.618], shift=1e-4)
    rep = invariance_defect(FREE, torus, T=10.0, sample_count=4, dt=1e-2)
    for a in range(4):
        series = [r[2] for r in rep.rows if r[0] == a]
        assert all(p <= q for p, q in zip(series, series[1:]))
    short = invariance_defect(FREE, torus, T=5.0, sample_count=4, dt=1e-2)
    assert short.max_defect <= rep.max_defect
    rep.write_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "sample,t,defect"


# symplectic_defect ------------------------------------------------------------

def test_identity_is_symplectic():
    assert symplectic_defect(np.broadcast_to(np.eye(4), (5, 4, 4))) == 0.0


def test_symmetric_shear_is_symplectic():
    A = np.array([[2.0, 0.3], [0.3, -1.0]])
    D = np.block([[np.eye(2), np.zeros((2, 2))], [A, np.eye(2)]])
    assert symplectic_defect(D[None]) == 0.0

    def shear(z):
        return np.concatenate([z[:, :2], z[:, 2:] + z[:, :2] @ A.T], axis=1)

    pts = np.random.default_rng(0).normal(size=(6, 4))
    assert symplectic_defect(shear, pts) <= 1e-9


def test_asymmetric_shear_is_not_symplectic():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    D = np.block([[np.eye(2), np.zeros((2, 2))], [A, np.eye(2)]])
    assert symplectic_defect(D[None]) == 1.0
    assert np.array_equal(symplectic_matrix(1), [[0.0, -1.0], [1.0, 0.0]])


# isotropy_defect --------------------------------------------------------------

def test_flat_torus_is_isotropic():
    assert isotropy_defect(flat_torus([1.0, 1.618])) == 0.0


def test_gradient_graph_is_isotropic():
    def dS(X):
        x1, x2 = X[:, 0], X[:, 1]
        return np.stack([0.1 * np.cos(x1) * np.cos(x2) - 0.1 * np.sin(2 * x1 + x2),
                         -0.1 * np.sin(x1) * np.sin(x2) - 0.05 * np.sin(2 * x1 + x2)], axis=1)

    assert isotropy_defect(graph_torus(np.array([1.0, 1.5]), dS)) <= 1e-14


def test_non_gradient_graph_is_detected():
    def rot(X):
        return 0.1 * np.stack([np.sin(X[:, 1]), np.zeros(len(X))], axis=1)

    assert isotropy_defect(graph_torus(np.array([1.0, 1.5]), rot)) >= 1e-2
