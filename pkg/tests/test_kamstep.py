import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamtori.funcrep import StripDomain, derivative, evaluate, from_callable, from_coefficients, sup_norm
from kamtori.hamiltonian import IntegrablePart, QuadraticBase
from kamtori.kamstep import (GeneratingFunction, GeneratingMap, StepConditionError, StepParams,
                             build_generating_function, eval_shared, invert_angle_map, kam_step,
                             truncate_perturbation, update_frequency_map)
from kamtori.oracle import symplectic_defect

K0 = IntegrablePart(QuadraticBase.identity(2))
DOM = StripDomain([[0.5, 1.5], [1.0, 2.0]], 0.1, 0.5)
EPS = 1e-4


def cos_terms(amp, modes):
    out = {}
    for k in modes:
        out[tuple(k)] = out.get(tuple(k), 0) + amp / 2
        out[tuple(-q for q in k)] = out.get(tuple(-q for q in k), 0) + amp / 2
    return out


def grid(n, d=2):
    g = 2 * np.pi * np.arange(n) / n
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)


def params(**kw):
    base = dict(r=0.01, s=0.8, sigma=0.2, sigma_bar=0.2, alpha=3.0, tau=1.2, K_bound=1.0,
                T_bound=1.0, rho=0.1)
    base.update(kw)
    return StepParams(**base)


# truncate_perturbation --------------------------------------------------------

def test_in_band_perturbation_has_no_remainder():
    P = from_coefficients(cos_terms(1.0, [(1, 0), (2, -1), (0, 3)]), DOM, (16, 2))
    P_hat, P3 = truncate_perturbation(P, 3)
    assert P3.is_zero()
    assert np.array_equal(P_hat.coeffs, P.coeffs)


def test_single_out_of_band_mode():
    kappa = 5
    P = from_coefficients(cos_terms(1.0, [(kappa + 1, 0)]), DOM, (16, 2))
    P_hat, P3 = truncate_perturbation(P, kappa)
    assert P_hat.is_zero()
    assert np.array_equal(P3.coeffs, P.coeffs)


def test_mean_is_kept_in_truncation():
    terms = cos_terms(1.0, [(4, 0)])
    terms[(0, 0)] = 2.0
    P_hat, P3 = truncate_perturbation(from_coefficients(terms, DOM, (16, 2)), 2)
    assert P_hat.mean()[0, 0] == 2.0
    assert P3.mean()[0, 0] == 0.0


def test_kappa_below_one_rejected():
    with pytest.raises(ValueError):
        truncate_perturbation(from_coefficients({}, DOM, (8, 2)), 0.5)


def test_exponential_tail_within_remainder_bound(step0):
    p = step0[1].params
    terms = {}
    for k in np.ndindex(81, 81):
        n = (k[0] - 40, k[1] - 40)
        if 0 < abs(n[0]) + abs(n[1]) <= 40:
            terms[n] = 0.5 * math.exp(-(abs(n[0]) + abs(n[1])))
    dom = StripDomain([[1.0, 2.0], [1.0, 2.0]], 0.01, p.s)
    P = from_coefficients(terms, dom, (96, 1))
    _, P3 = truncate_perturbation(P, 20, p.rho)
    lhs = sup_norm(P3, s=p.s_bar).sup_norm
    rhs = 2 * p.rho * sup_norm(P, s=p.s).sup_norm
    assert 0 < lhs <= rhs


# build_generating_function ----------------------------------------------------

def test_single_cosine_closed_form():
    P = from_coefficients(cos_terms(EPS, [(1, 0)]), DOM, (16, 4))
    # kappa = 1 keeps the node grid away from resonances of the empty modes
    g = build_generating_function(P, K0, 1)
    Y = P.node_points().reshape(-1, 2)
    X = grid(8)
    y = np.repeat(Y, len(X), 0)
    x = np.tile(X, (len(Y), 1))
    assert np.allclose(evaluate(g, y, x), -EPS * np.sin(x[:, 0]) / y[:, 0], rtol=0, atol=1e-18)
    # frequency derivative along the flow of K cancels P
    Dg = y[:, 0] * evaluate(derivative(g, (0, 0), (1, 0)), y, x) \
        + y[:, 1] * evaluate(derivative(g, (0, 0), (0, 1)), y, x)
    assert np.allclose(Dg, -EPS * np.cos(x[:, 0]), rtol=0, atol=1e-18)


def test_mean_only_input_gives_zero():
    P = from_coefficients({(0, 0): 3.0}, DOM, (16, 4))
    assert build_generating_function(P, K0, 5).is_zero()


def test_scheduled_generating_function_bounds(step0):
    graf = [c for c in step0[1].conditions if c["name"] == "GrafCNu"]
    assert len(graf) == 3
    assert all(c["passes"] for c in graf)


# invert_angle_map -------------------------------------------------------------

def test_zero_generating_function_gives_identity():
    gen = GeneratingFunction(from_coefficients({}, DOM, (16, 4)), K0, 5)
    phi = invert_angle_map(gen)
    X = grid(8)
    assert np.array_equal(phi.angles(np.array([[1.0, 1.5]]), X)[0], X)


def test_affine_angle_map_needs_one_newton_step():
    N = 8
    c = np.array([0.3, -0.2])
    gy = np.zeros((2, N, N), complex)
    gy[:, 0, 0] = c
    tabs = {"gy": gy, "gyx": np.zeros((2, 2, N, N), complex)}
    gen = GeneratingFunction(from_coefficients({}, DOM, (N, 2)), K0, 3)
    # with two iterations the second may only confirm the first
    phi = GeneratingMap(gen, maxiter=2)
    X = grid(8)
    x, res = phi._solve(tabs, X)
    assert res == 0.0
    assert np.allclose(x, X - c, rtol=0, atol=1e-15)


def test_scheduled_round_trip(step0):
    inp, res = step0
    phi = res.phi_prime
    X = grid(64)
    tabs = phi._tables_at(inp.label, 1)
    Xp = X + eval_shared(tabs["gy"], X).real
    back = phi.angles(inp.label[None, :], Xp)[0]
    assert np.abs(back - X).max() <= 1e-12


# update_frequency_map ---------------------------------------------------------

def test_zero_correction_gives_identity():
    Kt = from_coefficients({}, DOM, (8, 4))
    upd = update_frequency_map(K0, Kt, 0.05, 0.005, label=[1.0, 1.5])
    y = np.array([[1.0, 1.5], [1.02, 1.49]])
    assert np.array_equal(upd.G(y), y)
    assert upd.norms["T_tilde"] == 0.0
    assert upd.K_prime is K0


def test_linear_correction_gives_shift():
    cst = 1e-3
    Kt = from_callable(lambda y, x: cst * y[..., 0] + 0 * x[..., 0], DOM, n_modes=4, n_nodes=4)
    upd = update_frequency_map(K0, Kt, 0.05, 0.005, label=[1.0, 1.5])
    y = np.array([[1.0, 1.5], [1.02, 1.49], [0.97, 1.53]])
    assert np.allclose(upd.G(y), y - [cst, 0.0], rtol=0, atol=1e-12)
    assert all(c["passes"] for c in upd.conditions)


def test_scheduled_frequency_conjugacy(worked_run):
    for st_ in worked_run.steps[1:]:
        lab = st_.label
        ys = lab + st_.params.r_tilde * np.stack(np.meshgrid(*([np.linspace(-1, 1, 5)] * 2),
                                                             indexing="ij"), -1).reshape(-1, 2)
        assert st_.G.defect(ys) <= 1e-10
        assert st_.norms["conjugacy_defect"] <= 1e-10


# kam_step ---------------------------------------------------------------------

def test_zero_perturbation_identity_step(step0):
    p = step0[1].params
    P = from_coefficients({}, DOM.with_strips(s=1.0), (16, 4))
    res = kam_step(K0, P, p, label=np.array([1.0, 1.5]))
    X = grid(8)
    ys, xs = res.phi_prime.forward(np.array([[1.0, 1.5]]), X)
    assert np.array_equal(xs[0], X) and np.all(ys == [1.0, 1.5])
    assert res.K_prime is K0
    assert res.P_prime.is_zero()


def test_worked_step_contracts(step0):
    res = step0[1]
    p = res.params
    assert p.rho <= 0.25
    assert res.norms["P_prime"] / res.norms["P"] <= p.C1 * p.rho
    assert res.passes


def test_quadratic_contraction_slope(contraction):
    e = np.log([c[1] for c in contraction])
    q = np.log([c[2] for c in contraction])
    assert 1.8 <= np.polyfit(e, q, 1)[0] <= 2.2
    assert "forced past" in contraction[0][4][0]


def test_step_refuses_oversized_perturbation(step0):
    inp = step0[0]
    big = from_coefficients(cos_terms(1e-1, [(1, 0)]), inp.P.domain, (inp.P.angle_modes,
                                                                      inp.P.action_nodes))
    with pytest.raises(StepConditionError) as err:
        kam_step(inp.K, big, inp.params.__class__(**{**_fields(inp.params), "eps": None}),
                 label=inp.label)
    assert err.value.condition["name"] == "DefNArnExt1v501"
    assert err.value.condition["slack"] < 0


def _fields(p):
    return {k: getattr(p, k) for k in p.__dataclass_fields__}


def test_report_is_json(step0):
    rep = json.loads(step0[1].to_json())
    assert {"params", "norms", "conditions", "domains", "log"} <= set(rep)
    for c in rep["conditions"]:
        assert c["slack"] == pytest.approx(c["rhs"] - c["lhs"])


# invariants -------------------------------------------------------------------

def test_decomposition_is_exact(step0):
    inp, res = step0
    dom = res.P_prime.domain
    Y = np.stack(np.meshgrid(*[np.linspace(lo, hi, 4) for lo, hi in dom.box], indexing="ij"),
                 -1).reshape(-1, 2)
    X = grid(16)
    ys, xs = res.phi_prime.forward(Y, X)
    ys, xs = ys.reshape(-1, 2), xs.reshape(-1, 2)
    H = inp.K.value(ys) + evaluate(inp.P, ys, xs, check_domain=False)
    rhs = np.repeat(res.K_prime.value(Y), len(X)) \
        + evaluate(res.P_prime, np.repeat(Y, len(X), 0), np.tile(X, (len(Y), 1)))
    assert np.abs(H - rhs).max() <= 1e-10 * (1 + np.abs(H).max())


def test_step_map_is_symplectic(step0):
    inp, res = step0
    Y = res.new_label + np.array([[0.0, 0.0], [1e-3, -1e-3]]) * res.params.r_bar
    assert symplectic_defect(res.phi_prime, (Y, grid(8))) <= 1e-8


def test_cohomological_cancellation(step0):
    inp, res = step0
    gen = res.phi_prime.gen
    Y = inp.P.node_points().reshape(-1, 2)
    g = gen.tables(Y, 0)["g"]
    D = gen._contract(inp.K.grad(Y))
    P_hat, _ = truncate_perturbation(inp.P, res.params.kappa)
    Pn = P_hat.coeffs.reshape((len(Y),) + g.shape[1:])
    resid = np.where(gen.active, 1j * D * g + Pn, 0.0)
    assert np.abs(resid).max() <= 1e-15 * np.abs(Pn).max()


def test_mean_extraction(worked_run):
    for st_ in worked_run.steps:
        P = st_.P
        c = st_.K_tilde.coeffs
        assert np.array_equal(c[:, :, 0, 0], P.coeffs[:, :, 0, 0])
        c = c.copy()
        c[:, :, 0, 0] = 0
        assert not np.any(c)


# StepParams -------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(sigma=0.5), dict(s=1.2), dict(sigma_bar=1.5), dict(rho=1.0),
                                dict(tau=0.5), dict(alpha=0.0), dict(rho=0.999999)])
def test_step_params_invariants(kw):
    with pytest.raises(ValueError):
        params(**kw)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1e-1), st.floats(0.3, 1.0), st.floats(0.05, 0.14), st.floats(0.5, 5.0),
       st.floats(1.0, 2.0), st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(1e-6, 0.25),
       st.floats(1e-12, 1e-3))
def test_derived_scalars_match_formulas(r, s, sigma, alpha, tau, K, T, rho, eps):
    p = params(r=r, s=s, sigma=sigma, alpha=alpha, tau=tau, K_bound=K, T_bound=T, rho=rho,
               eps=eps)
    d = 2
    assert p.eta == T * K
    assert p.lam == math.log(1 / rho)
    assert p.kappa == 6 * p.lam / sigma
    assert p.r_check == r / (32 * d * T * K)
    assert p.r_bar == min(alpha / (2 * d * K * p.kappa ** (tau + 1)), p.r_check)
    assert p.r_tilde == p.r_check * p.sigma_bar / (16 * d * T * K)
    assert p.s_bar == s - 2 * sigma / 3
    assert p.s_prime == s - sigma
    assert p.L == p.C0 * p.eta * T * eps / (r * p.r_tilde)
