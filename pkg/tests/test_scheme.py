from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamtori.hamiltonian import QuadraticBase
from kamtori.scheme import (SchemeConditionError, SchemeConfig, check_smallness, compose_maps,
                            frequency_anchor, make_schedule, run)
from kamtori.smoothing import cosine_family
from oracles import schedule_rows


def grid(n, d=2):
    g = 2 * np.pi * np.arange(n) / n
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)


# make_schedule ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.floats(1e-12, 1e-6), st.floats(0.5, 4.0))
def test_schedule_identities(eps, alpha):
    cfg = SchemeConfig(alpha=alpha, eps=eps)
    s = make_schedule(cfg, 12)
    j = np.arange(12)
    assert 0 < s.xi < 1
    assert np.all(s.s_j == 4 * s.sigma_j)
    assert np.allclose(s.sigma_j, s.sigma0 * s.xi ** j, rtol=1e-14, atol=0)
    assert np.allclose(s.r_j[1:] / s.r_j[:-1], s.xi ** cfg.nu, rtol=1e-13, atol=0)
    assert np.allclose(s.kappa_j, 6 * s.lam / s.sigma_j, rtol=1e-15, atol=0)
    assert np.all(np.diff(s.sigma_j) < 0) and np.all(np.diff(s.r_j) < 0)


@pytest.mark.parametrize("eps", [1e-6, 1e-8, 1e-10, 1e-12])
def test_schedule_matches_direct_formulas(eps):
    cfg = SchemeConfig(alpha=3.0, eps=eps)
    s = make_schedule(cfg, 10)
    ref = schedule_rows(3.0, eps, 1.2, 8.0, 1.0, 1.0, cfg.C1, cfg.C2, 10)
    assert cfg.sigma == pytest.approx(ref["sigma"], rel=1e-12)
    assert cfg.rho == pytest.approx(ref["rho"], rel=1e-12)
    assert s.xi == pytest.approx(ref["xi"], rel=1e-12)
    for j, row in enumerate(ref["rows"]):
        assert s.sigma_j[j] == pytest.approx(row["sigma"], rel=1e-12)
        assert s.s_j[j] == pytest.approx(row["s"], rel=1e-12)
        assert s.r_j[j] == pytest.approx(row["r"], rel=1e-12)
        assert s.kappa_j[j] == pytest.approx(row["kappa"], rel=1e-12)


def test_fitness_relations_reported_per_step():
    s = make_schedule(SchemeConfig(alpha=3.0, eps=1e-6), 6)
    names = {f["name"] for f in s.fitness}
    assert {"FitnessEq1", "FitnessEq2", "FitnessEq3"} <= names
    assert {f["j"] for f in s.fitness if f["name"] == "FitnessEq1"} == set(range(1, 6))


@pytest.mark.parametrize("kw", [dict(l=4.0), dict(tau=0.5), dict(m=5.0), dict(m_hat=1.0),
                                dict(alpha=0.0), dict(eps=-1.0),
                                dict(omega=(1.0, 2.0), label=(1.0, 1.0))])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        SchemeConfig(**{"alpha": 1.0, "eps": 1e-6, **kw})


# check_smallness --------------------------------------------------------------

def test_zero_perturbation_passes_everything():
    rep = check_smallness(SchemeConfig(alpha=1.0, eps=0.0))
    assert rep.passes
    assert all(c["slack"] >= 0 for c in rep.conditions)


def test_alpha_above_bound_fails_by_name():
    cfg = SchemeConfig(alpha=4.5, eps=1e-8, C3=0.25, K_bound=1.0)
    rep = check_smallness(cfg)
    assert not rep.passes
    assert rep.first_failure()["name"] == "SmaLConD"
    assert rep.first_failure()["note"] == "alpha <= K / C3"


def test_rho_exactly_quarter_passes_with_zero_slack():
    base = SchemeConfig(alpha=3.0, eps=1e-6)
    C1 = 0.25 * base.C1 / base.rho
    cfg = replace(base, C1=C1)
    for _ in range(8):
        if cfg.rho == 0.25:
            break
        C1 = np.nextafter(C1, 0.0 if cfg.rho > 0.25 else np.inf)
        cfg = replace(base, C1=C1)
    assert cfg.rho == 0.25
    c = next(c for c in check_smallness(cfg).conditions if c.get("note") == "rho <= 1/4")
    assert c["name"] == "DefNArnExt1v501"
    assert c["passes"] and c["slack"] == 0.0


def test_inflated_perturbation_fails_before_first_step(worked):
    K, P, cfg = worked
    big = replace(cfg, eps=cfg.eps * 1e6)
    assert not check_smallness(big).passes
    with pytest.raises(SchemeConditionError) as err:
        run(K, cosine_family(1e2, ((1, 0), (1, 1)), 2, 8.0), big)
    assert err.value.step == 0
    assert err.value.result.steps == []


# run --------------------------------------------------------------------------

def test_zero_perturbation_converges_at_step_zero(worked):
    K, _, cfg = worked
    res = run(K, cosine_family(0.0, ((1, 0),), 2, 8.0), cfg)
    assert res.converged and res.steps == []
    T = res.torus
    X = T.x_grid()
    assert np.all(T.angle_samples[:, :2] == T.y_star)
    assert np.all(T.angle_samples[:, 2:] == X)
    assert np.all(T.graph_samples == T.y_star)


def test_worked_run_converges_superlinearly(worked_run, worked):
    cfg = worked[2]
    n = worked_run.norms
    assert worked_run.converged
    assert len(worked_run.steps) >= 5
    assert np.all(np.diff(n) < 0)
    ratios = n[1:] / n[:-1]
    assert np.all(np.diff(ratios) < 0)
    assert n[-1] <= 1e-12 * cfg.eps


def test_worked_run_gating_conditions_hold(worked_run):
    gating = [c for c in worked_run.conditions if c.get("gating", True)]
    assert gating and all(c["passes"] for c in gating)


def test_composed_map_consistency(worked_run):
    assert worked_run.torus.stats["composition_consistency"] <= 1e-10


def test_torus_frequency_is_diophantine(worked_run):
    dio = worked_run.torus.diophantine
    assert dio["passes"]


def test_telescoping_differences_contract(worked_run, worked):
    cfg = worked[2]
    X = grid(16)
    y = worked_run.label[None, :]
    prev, diffs = None, []
    for j in range(1, len(worked_run.maps) + 1):
        cur = np.concatenate(compose_maps(worked_run.maps[:j], y, X), axis=1)
        if prev is not None:
            diffs.append(np.abs(cur - prev).max())
        prev = cur
    q = worked_run.schedule.xi ** (cfg.m + 1)
    for a, b in zip(diffs, diffs[1:]):
        assert b <= q * a
    assert sum(diffs) < np.inf


def test_limit_conjugacy(worked_run):
    # the terminal norm sits far below double precision, so round-off of H sets the floor
    T = worked_run.torus
    floor = np.finfo(float).eps * (1 + abs(T.K_star_value))
    assert T.stats["conjugacy_defect"] <= 10 * max(worked_run.norms[-1], floor)


# frequency_anchor -------------------------------------------------------------

def test_anchor_without_smoothing_is_identity():
    K = QuadraticBase.identity(2)
    pts = np.array([[1.0, 1.5], [2.0, 0.5]])
    rep = frequency_anchor(K, K, pts)
    assert rep.G0_minus_id == 0.0 and rep.defect == 0.0


def test_anchor_tilt_is_shift():
    c = 2e-3
    K = QuadraticBase.identity(2)
    K0 = QuadraticBase(np.eye(2), np.array([c, 0.0]))
    pts = np.array([[1.0, 1.5], [2.0, 0.5], [5.0, 3.09]])
    rep = frequency_anchor(K0, K, pts)
    assert np.allclose(rep.G0(pts), pts - [c, 0.0], rtol=0, atol=1e-12)


def test_anchor_identity_on_run_output(worked_run, worked):
    K = worked[0]
    last = worked_run.steps[-1]
    box = np.stack(np.meshgrid(*([np.linspace(-1, 1, 4)] * 2), indexing="ij"), -1).reshape(-1, 2)
    pts = last.new_label + last.params.r_tilde * box
    rep = frequency_anchor(worked_run.K_final, K, pts)
    assert rep.defect <= 1e-10
