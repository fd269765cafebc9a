import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mkvlab.lq_oracle import (LqSpec, RiccatiBlowup, hamiltonian, hjb_residual, lifted_gradient, lifted_hessian,
                              lions_derivative, lions_second_derivative, lions_spatial_derivative, lq_value,
                              preset, rhs, riccati_policy, solve_riccati, terminal_mismatch, to_problem)
from mkvlab.simulator import TimeGrid
from mkvlab.value import estimate_J


def test_lqcn1_closed_form(lqcn1):
    _, sol, _ = lqcn1
    np.testing.assert_allclose(sol.P, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.Pi, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.r, 0.5 * (1 - sol.times), atol=1e-12)
    np.testing.assert_allclose(sol.k_var, -1.0, atol=1e-12)
    assert lq_value(sol, 0.0, 0.0, 1.0) == pytest.approx(1.5, abs=1e-12)
    assert lq_value(sol, 0.5, 0.0, 2.0) == pytest.approx(2.25, abs=1e-12)


def test_no_cost_gives_zero():
    lq = LqSpec(A=0.7, Q=0.0, G=0.0)
    sol = solve_riccati(lq, 200)
    assert np.max(np.abs(np.concatenate([sol.P, sol.Pi, sol.r]))) == 0.0
    assert np.all(sol.k_var == 0.0) and np.all(sol.k_mean == 0.0)


def test_terminal_value_is_exact():
    lq = LqSpec(G=2.0, Gbar=0.5, A=0.3)
    sol = solve_riccati(lq, 50)
    assert terminal_mismatch(sol) == 0.0
    assert lq_value(sol, 1.0, 0.4, 3.0) == 2.0 * 3.0 + 2.5 * 0.16


def test_value_outside_horizon():
    sol = solve_riccati(preset("LQCN-1"), 10)
    with pytest.raises(ValueError):
        lq_value(sol, 1.5, 0.0, 1.0)


@pytest.mark.parametrize("name,branch", [("LQCN-1", "strong"), ("LQCN-2", "strong"), ("LQCN-2", "bstrong")])
def test_matches_independent_integrator(name, branch):
    lq = preset(name)
    sol = solve_riccati(lq, 100, branch=branch)
    f = rhs(lq, branch)
    ref = solve_ivp(lambda t, y: f(y), (lq.T, 0.0), [lq.G, lq.G + lq.Gbar, 0.0], method="DOP853",
                    t_eval=sol.times[::-1], rtol=1e-12, atol=1e-13)
    y = ref.y[:, ::-1]
    assert np.max(np.abs(np.vstack([sol.P, sol.Pi, sol.r]) - y)) < 1e-8


def test_lqcn2_reference_numbers(lqcn2):
    _, sol, _ = lqcn2
    P0, Pi0, r0 = sol.at(0.0)
    assert P0 == pytest.approx(1.0, abs=1e-10)
    assert Pi0 == pytest.approx(1.927, abs=1e-3)
    assert lq_value(sol, 0.0, 0.0, 1.0) == pytest.approx(1.6548, abs=1e-4)
    assert np.all(sol.P >= 0) and np.all(sol.Pi >= 0)


def test_step_doubling_self_check():
    lq = preset("LQCN-2")
    a, b = solve_riccati(lq, 100), solve_riccati(lq, 200)
    assert np.max(np.abs(a.Pi - b.Pi[::2])) < 1e-8
    assert np.max(np.abs(a.r - b.r[::2])) < 1e-8


def test_blowup_is_rejected():
    with pytest.raises(RiccatiBlowup):
        solve_riccati(LqSpec(A=8.0, Abar=8.0, B=0.0, Q=1.0, T=2.0), 100)


def test_invalid_specs():
    with pytest.raises(ValueError):
        LqSpec(R=0.0)
    with pytest.raises(ValueError):
        LqSpec(Q=-1.0)
    with pytest.raises(ValueError):
        LqSpec(Qbar=-2.0)
    with pytest.raises(KeyError):
        preset("LQCN-9")


def test_riccati_csv(tmp_path, lqcn2):
    _, sol, _ = lqcn2
    sol.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,P,Pi,r,k_var,k_mean"
    assert len(lines) == len(sol.times) + 1
    last = [float(v) for v in lines[-1].split(",")]
    assert last[:4] == [1.0, 1.0, 1.0, 0.0]


@pytest.mark.parametrize("name", ["LQCN-1", "LQCN-2"])
def test_oracle_simulator_agreement(name, lqcn1, lqcn2):
    _, sol, spec = lqcn1 if name == "LQCN-1" else lqcn2
    est = estimate_J(spec, riccati_policy(sol, spec.control_box), TimeGrid(0, 1, 100), 200, 500, seed=1)
    target = lq_value(sol, 0.0, 0.0, 1.0)
    assert abs(est.mean - target) <= 3 * est.std_error


# -- Lions calculus -----------------------------------------------------------

def _atoms(seed, k=64):
    rng = np.random.default_rng(seed)
    return rng.normal(rng.normal(), abs(rng.normal()) + 0.2, k), rng.random(k) + 0.1


@pytest.mark.parametrize("seed", range(5))
def test_lions_derivatives_match_lifted_differences(seed):
    y, w = _atoms(seed, 12)
    w = w / w.sum()
    P, Pi = 0.8, 1.7
    np.testing.assert_allclose(lifted_gradient(P, Pi, 0.3, y, w), lions_derivative(P, Pi, y, w), rtol=0, atol=1e-6)
    H = lifted_hessian(P, Pi, 0.3, y, w)
    expect = np.outer(w, w) * lions_second_derivative(P, Pi, y, w) + np.diag(w * lions_spatial_derivative(P, Pi, y, w))
    np.testing.assert_allclose(H, expect, rtol=0, atol=1e-6)


def test_strong_hamiltonian_dominates_bstrong():
    lq = preset("LQCN-2")
    for seed in range(10):
        y, w = _atoms(seed)
        assert hamiltonian(lq, 1.0, 1.5, y, w, "strong") >= hamiltonian(lq, 1.0, 1.5, y, w, "bstrong") - 1e-12
    with pytest.raises(ValueError):
        hamiltonian(lq, 1.0, 1.0, y, w, "weak")


@pytest.mark.parametrize("name", ["LQCN-1", "LQCN-2"])
@pytest.mark.parametrize("branch", ["strong", "bstrong"])
def test_hjb_residual_small_at_solution(name, branch):
    lq = preset(name)
    sol = solve_riccati(lq, 1000, branch=branch)
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(25):
        t = rng.uniform(0, lq.T)
        atoms = rng.normal(rng.normal(), 1.0, 64)
        worst = max(worst, abs(hjb_residual(lq, sol, t, atoms)))
    assert worst < 1e-6


def test_hjb_residual_detects_perturbation(lqcn1):
    lq, sol, _ = lqcn1
    bad = sol.shifted(dP=0.1)
    rng = np.random.default_rng(3)
    res = [abs(hjb_residual(lq, bad, rng.uniform(0, 1), rng.normal(0, 1, 64))) for _ in range(20)]
    assert min(res) > 1e-3


def test_box_bounds_enter_the_hamiltonian():
    lq = preset("LQCN-1")
    y = np.full(8, 3.0)
    free = hamiltonian(lq, 1.0, 1.0, y, None, "bstrong")
    boxed = hamiltonian(lq, 1.0, 1.0, y, None, "bstrong", bounds=(-1.0, 1.0))
    assert boxed < free


def test_lq_problem_wiring():
    spec = to_problem(preset("LQCN-2"), ell=1)
    assert spec.objective == "minimize" and spec.meta["lq"]["Qbar"] == 1.0
    with pytest.raises(ValueError):
        to_problem(preset("LQCN-1"), ell=0)
