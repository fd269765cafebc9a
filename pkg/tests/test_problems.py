import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_problem
from mkvlab.problems import (ConfigError, UpdatingFunction, apply_updating, estimate_lipschitz,
                             increment_consistency_defect, problem_from_json, validate_growth,
                             validate_nonanticipativity)
from mkvlab.problems.spec import box
from mkvlab.problems.templates import linear_drift, quadratic_reward


def _current_state(t, x, mu, u):
    return x.current


def _future_state(t, x, mu, u):
    return x.values[-1]


def _mean_drift(t, x, mu, u):
    return np.broadcast_to(mu.mean(), x.current.shape)


# -- non-anticipativity ------------------------------------------------------

def test_current_state_drift_is_nonanticipative():
    rep = validate_nonanticipativity(make_problem(drift=_current_state), 32, seed=1)
    assert rep.ok and rep.violations["drift"] == 0.0


def test_terminal_state_drift_is_flagged():
    rep = validate_nonanticipativity(make_problem(drift=_future_state), 32, seed=1)
    assert not rep.ok
    assert rep.violations["drift"] > 0.0


def test_lq_benchmarks_are_nonanticipative(lqcn1, lqcn2):
    for _, _, spec in (lqcn1, lqcn2):
        rep = validate_nonanticipativity(spec, 64, seed=3)
        assert all(v == 0.0 for v in rep.violations.values())


def test_nonanticipativity_rejects_zero_samples():
    with pytest.raises(ValueError):
        validate_nonanticipativity(make_problem(), 0)


def test_evaluator_failure_carries_context():
    def broken(t, x, mu, u):
        raise KeyError("boom")

    with pytest.raises(RuntimeError, match="drift failed on validation sample 0"):
        validate_nonanticipativity(make_problem(drift=broken), 4)


# -- Lipschitz ---------------------------------------------------------------

def test_constant_coefficients_have_zero_constant():
    rep = estimate_lipschitz(make_problem(drift=0.0, sigma=0.7, sigma0=0.3), 48, seed=0)
    assert rep.constant == 0.0


def test_linear_drift_constant_approaches_three():
    spec = make_problem(drift=linear_drift(1, 1, state=3.0))
    rep = estimate_lipschitz(spec, 90, seed=0)
    assert 2.5 < rep.constant <= 3.0 + 1e-9


def test_mean_drift_is_one_lipschitz_in_w2():
    rep = estimate_lipschitz(make_problem(drift=_mean_drift), 120, seed=5)
    assert 0.0 < rep.constant <= 1.0 + 1e-9


def test_lipschitz_requires_p_two():
    with pytest.raises(ValueError, match="p_integrability"):
        estimate_lipschitz(make_problem(p_integrability=1.0), 4)


@pytest.mark.parametrize("seed", [0, 7])
def test_lipschitz_running_max_never_decreases(seed):
    spec = make_problem(drift=linear_drift(1, 1, state=2.0, mean=1.0))
    small = estimate_lipschitz(spec, 20, seed)
    big = estimate_lipschitz(spec, 60, seed)
    assert np.all(np.diff(big.running_max) >= 0)
    assert big.running_max[:20] == small.running_max
    assert big.constant >= small.constant


# -- growth ------------------------------------------------------------------

def test_zero_rewards_have_zero_growth_ratio():
    assert validate_growth(make_problem(), 32).ratio == 0.0


def test_control_distance_reward_is_dominated():
    spec = make_problem(running=quadratic_reward(1, 1, control=1.0), lo=-1.0, hi=1.0)
    rep = validate_growth(spec, 64, seed=2)
    assert 0.0 < rep.abs_ratio <= 1.0


def test_lq_growth_ratio_is_finite(lqcn1):
    lq, _, spec = lqcn1
    rep = validate_growth(spec, 64, seed=2)
    assert np.isfinite(rep.ratio)
    assert rep.abs_ratio <= max(lq.Q + lq.Qbar, lq.R, lq.G + lq.Gbar)


# -- updating functions ------------------------------------------------------

def test_running_state_is_identity():
    path = np.array([0.3, -1.0, 2.0, 0.5])
    out = apply_updating(UpdatingFunction("running-state"), np.linspace(0, 1, 4), path)
    np.testing.assert_array_equal(out[:, 0], path)


def test_running_max_envelope():
    out = apply_updating(UpdatingFunction("running-max"), [0.0, 0.5, 1.0], [0.0, 2.0, 1.0])
    np.testing.assert_array_equal(out[:, 0], [0.0, 2.0, 2.0])


def test_running_average_of_constant():
    out = apply_updating(UpdatingFunction("running-average"), np.linspace(0, 1, 7), np.full(7, 1.7))
    np.testing.assert_allclose(out[:, 0], 1.7, rtol=0, atol=1e-15)


def test_composite_stacks_state_max_average():
    phi = UpdatingFunction("composite")
    out = apply_updating(phi, [0.0, 1.0, 2.0], [0.0, 2.0, 0.0])
    assert phi.E_dim == 3
    np.testing.assert_allclose(out[-1], [0.0, 2.0, 1.0])


def test_updating_errors():
    with pytest.raises(ValueError):
        apply_updating(UpdatingFunction(), [], np.zeros((0, 1)))
    with pytest.raises(ValueError):
        UpdatingFunction("running-median")


def test_summary_ignores_the_future():
    rng = np.random.default_rng(0)
    times = np.linspace(0, 1, 11)
    x = rng.standard_normal(11)
    y = x.copy()
    y[6:] += 5.0
    phi = UpdatingFunction("composite")
    np.testing.assert_array_equal(apply_updating(phi, times, x)[:6], apply_updating(phi, times, y)[:6])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.sampled_from(["running-state", "composite"]))
def test_increment_consistency(seed, s, kind):
    # the composite summary contains the state, so equal summaries at s force equal x(s)
    rng = np.random.default_rng(seed)
    times = np.linspace(0, 1, 11)
    inc = rng.standard_normal(10 - s)
    x = np.concatenate([rng.standard_normal(s + 1), np.zeros(10 - s)])
    x[s + 1:] = x[s] + np.cumsum(inc)
    y = x.copy()
    if kind == "running-state":
        y[:s] = rng.standard_normal(s)
    defect = increment_consistency_defect(UpdatingFunction(kind), times, x, y, s)
    if defect is None:
        return
    assert defect <= (0.0 if kind == "running-state" else 1e-12)


def test_increment_consistency_detects_unequal_start():
    times = np.linspace(0, 1, 3)
    assert increment_consistency_defect(UpdatingFunction(), times, [0, 1, 2], [1, 2, 3], 0) is None


# -- configuration -----------------------------------------------------------

GENERIC = {
    "kind": "generic", "dims": {"n": 1, "d": 1, "ell": 1}, "horizon": 1.0,
    "control_box": {"lo": [-1], "hi": [1]},
    "drift": {"template": "linear", "control": 1.0},
    "diffusion": {"template": "constant", "value": 0.5},
    "common_diffusion": {"template": "constant", "value": 0.3},
    "running": {"template": "quadratic", "state": -1.0},
    "terminal": {"template": "constant", "value": 0.0},
    "initial": {"type": "gaussian", "mean": [0], "std": [1]},
}


def test_generic_problem_roundtrip():
    spec = problem_from_json(GENERIC)
    assert (spec.n, spec.d, spec.ell, spec.m) == (1, 1, 1, 1)
    assert spec.objective == "maximize"


def test_lq_preset_from_json():
    spec = problem_from_json({"kind": "lqcn", "preset": "LQCN-2", "ell": 0, "params": {"sigma0": 0.0}})
    assert spec.ell == 0 and spec.objective == "minimize"
    assert spec.meta["lq"]["Abar"] == 0.5
    with pytest.raises(ConfigError, match="problem.ell"):
        problem_from_json({"kind": "lqcn", "preset": "LQCN-2", "ell": 0})


def test_unknown_key_names_its_field():
    doc = dict(GENERIC, drift={"template": "linear", "slope": 1.0})
    with pytest.raises(ConfigError) as exc:
        problem_from_json(doc)
    assert exc.value.field.startswith("problem.drift")


def test_bad_initial_dimension():
    doc = dict(GENERIC, initial={"type": "dirac", "point": [0.0, 1.0]})
    with pytest.raises(ConfigError, match="initial"):
        problem_from_json(doc)


def test_box_must_be_bounded_and_nonempty():
    with pytest.raises(ValueError):
        box([1.0], [0.0])
    with pytest.raises(ValueError):
        box([-np.inf], [0.0])
    b = box([-1.0, 0.0], [1.0, 2.0])
    np.testing.assert_array_equal(b.center, [0.0, 1.0])
    assert b.rho(np.array([1.0, 1.0])) == pytest.approx(1.0)
