import json

import numpy as np
import pytest

from mkvlab.discrete_oracle import (GUARD, DiscreteProblem, all_values, class_size, exact_value, problem_from_json,
                                    random_instance, verify_dpp_exact)

SWAP = np.array([[[[1.0, 0.0], [0.0, 1.0]]], [[[0.0, 1.0], [1.0, 0.0]]]])  # (C=2, A=1, S, S)


def test_single_step_hand_value():
    # running: 0.2*1 + 0.8*3 = 2.6; terminal: 0.3*8 + 0.7*2 = 3.8
    p = DiscreteProblem(SWAP, [0.3, 0.7], [[1.0], [3.0]], [0.0, 10.0], [0.2, 0.8], 1)
    res = exact_value(p, "feedback")
    assert res.value == pytest.approx(6.4, abs=1e-14)
    assert res.count == 1


def test_mean_field_terms_by_hand():
    p = DiscreteProblem(SWAP, [0.3, 0.7], [[0.0], [0.0]], [0.0, 0.0], [0.2, 0.8], 1,
                        running_mf=1.0, terminal_mf=2.0)
    # sum nu^2 = 0.68 both now and after either outcome
    assert exact_value(p).value == pytest.approx(0.68 + 2 * 0.68, abs=1e-14)


def test_action_free_rewards_tie_to_first_table():
    g = np.random.default_rng(1)
    base = np.broadcast_to(g.dirichlet(np.ones(3), size=(2, 1, 3)), (2, 2, 3, 3))
    p = DiscreteProblem(base, [0.5, 0.5], np.repeat(g.normal(size=(3, 1)), 2, axis=1), g.normal(size=3),
                        [0.2, 0.3, 0.5], 2, herding=0.3)
    vals = all_values(p, "feedback")
    assert np.ptp(vals) < 1e-14
    res = exact_value(p, "feedback")
    assert not np.any(res.table)
    uncontrolled = DiscreteProblem(base[:, :1], [0.5, 0.5], p.running[:, :1], p.terminal, p.initial, 2, herding=0.3)
    assert res.value == pytest.approx(exact_value(uncontrolled).value, abs=1e-14)


def test_no_common_noise_open_loop_vs_feedback():
    g = np.random.default_rng(7)
    base = g.dirichlet(np.ones(2), size=(1, 2, 2))
    running = g.normal(size=(2, 2))
    p = DiscreteProblem(base, [1.0], running, g.normal(size=2), [0.4, 0.6], 2)
    assert exact_value(p, "bstrong").value <= exact_value(p, "feedback").value
    # state-independent transitions and additive rewards: feedback gains nothing
    flat = np.repeat(base[:, :, :1, :], 2, axis=2)
    additive = np.array([[0.0, 0.5], [1.0, 1.5]]) + np.array([0.3, -0.2])
    q = DiscreteProblem(flat, [1.0], additive, [0.0, 1.0], [0.4, 0.6], 2)
    assert exact_value(q, "bstrong").value == pytest.approx(exact_value(q, "feedback").value, abs=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_exact_dpp_on_random_instances(seed):
    S, A, C, K = [(2, 2, 2, 2), (2, 2, 2, 3), (3, 2, 2, 2), (2, 3, 2, 2)][seed % 4]
    p = random_instance(seed, S, A, C, K)
    for split in range(1, K):
        cert = verify_dpp_exact(p, split)
        assert cert.defect < 1e-12
        assert cert.concatenation_ok
        assert cert.norm_defect < 1e-12
        assert cert.ok
    assert exact_value(p, "bstrong").value <= exact_value(p, "feedback").value


def test_split_at_horizon_is_trivial():
    cert = verify_dpp_exact(random_instance(3), 2)
    assert cert.defect == 0.0 and cert.rhs == cert.value
    with pytest.raises(ValueError):
        verify_dpp_exact(random_instance(3), 0)


def test_bstrong_dpp():
    cert = verify_dpp_exact(random_instance(11, 2, 2, 3, 3), 1, "bstrong")
    assert cert.ok


def test_guard():
    p = random_instance(0, 2, 2, 3, 4)
    assert class_size(p, "feedback") > GUARD
    with pytest.raises(ValueError, match="guard"):
        exact_value(p)
    with pytest.raises(ValueError):
        class_size(p, "strong")


def test_json_roundtrip():
    p = random_instance(5, 3, 2, 2, 2)
    q = problem_from_json(json.dumps(p.to_json()))
    assert exact_value(q).value == exact_value(p).value
    doc = p.to_json()
    doc["colour"] = 1
    with pytest.raises(ValueError, match="unknown instance keys"):
        problem_from_json(doc)


def test_policy_table_json():
    p = random_instance(2, 2, 2, 2, 2)
    res = exact_value(p)
    rows = res.policy_json(p)
    assert len(rows) == 2 * (1 + 2)
    assert rows[0] == {"k": 0, "history": [], "state": 0, "action": int(res.table[0])}


def test_validation_errors():
    with pytest.raises(ValueError, match="sum to 1"):
        DiscreteProblem(SWAP * 0.5, [0.3, 0.7], [[1.0], [3.0]], [0.0, 1.0], [0.2, 0.8], 1)
    with pytest.raises(ValueError, match="shapes"):
        DiscreteProblem(SWAP, [0.3, 0.7], [[1.0]], [0.0, 1.0], [0.2, 0.8], 1)
    with pytest.raises(ValueError, match="herding"):
        DiscreteProblem(SWAP, [0.3, 0.7], [[1.0], [3.0]], [0.0, 1.0], [0.2, 0.8], 1, herding=2.0)
