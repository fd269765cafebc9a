"""The ten acceptance criteria, run at their stated tolerances.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary, then asserts on it.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, feedback, make_problem
from mkvlab.cli import run
from mkvlab.dpp import InnerBudget, StoppingRule, check_dpp
from mkvlab.lq_oracle import hjb_residual, lq_value, preset, riccati_policy, solve_riccati
from mkvlab.measures import assignment_wasserstein2, empirical_from_points, wasserstein2
from mkvlab.policies import FamilySearch
from mkvlab.problems.templates import linear_drift
from mkvlab.simulator import TimeGrid, picard_solve, simulate
from mkvlab.value import estimate_J

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _verdict(k, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def _cli(tmp_path, sub, cfg, name="run", **kw):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / name
    t0 = time.perf_counter()
    code = run(sub, cfg_path, out_dir=out, **kw)
    return code, out, time.perf_counter() - t0


def _load(name):
    return json.loads((CONFIGS / name).read_text())


def test_1_lq_value_reproduction(lqcn1):
    _, sol, spec = lqcn1
    t0 = time.perf_counter()
    est = estimate_J(spec, riccati_policy(sol, spec.control_box), TimeGrid(0, 1, 100), 200, 500, seed=1)
    dt = time.perf_counter() - t0
    target = lq_value(sol, 0.0, 0.0, 1.0)
    dev = abs(est.mean - target)
    ok = dev <= 3 * est.std_error and dev <= 0.02 * target and dt < 60
    _verdict(1, ok, f"J = {est.mean:.4f} +- {est.std_error:.4f} vs {target:.4f} "
                    f"(rel {dev / target:.2%}), {dt:.1f} s")


def test_2_value_search(tmp_path):
    code, out, dt = _cli(tmp_path, "optimize", _load("optimize_lqcn1.json"))
    rep = json.loads((out / "report.json").read_text())
    gain = rep["policy"]["params"][1]
    est = rep["estimate"]
    ok = code == 0 and abs(gain + 1.0) <= 0.05 and abs(est["mean"] - 1.5) <= 3 * est["std_error"] and dt < 300
    _verdict(2, ok, f"gain {gain:.4f}, value {est['mean']:.4f} +- {est['std_error']:.4f}, {dt:.1f} s")


def _dpp_runs():
    runs = []
    for cfg_name in ("dpp_lqcn1.json", "dpp_lqcn2.json"):
        for tau in (0.25, 0.5, 0.75):
            cfg = _load(cfg_name)
            cfg["stopping"] = {"kind": "deterministic", "time": tau}
            runs.append((f"{cfg['problem']['preset']} tau={tau}", cfg))
    for preset_name, thr, direction in (("LQCN-1", 0.1, "up"), ("LQCN-2", 0.1, "up"), ("LQCN-1", -0.1, "down")):
        cfg = _load("dpp_lqcn1_hitting.json")
        cfg["problem"]["preset"] = preset_name
        cfg["stopping"] = {"kind": "hitting", "functional": "mean", "threshold": thr, "direction": direction}
        runs.append((f"{preset_name} hit {direction} {thr}", cfg))
    return runs


@pytest.mark.slow
def test_3_statistical_dpp(tmp_path):
    passed, slow, notes = 0, [], []
    for i, (label, cfg) in enumerate(_dpp_runs()):
        cfg.pop("expect", None)
        code, out, dt = _cli(tmp_path, "dpp-check", cfg, name=f"dpp{i}")
        rep = json.loads((out / "report.json").read_text())
        ok = code == 0 and abs(rep["gap"]) <= 3 * rep["gap_se"]
        passed += ok
        if dt >= 600:
            slow.append(label)
        notes.append(f"{label}: gap {rep['gap']:+.4f} se {rep['gap_se']:.4f} {dt:.0f}s")
        print(notes[-1])
    _verdict(3, passed >= 8 and not slow, f"{passed}/9 runs with |gap| <= 3 se; over 10 min: {slow or 'none'}")


def test_4_exact_dpp(tmp_path):
    code, out, dt = _cli(tmp_path, "discrete-check", _load("discrete_random.json"))
    rep = json.loads((out / "report.json").read_text())
    certs = rep["certificates"]
    worst = max(max(c["defect"], c["norm_defect"]) for c in certs)
    ok = (code == 0 and len(certs) == 20 and worst < 1e-12 and all(c["concatenation_ok"] for c in certs)
          and dt < 60)
    _verdict(4, ok, f"{len(certs)} instances, worst defect {worst:.1e}, {dt:.1f} s")


def test_5_ordering_and_collapse(tmp_path):
    code, out, _ = _cli(tmp_path, "ordering", _load("ordering_lqcn1.json"))
    rep = json.loads((out / "report.json").read_text())
    ok = code == 0 and rep["monotone"] and rep["collapsed"]
    means = ", ".join(f"{e['mean']:.4f}" for e in rep["estimates"])
    _verdict(5, ok, f"incumbents ({means}); strong-weak gap {rep['collapse_gap']:.4f} "
                    f"vs 3 se {3 * rep['collapse_se']:.4f}")


def test_6_markov_reduction(tmp_path):
    code, out, _ = _cli(tmp_path, "markov-check", _load("markov_lqcn1.json"))
    rep = json.loads((out / "report.json").read_text())
    ok = code == 0 and rep["agree"] and rep["pushforward_w2"] < 1e-9
    _verdict(6, ok, f"difference {rep['difference']:+.4f} vs 3 se {3 * rep['combined_se']:.4f}")


def test_7_hjb_residual():
    rng = np.random.default_rng(2024)
    worst, weakest = 0.0, np.inf
    for name in ("LQCN-1", "LQCN-2"):
        lq = preset(name)
        sol = solve_riccati(lq, 1000, branch="bstrong")
        bad = sol.shifted(dP=0.1)
        for _ in range(100):
            t = float(rng.uniform(0, lq.T))
            atoms = rng.normal(rng.normal(), 1.0, 64)
            worst = max(worst, abs(hjb_residual(lq, sol, t, atoms)))
            weakest = min(weakest, abs(hjb_residual(lq, bad, t, atoms)))
    _verdict(7, worst < 1e-6 and weakest > 1e-3,
             f"max residual {worst:.1e}; min perturbed residual {weakest:.1e}")


def test_8_picard(lqcn1):
    _, sol, spec = lqcn1
    pol = riccati_policy(sol, spec.control_box)
    grid, M, N = TimeGrid(0, 1, 50), 50, 200
    pens, rep = picard_solve(spec, pol, grid, M, N, seed=9, tol=1e-4, max_iter=15)
    ens = simulate(spec, pol, grid, M, N, seed=9)
    d = np.array(rep.distances)
    decreasing = bool(np.all(np.diff(d) < 0))
    a, b = pens.slice_means()[..., 0], ens.slice_means()[..., 0]  # (K+1, M)
    se = b.std(axis=1, ddof=1) / np.sqrt(M)
    within = bool(np.all(np.abs(a.mean(axis=1) - b.mean(axis=1)) <= 3 * se + 1e-15))
    ok = rep.converged and rep.iterations <= 15 and decreasing and within
    _verdict(8, ok, f"{rep.iterations} iterations, distances {', '.join(f'{x:.1e}' for x in d)}; "
                    f"means within 3 se: {within}")


def test_9_degeneracies(lqcn1):
    # pooling without common noise
    spec = make_problem(drift=linear_drift(1, 1, state=-0.5, mean=1.0, control=1.0), sigma=0.8, ell=0)
    pol, grid = feedback(0.1, -0.5, 0.3), TimeGrid(0, 1, 20)
    a = simulate(spec, pol, grid, 5, 40, seed=17)
    b = simulate(spec, pol, grid, 1, 200, seed=17)
    pooled = np.array_equal(a.states.reshape(21, 200, 1), b.states.reshape(21, 200, 1))

    # stopping at the horizon
    _, sol, lq_spec = lqcn1
    fs = FamilySearch(riccati_policy(sol, lq_spec.control_box), ((0, 0), (0.5, 1.5), (0.5, 1.5)), (1, 3, 3))
    rep = check_dpp(lq_spec, fs, StoppingRule("deterministic", 1.0), TimeGrid(0, 1, 20), 10, 50, InnerBudget(2, 10),
                    seed=5)
    horizon_gap = abs(rep.gap)

    # transport metric suite
    rng = np.random.default_rng(0)
    bad = 0
    for i in range(500):
        d = 1 if i % 3 == 0 else int(rng.integers(2, 4))
        mus = []
        for _ in range(3):
            n = int(rng.integers(1, 13))
            w = rng.random(n) + 0.05 if i % 2 else None
            mus.append(empirical_from_points(rng.normal(size=(n, d)) * rng.uniform(0.2, 3), w))
        mu, nu, xi = mus
        ok = (wasserstein2(mu, mu) <= 1e-9 and abs(wasserstein2(mu, nu) - wasserstein2(nu, mu)) <= 1e-9
              and wasserstein2(mu, xi) <= wasserstein2(mu, nu) + wasserstein2(nu, xi) + 1e-9)
        if d == 1:
            ok = ok and abs(wasserstein2(mu, nu) - assignment_wasserstein2(mu, nu)) <= 1e-10
        bad += not ok
    _verdict(9, pooled and horizon_gap < 1e-12 and bad == 0,
             f"pooling bit-exact {pooled}; horizon gap {horizon_gap:.1e}; transport failures {bad}/500")


def _small_configs():
    sim = _load("simulate_lqcn1.json")
    sim["particles"] = {"M": 3, "N": 40}
    opt = _load("optimize_lqcn1.json")
    opt.update(grid={"steps": 10}, particles={"M": 4, "N": 30})
    opt["search"].update(resolution=[1, 5, 1], refine_levels=1)
    opt.pop("expect")
    dpp = _load("dpp_lqcn1.json")
    dpp.update(grid={"steps": 10}, particles={"M": 4, "N": 30}, inner={"M": 2, "N": 20})
    dpp["search"].update(resolution=[1, 2, 2], refine_levels=0)
    dpp.pop("expect")
    ordering = _load("ordering_lqcn1.json")
    ordering.update(grid={"steps": 10}, particles={"M": 4, "N": 30})
    ordering.pop("expect")
    lq = _load("lq_verify.json")
    lq.update(grid={"steps": 10}, particles={"M": 4, "N": 30}, riccati_steps=100, hjb={"points": 5, "atoms": 8})
    markov = _load("markov_lqcn1.json")
    markov.update(grid={"steps": 10}, particles={"M": 4, "N": 30})
    markov.pop("expect")
    return {"simulate": sim, "validate": _load("validate_lqcn1.json"), "optimize": opt, "dpp-check": dpp,
            "ordering": ordering, "lq-verify": lq, "discrete-check": _load("discrete_two_state.json"),
            "markov-check": markov}


def test_10_determinism(tmp_path):
    differing = []
    for sub, cfg in _small_configs().items():
        runs = []
        for threads in (1, 4):
            code, out, _ = _cli(tmp_path, sub, cfg, name=f"{sub}-{threads}", threads=threads)
            files = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
            runs.append((code, files))
        if runs[0] != runs[1]:
            differing.append(sub)
    _verdict(10, not differing, f"8 subcommands, artifacts differing across thread counts: {differing or 'none'}")
