"""Solve the LQ benchmark two ways and compare.

The Riccati system gives the value and optimal feedback in closed form; a
particle simulation of that feedback should reproduce the value within
Monte Carlo error. Then a grid search over a plain linear gain recovers the
same feedback without being told it.
"""
from mkvlab.lq_oracle import lq_value, preset, riccati_policy, solve_riccati, to_problem
from mkvlab.policies import FamilySearch, Policy
from mkvlab.simulator import TimeGrid
from mkvlab.value import estimate_J, optimize_value

for name in ("LQCN-1", "LQCN-2"):
    lq = preset(name)
    sol = solve_riccati(lq, 1000)
    spec = to_problem(lq, name=name)
    P0, Pi0, r0 = sol.at(0.0)
    oracle = lq_value(sol, 0.0, 0.0, 1.0)
    print(f"{name}: P(0)={P0:.4f} Pi(0)={Pi0:.4f} r(0)={r0:.4f} value={oracle:.4f}")

    est = estimate_J(spec, riccati_policy(sol, spec.control_box), TimeGrid(0, 1, 100), 200, 500, seed=1)
    print(f"  simulated optimal feedback: {est.mean:.4f} +- {est.std_error:.4f}")

# Search u = k0 + k1 x + k2 m over k1 only, starting blind.
spec = to_problem(preset("LQCN-1"))
template = Policy("strong", "linear-feedback", (0.0, 0.0, 0.0), spec.control_box)
search = FamilySearch(template, ((0, 0), (-2, 0), (0, 0)), (1, 41, 1), refine_levels=3)
res = optimize_value(spec, search, TimeGrid(0, 1, 50), 100, 200, seed=5)
print(f"gain search: k1={res.policy.params[1]:.4f} after {res.evaluations} evaluations, "
      f"value {res.estimate.mean:.4f} +- {res.estimate.std_error:.4f} (oracle gain -1, value 1.5)")
