"""Check the dynamic programming identity numerically on the LQ benchmark.

The left side optimises over the whole horizon. The right side runs an
outer rule up to a stopping time, then restarts an inner optimisation from
each scenario's realised particle cloud. Their gap should be within
Monte Carlo noise; a deliberately poor outer family shows what a
family-limited gap looks like.
"""
from mkvlab.dpp import InnerBudget, StoppingRule, check_dpp
from mkvlab.lq_oracle import preset, riccati_policy, solve_riccati, to_problem
from mkvlab.policies import FamilySearch, constant_policy
from mkvlab.simulator import TimeGrid

lq = preset("LQCN-1")
sol = solve_riccati(lq, 1000)
spec = to_problem(lq)
grid = TimeGrid(0, 1, 40)
riccati = FamilySearch(riccati_policy(sol, spec.control_box), ((0, 0), (0.5, 1.5), (0.5, 1.5)), (1, 3, 3))

for rule in (StoppingRule("deterministic", 0.5),
             StoppingRule("hitting", functional="mean", threshold=0.1, direction="up")):
    rep = check_dpp(spec, riccati, rule, grid, 20, 200, InnerBudget(10, 200), seed=11)
    print(f"{rule.kind:13s} lhs {rep.lhs.mean:.4f}  rhs {rep.rhs.mean:.4f}  "
          f"gap {rep.gap:+.4f} (se {rep.gap_se:.4f}) -> {rep.label}")

constants = FamilySearch(constant_policy(0.0, spec.control_box, "bstrong"), ((-1, 1),), 5, refine_levels=0)
rep = check_dpp(spec, riccati, StoppingRule("deterministic", 0.5), grid, 20, 200, InnerBudget(10, 200), seed=11,
                outer_search=constants)
print(f"constant outer rule: gap {rep.gap:+.4f} (se {rep.gap_se:.4f}) -> {rep.label}")
