"""Exact dynamic programming on a tiny finite-state mean-field model.

With finitely many states, actions and common-noise outcomes the value can be
computed by enumerating every policy table, so the DPP identity holds to
rounding error rather than up to Monte Carlo noise.
"""
from mkvlab.discrete_oracle import exact_value, random_instance, verify_dpp_exact

for seed in range(5):
    p = random_instance(seed, S=2, A=2, C=2, K=3)
    cert = verify_dpp_exact(p, split=1)
    b = exact_value(p, "bstrong")
    print(f"instance {seed}: feedback value {cert.value:.6f}, split value {cert.rhs:.6f}, "
          f"defect {cert.defect:.1e}, noise-only value {b.value:.6f}")
