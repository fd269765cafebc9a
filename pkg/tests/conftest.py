import numpy as np
import pytest

from mkvlab.lq_oracle import preset, riccati_policy, solve_riccati, to_problem
from mkvlab.policies import Policy
from mkvlab.problems.spec import Gaussian, ProblemSpec, box
from mkvlab.problems.templates import (constant_diffusion, constant_drift, constant_reward, constant_terminal,
                                       linear_drift, quadratic_reward, quadratic_terminal)


@pytest.fixture(scope="session")
def lqcn1():
    lq = preset("LQCN-1")
    return lq, solve_riccati(lq, 1000), to_problem(lq, name="LQCN-1")


@pytest.fixture(scope="session")
def lqcn2():
    lq = preset("LQCN-2")
    return lq, solve_riccati(lq, 1000), to_problem(lq, name="LQCN-2")


def make_problem(n=1, d=1, ell=1, T=1.0, drift=0.0, sigma=0.0, sigma0=0.0, running=0.0, terminal=0.0,
                 lo=-1.0, hi=1.0, initial=None, objective="maximize", **kw):
    """Small constant-coefficient problem; pass template objects to override."""
    return ProblemSpec(
        n=n, d=d, ell=ell, T=T, control_box=box([lo], [hi]),
        drift=drift if callable(drift) else constant_drift(drift, n),
        diffusion=sigma if callable(sigma) else constant_diffusion(sigma, n, d),
        common_diffusion=sigma0 if callable(sigma0) else constant_diffusion(sigma0, n, ell),
        running=running if callable(running) else constant_reward(running, n, 1),
        terminal=terminal if callable(terminal) else constant_terminal(terminal, n),
        initial=initial or Gaussian((0.0,) * n, (1.0,) * n), objective=objective, **kw)


def feedback(k0, k1, k2, lo=-1.0, hi=1.0, info_class="feedback"):
    return Policy(info_class, "linear-feedback", (k0, k1, k2), box([lo], [hi]))


def constant(c, lo=-1.0, hi=1.0, info_class="bstrong"):
    return Policy(info_class, "constant", (c,), box([lo], [hi]))


__all__ = ["make_problem", "feedback", "constant", "linear_drift", "quadratic_reward", "quadratic_terminal", "np"]


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
