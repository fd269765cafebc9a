"""Sample-based checks of the standing assumptions on a ProblemSpec.

These are samplers: a reported violation is real, a clean report certifies
nothing beyond the samples drawn.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..measures import path_wasserstein2
from .spec import LawHistory, PathHistory, ProblemSpec

ATOMS = 8
GRID_POINTS = 20
COEFFICIENTS = ("drift", "diffusion", "common_diffusion", "running")


def _sample_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i])


def _random_paths(rng, times, count, n, scale=1.0):
    J = len(times)
    dt = np.diff(times, prepend=times[0])
    steps = rng.standard_normal((J, count, n)) * np.sqrt(dt)[:, None, None]
    x0 = rng.standard_normal((count, n)) * scale
    return x0 + np.cumsum(steps, axis=0)


def _random_controls(rng, spec, count):
    b = spec.control_box
    return b.lo + (b.hi - b.lo) * rng.random((count, spec.m))


def _shaped(out, shape):
    return np.broadcast_to(np.asarray(out, float), shape)


def _shapes(spec):
    return {"drift": (1, 1, spec.n), "diffusion": (1, 1, spec.n, spec.d),
            "common_diffusion": (1, 1, spec.n, spec.ell), "running": (1, 1)}


def _evaluate(spec, name, t, x, mu, u, i):
    try:
        out = getattr(spec, name)(t, x, mu, u)
    except Exception as exc:  # re-raised with context
        raise RuntimeError(f"{name} failed on validation sample {i} at t={t:.6g}: {exc}") from exc
    return _shaped(out, _shapes(spec)[name])


@dataclass
class SampleCase:
    t: float
    x: PathHistory
    mu: LawHistory
    u: np.ndarray


def _case(spec, rng, times, j, x_paths=None, mu_paths=None, mu_controls=None, u=None):
    if x_paths is None:
        x_paths = _random_paths(rng, times, 1, spec.n)
    if mu_paths is None:
        mu_paths = _random_paths(rng, times, ATOMS, spec.n)
    if mu_controls is None:
        mu_controls = _random_controls(rng, spec, ATOMS)
    if u is None:
        u = _random_controls(rng, spec, 1)
    x = PathHistory(x_paths[:, None, :, :], times, j)  # (J, 1, 1, n)
    mu = LawHistory(mu_paths[:, None, :, :], mu_controls[None], times, j)
    return SampleCase(float(times[j]), x, mu, u[None])


@dataclass
class NonAnticipativityReport:
    violations: dict
    samples: int

    @property
    def ok(self) -> bool:
        return all(v == 0.0 for v in self.violations.values())

    def to_json(self) -> dict:
        return {"violations": self.violations, "samples": self.samples, "ok": self.ok}


def validate_nonanticipativity(spec: ProblemSpec, sample_count: int = 64, seed: int = 0) -> NonAnticipativityReport:
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    times = np.linspace(0.0, spec.T, GRID_POINTS + 1)
    worst = {name: 0.0 for name in COEFFICIENTS}
    for i in range(sample_count):
        rng = _sample_rng(seed, i)
        j = int(rng.integers(0, GRID_POINTS))
        case = _case(spec, rng, times, j)
        xs, ms = case.x.stopped(), case.mu.stopped()
        for name in COEFFICIENTS:
            a = _evaluate(spec, name, case.t, case.x, case.mu, case.u, i)
            b = _evaluate(spec, name, case.t, xs, ms, case.u, i)
            worst[name] = max(worst[name], float(np.max(np.abs(a - b), initial=0.0)))
    return NonAnticipativityReport(worst, sample_count)


@dataclass
class LipschitzReport:
    constant: float
    worst: dict
    growth_ratio: float
    samples: int
    skipped: int
    running_max: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"constant": self.constant, "worst": self.worst, "growth_ratio": self.growth_ratio,
                "samples": self.samples, "skipped": self.skipped}


def _coef_vector(spec, case, i):
    parts = [_evaluate(spec, name, case.t, case.x, case.mu, case.u, i).reshape(-1)
             for name in ("drift", "diffusion", "common_diffusion")]
    return np.concatenate(parts)


def _growth_bound(spec, case):
    j = case.x.index
    xs = case.x.values[: j + 1, 0, 0]
    x_sup2 = float(np.max(np.sum(xs**2, axis=-1)))
    ys = case.mu.values[: j + 1, 0]  # (j+1, atoms, n)
    y_sup2 = np.max(np.sum(ys**2, axis=-1), axis=0)
    rho_mu = spec.control_box.rho(case.mu.controls[0]) ** 2
    rho_u = float(spec.control_box.rho(case.u[0, 0]) ** 2)
    return 1.0 + x_sup2 + float(np.mean(y_sup2 + rho_mu)) + rho_u


def estimate_lipschitz(spec: ProblemSpec, sample_count: int = 64, seed: int = 0) -> LipschitzReport:
    """Largest observed ratio |d(b, sigma, sigma0)| / (|x - x'| + W2(nu, nu'))."""
    if spec.p_integrability != 2:
        raise ValueError("Lipschitz validation requires p_integrability = 2")
    times = np.linspace(0.0, spec.T, GRID_POINTS + 1)
    best, worst, growth, skipped, trace = 0.0, {}, 0.0, 0, []
    for i in range(sample_count):
        rng = _sample_rng(seed, i)
        j = int(rng.integers(0, GRID_POINTS + 1))
        mode = i % 3
        xp = _random_paths(rng, times, 1, spec.n)
        mp = _random_paths(rng, times, ATOMS, spec.n)
        mc = _random_controls(rng, spec, ATOMS)
        u = _random_controls(rng, spec, 1)
        shift = rng.standard_normal(spec.n) * 10.0 ** rng.uniform(-3, 0)
        xp2, mp2, mc2 = xp, mp, mc
        if mode in (0, 2):
            xp2 = xp + shift
        if mode in (1, 2):
            mp2 = mp + rng.standard_normal(mp.shape) * 10.0 ** rng.uniform(-3, 0)
            mc2 = mc.copy()
        c1 = _case(spec, rng, times, j, xp, mp, mc, u)
        c2 = _case(spec, rng, times, j, xp2, mp2, mc2, u)
        dx = float(np.sqrt(np.max(np.sum((xp[: j + 1] - xp2[: j + 1]) ** 2, axis=-1))))
        w2 = path_wasserstein2(np.swapaxes(mp[: j + 1], 0, 1), np.swapaxes(mp2[: j + 1], 0, 1), mc, mc2)
        num = float(np.linalg.norm(_coef_vector(spec, c1, i) - _coef_vector(spec, c2, i)))
        den = dx + w2
        growth = max(growth, float(np.sum(_coef_vector(spec, c1, i) ** 2)) / _growth_bound(spec, c1))
        if den < 1e-12:
            skipped += 1
        elif num / den > best:
            best = num / den
            worst = {"sample": i, "t": float(times[j]), "mode": ("path", "measure", "both")[mode],
                     "path_distance": dx, "w2": w2}
        trace.append(best)
    return LipschitzReport(best, worst, growth, sample_count, skipped, trace)


@dataclass
class GrowthReport:
    ratio: float  # max |(L, g)|^2 / bound
    abs_ratio: float  # max max(|L|, |g|) / bound
    samples: int

    def to_json(self) -> dict:
        return {"ratio": self.ratio, "abs_ratio": self.abs_ratio, "samples": self.samples}


def validate_growth(spec: ProblemSpec, sample_count: int = 64, seed: int = 0) -> GrowthReport:
    times = np.linspace(0.0, spec.T, GRID_POINTS + 1)
    ratio = abs_ratio = 0.0
    for i in range(sample_count):
        rng = _sample_rng(seed, i)
        j = int(rng.integers(0, GRID_POINTS + 1))
        case = _case(spec, rng, times, j)
        L = float(_evaluate(spec, "running", case.t, case.x, case.mu, case.u, i)[0, 0])
        # terminal reward on the whole path against the terminal law
        xT = PathHistory(case.x.values, times)
        muT = LawHistory(case.mu.values, case.mu.controls, times)
        g = float(np.broadcast_to(np.asarray(spec.terminal(xT, muT), float), (1, 1))[0, 0])
        b_run = _growth_bound(spec, case)
        b_term = _growth_bound(spec, SampleCase(spec.T, xT, muT, case.u))
        ratio = max(ratio, L * L / b_run, g * g / b_term)
        abs_ratio = max(abs_ratio, abs(L) / b_run, abs(g) / b_term)
    return GrowthReport(ratio, abs_ratio, sample_count)
