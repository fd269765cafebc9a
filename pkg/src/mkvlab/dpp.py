"""Numerical checks of the dynamic programming equality and its companions.

Gaps are reported in score units (``sign * value``, larger is better), so a
positive gap always means the right-hand side fell short of the left.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .measures import EmpiricalMeasure, empirical_from_points, wasserstein2
from .policies import FamilySearch, Policy, SplicedPolicy
from .problems.spec import Explicit, PathAtoms, ProblemSpec
from .problems.updating import UpdatingFunction, apply_updating
from .simulator import NoiseBank, TimeGrid, simulate
from .value import (RestartBudget, SearchResult, ValueEstimate, estimate_J, optimize_value, reward_paths, search,
                    summarize, value_at_measure)

SE_FLOOR = 1e-15
_INNER_TAG = 0x1A7E
_RESTART_TAG = 0x2E57


@dataclass(frozen=True)
class StoppingRule:
    """Deterministic time, or first grid time a conditional moment crosses a threshold (capped at ``cap``)."""

    kind: str = "deterministic"
    time: float | None = None
    functional: str = "mean"
    threshold: float = 0.0
    direction: str = "up"
    coordinate: int = 0
    cap: float | None = None

    def __post_init__(self):
        if self.kind not in ("deterministic", "hitting"):
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if self.kind == "deterministic" and self.time is None:
            raise ValueError("deterministic stopping rule needs a time")
        if self.functional not in ("mean", "second-moment"):
            raise ValueError("functional must be 'mean' or 'second-moment'")
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")

    def indices(self, states: np.ndarray, grid: TimeGrid, pooled: bool = False) -> np.ndarray:
        """Grid index of the stopping time per scenario; ``states`` is (K+1, M, N, n)."""
        K, M = grid.steps, states.shape[1]
        if self.kind == "deterministic":
            j = grid.index_of(self.time)
            if j < 1:
                raise ValueError("stopping time must lie after the start")
            return np.full(1 if pooled else M, j)
        x = states[..., self.coordinate]
        if pooled:
            x = x.reshape(K + 1, 1, -1)
        stat = x.mean(axis=2) if self.functional == "mean" else (x * x).mean(axis=2)
        hit = stat >= self.threshold if self.direction == "up" else stat <= self.threshold
        hit[0] = False
        last = K if self.cap is None else grid.index_of(self.cap)
        hit[last:] = True
        return np.argmax(hit, axis=0)

    def to_json(self) -> dict:
        if self.kind == "deterministic":
            return {"kind": self.kind, "time": self.time}
        out = {"kind": self.kind, "functional": self.functional, "threshold": self.threshold,
               "direction": self.direction, "coordinate": self.coordinate}
        if self.cap is not None:
            out["cap"] = self.cap
        return out


def stopping_from_json(d: dict) -> StoppingRule:
    return StoppingRule(**d)


@dataclass(frozen=True)
class InnerBudget:
    """Restart simulations per scenario; ``search`` overrides the family used after the stop."""

    M: int
    N: int
    search: FamilySearch | None = None


@dataclass(frozen=True, eq=False)
class DppReport:
    lhs: ValueEstimate
    rhs: ValueEstimate
    gap: float
    gap_se: float
    label: str
    sign: float
    lhs_policy: Policy
    rhs_policy: Policy
    per_scenario: tuple
    stopping: StoppingRule
    seed: int
    budgets: dict
    partial: bool = False
    retried: bool = False

    @property
    def consistent(self) -> bool:
        return abs(self.gap) <= 3 * self.gap_se

    def to_json(self) -> dict:
        return {
            "lhs": self.lhs.to_json(), "rhs": self.rhs.to_json(), "gap": self.gap, "gap_se": self.gap_se,
            "consistent": self.consistent, "label": self.label, "sign": self.sign,
            "lhs_policy": self.lhs_policy.to_json(), "rhs_policy": self.rhs_policy.to_json(),
            "stopping": self.stopping.to_json(), "seed": self.seed, "budgets": self.budgets,
            "partial": self.partial, "retried": self.retried,
            "per_scenario": [dict(r) for r in self.per_scenario],
        }

    def scenarios_to_csv(self, path) -> None:
        cols = ["scenario", "tau", "running", "inner_mean", "inner_se", "total"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(cols)
            for r in self.per_scenario:
                w.writerow([r["scenario"], repr(r["tau"]), repr(r["running"]), repr(r["inner_mean"]),
                            repr(r["inner_se"]), repr(r["total"])])


class _RhsObjective:
    """sum of running reward up to tau plus the restarted value, per scenario."""

    def __init__(self, spec, outer_search, inner_search, stopping, grid, M, N, inner, seed, noise, draw, threads):
        self.spec, self.outer_search, self.inner_search = spec, outer_search, inner_search
        self.stopping, self.grid, self.M, self.N = stopping, grid, M, N
        self.inner, self.seed, self.noise, self.draw, self.threads = inner, seed, noise, draw, threads
        self.rows: dict = {}
        self.partial = False
        self._inner_cache: dict = {}

    def _inner_value(self, j, tau_idx, atoms):
        key = (j, tau_idx, atoms.tobytes())
        if key not in self._inner_cache:
            t = float(self.grid.points[tau_idx])
            budget = RestartBudget(self.inner.M, self.inner.N, self.grid.dt, rng.derive_seed(self.seed, _INNER_TAG, j))
            res = value_at_measure(self.spec, t, empirical_from_points(atoms), self.inner_search, budget,
                                   threads=self.threads)
            self.partial |= res.best_effort
            self._inner_cache[key] = res.estimate
        return self._inner_cache[key]

    def __call__(self, params) -> ValueEstimate:
        spec, grid = self.spec, self.grid
        ens = simulate(spec, self.outer_search.policy(params), grid, self.M, self.N, self.seed,
                       noise=self.noise, initial=self.draw)
        running, _ = reward_paths(spec, ens)
        pooled = ens.pooled
        taus = self.stopping.indices(ens.states, grid, pooled)
        csum = np.concatenate([np.zeros((1,) + running.shape[1:]), np.cumsum(running, axis=0)]) * grid.dt
        rows, vals, run_parts, inner_ses = [], [], [], []
        groups = 1 if pooled else self.M
        for j in range(groups):
            k = int(taus[j])
            if pooled:
                run_j = csum[k].reshape(-1)
                atoms = ens.states[k].reshape(-1, spec.n)
            else:
                run_j = csum[k, j]
                atoms = ens.states[k, j]
            inner = self._inner_value(j, k, np.ascontiguousarray(atoms))
            r = float(run_j.mean())
            total = r + inner.mean
            rows.append({"scenario": j, "tau": float(grid.points[k]), "running": r, "inner_mean": inner.mean,
                         "inner_se": inner.std_error, "total": total})
            vals.append(total)
            run_parts.append(run_j)
            inner_ses.append(inner.std_error)
        vals = np.array(vals)
        if pooled:
            flat = run_parts[0]
            se = float(np.sqrt(flat.var(ddof=1) / flat.size + inner_ses[0] ** 2))
            est = ValueEstimate(float(vals.mean()), se, self.M, self.N, grid.steps, self.seed, "particle")
        else:
            est = summarize(vals[:, None], False, self.M, self.N, grid.steps, self.seed, vals)
        self.rows[tuple(float(p) for p in params)] = tuple(rows)
        return est


def _label(gap, gap_se):
    if abs(gap) <= 3 * gap_se:
        return "consistent"
    return "family-limited" if gap > 0 else "violation"


def check_dpp(spec: ProblemSpec, family_search: FamilySearch, stopping: StoppingRule, grid: TimeGrid, M: int, N: int,
              inner_budget: InnerBudget, seed: int, *, outer_search: FamilySearch | None = None,
              threads: int = 1, retry: bool = True) -> DppReport:
    """Compare V(t, nu) with sup over outer policies of E[running reward to tau + V(tau, mu_tau)].

    Both sides share the outer noise; restarts use one fresh seed per scenario
    that is shared by all outer candidates.  A gap above three standard errors
    triggers one retry with the outer grid refined once.
    """
    outer_search = outer_search or family_search
    inner_search = inner_budget.search or family_search
    pooled = spec.ell == 0
    aux = family_search.template.needs_aux or outer_search.template.needs_aux or inner_search.template.needs_aux
    noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=pooled, aux=aux, threads=threads)
    draw = spec.initial.sample(seed, M, N, grid.t_start, pooled, threads)
    lhs = optimize_value(spec, family_search, grid, M, N, seed, noise=noise, initial=draw)
    sign = spec.sign

    def rhs_for(space):
        obj = _RhsObjective(spec, space, inner_search, stopping, grid, M, N, inner_budget, seed, noise, draw, threads)
        p, est, _, best_effort, _ = search(obj, space, sign)
        return p, est, obj.rows[p], best_effort or obj.partial, space

    p, rhs, rows, partial, used = rhs_for(outer_search)
    gap = sign * (lhs.estimate.mean - rhs.mean)
    gap_se = max(float(np.hypot(lhs.estimate.std_error, rhs.std_error)), SE_FLOOR)
    retried = False
    if retry and gap > 3 * gap_se:
        retried = True
        p2, rhs2, rows2, partial2, used2 = rhs_for(outer_search.refined())
        if sign * rhs2.mean > sign * rhs.mean:
            p, rhs, rows, partial, used = p2, rhs2, rows2, partial2, used2
        gap = sign * (lhs.estimate.mean - rhs.mean)
        gap_se = max(float(np.hypot(lhs.estimate.std_error, rhs.std_error)), SE_FLOOR)
    budgets = {"M": M, "N": N, "steps": grid.steps, "inner_M": inner_budget.M, "inner_N": inner_budget.N,
               "lhs_evaluations": lhs.evaluations}
    return DppReport(lhs.estimate, rhs, float(gap), gap_se, _label(gap, gap_se), sign, lhs.policy, used.policy(p),
                     rows, stopping, seed, budgets, partial or lhs.best_effort, retried)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OrderingReport:
    labels: tuple
    estimates: tuple
    policies: tuple
    sign: float
    monotone: bool
    collapse_gap: float
    collapse_se: float

    @property
    def collapsed(self) -> bool:
        return abs(self.collapse_gap) <= 3 * self.collapse_se

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "estimates": [e.to_json() for e in self.estimates],
                "policies": [p.to_json() for p in self.policies], "sign": self.sign, "monotone": self.monotone,
                "collapse_gap": self.collapse_gap, "collapse_se": self.collapse_se, "collapsed": self.collapsed}


def check_ordering(spec: ProblemSpec, families, grid: TimeGrid, M: int, N: int, seed: int,
                   labels=("bstrong", "strong", "weak"), threads: int = 1) -> OrderingReport:
    """Grid incumbents of nested families under one noise bank.

    Only the tensor grids are searched (no local refinement), so nested grids
    give exactly monotone incumbents for a fixed seed.
    """
    families = [replace(f, refine_levels=0) for f in families]
    pooled = spec.ell == 0
    aux = any(f.template.needs_aux for f in families)
    noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=pooled, aux=aux, threads=threads)
    draw = spec.initial.sample(seed, M, N, grid.t_start, pooled, threads)
    results = [optimize_value(spec, f, grid, M, N, seed, noise=noise, initial=draw) for f in families]
    scores = [spec.sign * r.estimate.mean for r in results]
    monotone = all(a <= b for a, b in zip(scores, scores[1:]))
    if len(results) >= 2:
        a, b = results[-2].estimate, results[-1].estimate
        cgap, cse = spec.sign * (b.mean - a.mean), max(float(np.hypot(a.std_error, b.std_error)), SE_FLOOR)
    else:
        cgap, cse = 0.0, SE_FLOOR
    labels = tuple(labels[: len(results)]) if len(labels) >= len(results) else tuple(f"family-{i}" for i in range(len(results)))
    return OrderingReport(labels, tuple(r.estimate for r in results), tuple(r.policy for r in results),
                          spec.sign, monotone, float(cgap), cse)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MarkovReport:
    first: ValueEstimate
    second: ValueEstimate
    difference: float
    combined_se: float
    pushforward_w2: float

    @property
    def agree(self) -> bool:
        return abs(self.difference) <= 3 * self.combined_se

    def to_json(self) -> dict:
        return {"first": self.first.to_json(), "second": self.second.to_json(), "difference": self.difference,
                "combined_se": self.combined_se, "pushforward_w2": self.pushforward_w2, "agree": self.agree}


def summary_measure(phi: UpdatingFunction, law: PathAtoms, t: float = 0.0) -> EmpiricalMeasure:
    """Pushforward of a path-atom law under the summary at the start time."""
    times = t + np.asarray(law.offsets, float)
    z = apply_updating(phi, times, law.atoms)[-1]
    return empirical_from_points(z, law.weights)


def check_markov_reduction(spec: ProblemSpec, phi: UpdatingFunction, nu1: PathAtoms, nu2: PathAtoms,
                           family_search: FamilySearch, grid: TimeGrid, M: int, N: int, seed: int,
                           threads: int = 1) -> MarkovReport:
    """Values from two initial path laws with equal summary pushforward."""
    w2 = wasserstein2(summary_measure(phi, nu1, grid.t_start), summary_measure(phi, nu2, grid.t_start))
    if w2 >= 1e-9:
        raise ValueError(f"initial laws have different summary pushforwards (W2 = {w2:.3e})")
    tpl = family_search.template
    if getattr(tpl, "phi", None) is None and tpl.info_class == "feedback":
        family_search = family_search.with_template(replace(tpl, phi=phi))
    r1 = optimize_value(spec.with_initial(nu1), family_search, grid, M, N, seed, threads=threads)
    r2 = optimize_value(spec.with_initial(nu2), family_search, grid, M, N, seed, threads=threads)
    diff = spec.sign * (r1.estimate.mean - r2.estimate.mean)
    se = max(float(np.hypot(r1.estimate.std_error, r2.estimate.std_error)), SE_FLOOR)
    return MarkovReport(r1.estimate, r2.estimate, float(diff), se, float(w2))


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RestartReport:
    full: ValueEstimate
    restarted: ValueEstimate
    mean_difference: float
    difference_se: float
    state_w2: float
    reward_w2: float
    threshold: float

    @property
    def means_agree(self) -> bool:
        return abs(self.mean_difference) <= 3 * self.difference_se

    @property
    def ok(self) -> bool:
        return self.means_agree and self.state_w2 < self.threshold

    def to_json(self) -> dict:
        return {"full": self.full.to_json(), "restarted": self.restarted.to_json(),
                "mean_difference": self.mean_difference, "difference_se": self.difference_se,
                "state_w2": self.state_w2, "reward_w2": self.reward_w2, "threshold": self.threshold,
                "means_agree": self.means_agree, "ok": self.ok}


def _reward_to_go(spec, ens, k0):
    running, terminal = reward_paths(spec, ens)
    return ens.grid.dt * running[k0:].sum(axis=0) + terminal


def check_conditioning_restart(spec: ProblemSpec, policy, tau0: float, grid: TimeGrid, M: int, N: int, seed: int,
                               threads: int = 1) -> RestartReport:
    """Continue past tau0 versus restart at tau0 from the realised per-scenario populations.

    The restart keeps each scenario's common-noise path (it conditions on it)
    and its particle paths up to tau0, and draws fresh idiosyncratic noise.
    """
    if policy.info_class != "feedback":
        raise ValueError("restart comparison needs a feedback policy")
    full = simulate(spec, policy, grid, M, N, seed, threads=threads)
    k0 = grid.index_of(tau0)
    if not 0 < k0 < grid.steps:
        raise ValueError("tau0 must be an interior grid time")
    H = full.history_len
    _, tail = grid.split(tau0)
    hist = full.paths[: H + k0 + 1]
    init = Explicit(full.times[: H + k0 + 1] - tau0, np.array(hist))
    fresh = rng.derive_seed(seed, _RESTART_TAG)
    bank = NoiseBank.generate(fresh, tail, M, N, spec.d, spec.ell, pooled=full.pooled,
                              aux=getattr(policy, "needs_aux", False), threads=threads)
    bank = replace(bank, common=full.common_noise[k0:])
    restarted = simulate(spec, policy, tail, M, N, fresh, noise=bank, initial=init, threads=threads)
    a = _reward_to_go(spec, full, k0)
    b = _reward_to_go(spec, restarted, 0)
    pooled = full.pooled
    ea = summarize(a, pooled, M, N, grid.steps - k0, seed)
    eb = summarize(b, pooled, M, N, tail.steps, fresh)
    if pooled or M < 2:
        d = (a - b).reshape(-1)
    else:
        d = (a - b).mean(axis=1)
    diff = float(d.mean())
    se = max(float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0, SE_FLOOR)
    xs_a = full.states[-1].reshape(-1, spec.n)
    xs_b = restarted.states[-1].reshape(-1, spec.n)
    state_w2 = _pooled_w2(xs_a, xs_b)
    reward_w2 = _pooled_w2(a.reshape(-1, 1), b.reshape(-1, 1))
    return RestartReport(ea, eb, diff, se, state_w2, reward_w2, 5.0 / np.sqrt(M * N))


def _pooled_w2(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[1] == 1:
        return float(np.sqrt(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2)))
    return wasserstein2(empirical_from_points(a), empirical_from_points(b))


@dataclass(frozen=True, eq=False)
class ConcatenationReport:
    base: ValueEstimate
    spliced: ValueEstimate
    improvement: float
    combined_se: float
    continuation: Policy

    @property
    def ok(self) -> bool:
        return self.improvement >= -3 * self.combined_se

    def to_json(self) -> dict:
        return {"base": self.base.to_json(), "spliced": self.spliced.to_json(), "improvement": self.improvement,
                "combined_se": self.combined_se, "continuation": self.continuation.to_json(), "ok": self.ok}


def check_concatenation(spec: ProblemSpec, outer_policy, continuation_search: FamilySearch, tau0: float,
                        grid: TimeGrid, M: int, N: int, seed: int, threads: int = 1) -> ConcatenationReport:
    """Replacing the tail after tau0 by the best continuation should not lower the value."""
    grid.index_of(tau0)
    aux = getattr(outer_policy, "needs_aux", False) or continuation_search.template.needs_aux
    noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=spec.ell == 0, aux=aux, threads=threads)
    draw = spec.initial.sample(seed, M, N, grid.t_start, spec.ell == 0, threads)
    base = estimate_J(spec, outer_policy, grid, M, N, seed, noise=noise, initial=draw)

    def objective(params):
        pol = SplicedPolicy(outer_policy, continuation_search.policy(params), tau0)
        return estimate_J(spec, pol, grid, M, N, seed, noise=noise, initial=draw)

    p, best, _, _, _ = search(objective, continuation_search, spec.sign)
    imp = spec.sign * (best.mean - base.mean)
    se = max(float(np.hypot(base.std_error, best.std_error)), SE_FLOOR)
    return ConcatenationReport(base, best, float(imp), se, continuation_search.policy(p))
