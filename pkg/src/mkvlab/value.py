"""Reward functional estimation and derivative-free search over policy families."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .measures import EmpiricalMeasure
from .policies import FamilySearch
from .problems.spec import InitialDraw, InitialLaw, LawHistory, PathAtoms, PathHistory, ProblemSpec, from_measure
from .simulator import NoiseBank, ParticleEnsemble, TimeGrid, simulate


@dataclass(frozen=True)
class ValueEstimate:
    """Mean of the reward functional (raw, not sign-adjusted) and its standard error."""

    mean: float
    std_error: float
    M: int
    N: int
    steps: int
    seed: int
    se_level: str = "scenario"

    def score(self, sign: float) -> float:
        return sign * self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "M": self.M, "N": self.N, "steps": self.steps,
                "seed": self.seed, "se_level": self.se_level}


def reward_paths(spec: ProblemSpec, ens: ParticleEnsemble):
    """Per-particle running rewards L_k (K, M, N) and terminal reward (M, N)."""
    K, M, N = ens.grid.steps, ens.M, ens.N
    pts = ens.grid.points
    running = np.empty((K, M, N))
    for k in range(K):
        law = ens.law(k)
        x = ens.path_history(k)
        running[k] = np.broadcast_to(spec.running(float(pts[k]), x, law, ens.controls[k]), (M, N))
    terminal = np.broadcast_to(spec.terminal(ens.path_history(K), ens.law(K)), (M, N)).astype(float)
    return running, terminal


def particle_totals(spec: ProblemSpec, ens: ParticleEnsemble) -> np.ndarray:
    running, terminal = reward_paths(spec, ens)
    return ens.grid.dt * running.sum(axis=0) + terminal


def summarize(totals: np.ndarray, pooled: bool, M: int, N: int, steps: int, seed: int,
              scenario_values: np.ndarray | None = None) -> ValueEstimate:
    """Mean of scenario means; scenarios are the independent units unless pooled."""
    sv = totals.mean(axis=1) if scenario_values is None else scenario_values
    mean = float(sv.mean())
    if pooled or M < 2:
        flat = totals.reshape(-1)
        se = float(flat.std(ddof=1) / np.sqrt(flat.size)) if flat.size > 1 else 0.0
        level = "particle"
    else:
        se = float(sv.std(ddof=1) / np.sqrt(M))
        level = "scenario"
    return ValueEstimate(mean, se, M, N, steps, seed, level)


def estimate_J(spec: ProblemSpec, policy, grid: TimeGrid, M: int, N: int, seed: int, *,
               noise: NoiseBank | None = None, initial: InitialLaw | InitialDraw | None = None,
               threads: int = 1, return_ensemble: bool = False):
    """Left-endpoint quadrature of the running reward plus the terminal reward."""
    ens = simulate(spec, policy, grid, M, N, seed, noise=noise, initial=initial, threads=threads)
    est = summarize(particle_totals(spec, ens), ens.pooled, M, N, grid.steps, seed)
    return (est, ens) if return_ensemble else est


@dataclass(frozen=True)
class TraceEntry:
    index: int
    params: tuple
    mean: float
    std_error: float
    stage: str


@dataclass(frozen=True, eq=False)
class SearchResult:
    policy: object
    estimate: ValueEstimate
    trace: tuple
    best_effort: bool = False
    evaluations: int = 0
    extra: dict = field(default_factory=dict)

    def trace_to_csv(self, path) -> None:
        write_trace(self.trace, path)

    def to_json(self) -> dict:
        return {"policy": self.policy.to_json(), "estimate": self.estimate.to_json(),
                "best_effort": self.best_effort, "evaluations": self.evaluations}


def write_trace(trace, path) -> None:
    width = max((len(e.params) for e in trace), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["index"] + [f"p{i + 1}" for i in range(width)] + ["mean", "std_error", "stage"])
        for e in trace:
            w.writerow([e.index] + [repr(float(p)) for p in e.params] + [repr(e.mean), repr(e.std_error), e.stage])


def search(objective, search_space: FamilySearch, sign: float):
    """Coarse tensor grid, then coordinate refinement around the incumbent.

    ``objective(params) -> ValueEstimate``.  Larger ``sign * mean`` wins; only
    strict improvements move the incumbent, so ties go to the lowest index.
    Returns (best params, best estimate, trace, best_effort, evaluation count).
    """
    budget = search_space.budget
    cache: dict = {}
    trace: list = []
    state = {"best_effort": False}

    def run(params, stage):
        key = tuple(float(p) for p in params)
        if key in cache:
            return cache[key]
        if budget is not None and len(cache) >= budget:
            state["best_effort"] = True
            return None
        est = objective(np.array(key))
        cache[key] = est
        trace.append(TraceEntry(len(trace), key, est.mean, est.std_error, stage))
        return est

    best_p, best = None, None
    for p in search_space.grid():
        est = run(p, "grid")
        if est is None:
            break
        if best is None or sign * est.mean > sign * best.mean:
            best_p, best = tuple(float(v) for v in p), est
    if best is None:
        raise RuntimeError("search budget allows no evaluation")
    widths = search_space.cell_widths()
    lo = np.array([b[0] for b in search_space.bounds])
    hi = np.array([b[1] for b in search_space.bounds])
    for level in range(1, search_space.refine_levels + 1):
        if state["best_effort"]:
            break
        h = widths / 2 ** level
        for i in np.flatnonzero(h > 0):
            for direction in (-1.0, 1.0):
                cand = np.array(best_p)
                cand[i] = np.clip(cand[i] + direction * h[i], lo[i], hi[i])
                est = run(cand, f"refine-{level}")
                if est is None:
                    break
                if sign * est.mean > sign * best.mean:
                    best_p, best = tuple(float(v) for v in cand), est
    return best_p, best, tuple(trace), state["best_effort"], len(cache)


def optimize_value(spec: ProblemSpec, family_search: FamilySearch, grid: TimeGrid, M: int, N: int, seed: int, *,
                   initial: InitialLaw | InitialDraw | None = None, threads: int = 1,
                   noise: NoiseBank | None = None) -> SearchResult:
    """Best policy of the family under common random numbers (one noise bank for all candidates)."""
    pooled = spec.ell == 0
    if noise is None:
        noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=pooled,
                                   aux=family_search.template.needs_aux, threads=threads)
    if not isinstance(initial, InitialDraw):
        initial = (initial or spec.initial).sample(seed, M, N, grid.t_start, pooled, threads)

    def objective(params):
        return estimate_J(spec, family_search.policy(params), grid, M, N, seed, noise=noise, initial=initial)

    p, est, trace, best_effort, count = search(objective, family_search, spec.sign)
    return SearchResult(family_search.policy(p), est, trace, best_effort, count)


def _grid_for(t_start: float, T: float, dt: float) -> TimeGrid:
    steps = max(1, int(round((T - t_start) / dt)))
    return TimeGrid(t_start, T, steps)


def terminal_value(spec: ProblemSpec, atoms: np.ndarray, t: float | None = None) -> float:
    """Mean of g over equally weighted atoms (P, n) treated as one population."""
    atoms = np.asarray(atoms, float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    t = spec.T if t is None else t
    vals = atoms[None, None]  # (1 time, 1 group, P, n)
    x = PathHistory(vals, np.array([t]))
    law = LawHistory(vals, np.zeros((1, atoms.shape[0], spec.m)), np.array([t]))
    g = np.broadcast_to(spec.terminal(x, law), (1, atoms.shape[0]))
    return float(g.mean())


@dataclass(frozen=True)
class RestartBudget:
    """Simulation budget for a value restarted from a measure."""

    M: int
    N: int
    dt: float
    seed: int = 0


def value_at_measure(spec: ProblemSpec, t_start: float, initial, family_search: FamilySearch,
                     budget: RestartBudget, threads: int = 1) -> SearchResult:
    """Optimise on [t_start, T] from states resampled from ``initial``.

    ``initial`` is an EmpiricalMeasure over R^n or a PathAtoms law.  At
    t_start = T the value is the atom average of g (no dynamics, zero error)
    when the atoms carry equal weights.
    """
    if isinstance(initial, EmpiricalMeasure):
        if initial.points.shape[0] == 0:
            raise ValueError("empty restart measure")
        law = from_measure(initial)
    elif isinstance(initial, PathAtoms):
        law = initial
    else:
        raise TypeError("restart measure must be an EmpiricalMeasure or PathAtoms")
    if t_start >= spec.T - 1e-12:
        w = law.weights
        if np.allclose(w, w[0], rtol=0, atol=1e-15):
            v = terminal_value(spec, law.atoms[-1], spec.T)
            est = ValueEstimate(v, 0.0, 1, law.atoms.shape[1], 0, budget.seed, "exact")
        else:
            draw = law.sample(budget.seed, budget.M, budget.N, spec.T, spec.ell == 0, threads)
            sv = np.array([terminal_value(spec, draw.paths[-1, j]) for j in range(budget.M)])
            est = summarize(sv[:, None], False, budget.M, budget.N, 0, budget.seed, sv)
        return SearchResult(family_search.template, est, (), False, 0)
    grid = _grid_for(t_start, spec.T, budget.dt)
    return optimize_value(spec.with_initial(law), family_search, grid, budget.M, budget.N, budget.seed,
                          threads=threads)
