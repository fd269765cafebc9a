"""Exact finite mean-field control with common noise.

States, actions and common outcomes are finite; the population distribution
is propagated exactly along every common-noise history, so values are sums
over a finite tree with no sampling error.

Transition from ``s`` under action ``a``, population ``nu`` and outcome ``c``::

    P(s' | s, a, nu, c) = (1 - herding) * base[c, a, s, s'] + herding * nu(s')

Running reward ``running[s, a] + running_mf * nu(s)``; terminal reward
``terminal[s] + terminal_mf * nu(s)``.  Rewards are maximised.

Policy tables list one action per slot.  Feedback slots are
(k, history, state), B-strong slots are (k, history); slots are ordered by
time, then history (lexicographic in outcomes), then state, and tables are
enumerated in lexicographic order, so the first maximiser found is the
lexicographically smallest optimal table.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

GUARD = 10**6
NORM_TOL = 1e-12
CHUNK = 1 << 15


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    base: np.ndarray  # (C, A, S, S)
    common_probs: np.ndarray  # (C,)
    running: np.ndarray  # (S, A)
    terminal: np.ndarray  # (S,)
    initial: np.ndarray  # (S,)
    horizon: int
    herding: float = 0.0
    running_mf: float = 0.0
    terminal_mf: float = 0.0

    def __post_init__(self):
        for name in ("base", "common_probs", "running", "terminal", "initial"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        C, A, S, S2 = self.base.shape
        if S != S2 or self.running.shape != (S, A) or self.terminal.shape != (S,) or self.initial.shape != (S,):
            raise ValueError("table shapes disagree")
        if self.common_probs.shape != (C,):
            raise ValueError("one probability per common outcome expected")
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        if not 0.0 <= self.herding <= 1.0:
            raise ValueError("herding weight must lie in [0, 1]")
        for what, arr in (("base transition rows", self.base.sum(-1)), ("common probabilities", self.common_probs.sum()),
                          ("initial distribution", self.initial.sum())):
            if np.any(np.abs(arr - 1.0) > NORM_TOL):
                raise ValueError(f"{what} must sum to 1")
        if np.any(self.base < 0) or np.any(self.common_probs < 0) or np.any(self.initial < 0):
            raise ValueError("probabilities must be nonnegative")

    S = property(lambda self: self.base.shape[2])
    A = property(lambda self: self.base.shape[1])
    C = property(lambda self: self.base.shape[0])

    def with_start(self, initial, horizon) -> "DiscreteProblem":
        return DiscreteProblem(self.base, self.common_probs, self.running, self.terminal, np.asarray(initial),
                               int(horizon), self.herding, self.running_mf, self.terminal_mf)

    def to_json(self) -> dict:
        return {"states": self.S, "actions": self.A, "horizon": self.horizon,
                "common_probs": self.common_probs.tolist(), "base_transition": self.base.tolist(),
                "herding": self.herding, "running": self.running.tolist(), "running_mf": self.running_mf,
                "terminal": self.terminal.tolist(), "terminal_mf": self.terminal_mf,
                "initial": self.initial.tolist()}


def problem_from_json(d) -> DiscreteProblem:
    if isinstance(d, str):
        d = json.loads(d)
    allowed = {"schema", "states", "actions", "horizon", "common_probs", "base_transition", "herding", "running",
               "running_mf", "terminal", "terminal_mf", "initial"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown instance keys: {sorted(unknown)}")
    p = DiscreteProblem(np.array(d["base_transition"], float), np.array(d["common_probs"], float),
                        np.array(d["running"], float), np.array(d["terminal"], float), np.array(d["initial"], float),
                        int(d["horizon"]), float(d.get("herding", 0.0)), float(d.get("running_mf", 0.0)),
                        float(d.get("terminal_mf", 0.0)))
    if ("states" in d and d["states"] != p.S) or ("actions" in d and d["actions"] != p.A):
        raise ValueError("declared sizes disagree with the tables")
    return p


def random_instance(seed: int, S: int = 2, A: int = 2, C: int = 2, K: int = 2, herding=None) -> DiscreteProblem:
    g = np.random.default_rng(seed)
    base = g.dirichlet(np.ones(S), size=(C, A, S))
    probs = g.dirichlet(np.ones(C))
    return DiscreteProblem(base, probs, g.normal(size=(S, A)), g.normal(size=S), g.dirichlet(np.ones(S)), K,
                           float(g.uniform(0, 0.5) if herding is None else herding),
                           float(g.normal()), float(g.normal()))


# ---------------------------------------------------------------------------


def _slot_layout(problem: DiscreteProblem, policy_class: str, K: int):
    """Offsets of each time level; slots per history node."""
    per_node = problem.S if policy_class == "feedback" else 1
    if policy_class not in ("feedback", "bstrong"):
        raise ValueError("policy class must be 'bstrong' or 'feedback'")
    offsets, total = [], 0
    for k in range(K):
        offsets.append(total)
        total += problem.C ** k * per_node
    return offsets, total, per_node


def class_size(problem: DiscreteProblem, policy_class: str, K: int | None = None) -> int:
    K = problem.horizon if K is None else K
    _, slots, _ = _slot_layout(problem, policy_class, K)
    return problem.A ** slots


def _tables(indices: np.ndarray, slots: int, A: int) -> np.ndarray:
    powers = A ** np.arange(slots - 1, -1, -1, dtype=np.int64)
    return (indices[:, None] // powers) % A


class _Tracker:
    def __init__(self):
        self.norm_defect = 0.0

    def see(self, nu):
        self.norm_defect = max(self.norm_defect, float(np.max(np.abs(nu.sum(-1) - 1.0))))


def _step(problem: DiscreteProblem, nu: np.ndarray, acts: np.ndarray, c: int) -> np.ndarray:
    S = problem.S
    rows = problem.base[c][acts, np.arange(S)]  # (P, S, S)
    nxt = (1 - problem.herding) * np.einsum("ps,pst->pt", nu, rows) + problem.herding * nu * nu.sum(-1, keepdims=True)
    return nxt


def _reward(problem: DiscreteProblem, nu: np.ndarray, acts: np.ndarray) -> np.ndarray:
    S = problem.S
    return (nu * (problem.running[np.arange(S), acts] + problem.running_mf * nu)).sum(-1)


def _terminal(problem: DiscreteProblem, nu: np.ndarray) -> np.ndarray:
    return (nu * (problem.terminal + problem.terminal_mf * nu)).sum(-1)


def _actions(tables, offsets, per_node, k, node, S):
    start = offsets[k] + node * per_node
    a = tables[:, start:start + per_node]
    return np.repeat(a, S, axis=1) if per_node == 1 else a


def _evaluate(problem: DiscreteProblem, tables: np.ndarray, policy_class: str, K: int, tracker: _Tracker,
              leaf=None, nu0=None) -> np.ndarray:
    """Values of a batch of tables over K steps; ``leaf(nu)`` replaces the terminal reward at depth K."""
    offsets, _, per_node = _slot_layout(problem, policy_class, K)
    S, C = problem.S, problem.C
    P = tables.shape[0]
    start = np.broadcast_to(problem.initial if nu0 is None else nu0, (P, S)).copy()

    def rec(k, node, nu):
        tracker.see(nu)
        if k == K:
            return _terminal(problem, nu) if leaf is None else leaf(nu)
        acts = _actions(tables, offsets, per_node, k, node, S)
        total = _reward(problem, nu, acts)
        for c in range(C):
            total = total + problem.common_probs[c] * rec(k + 1, node * C + c, _step(problem, nu, acts, c))
        return total

    return rec(0, 0, start)


def _check_guard(count: int):
    if count > GUARD:
        raise ValueError(f"policy class has {count} tables, enumeration guard is {GUARD}")


@dataclass(frozen=True, eq=False)
class ExactResult:
    value: float
    table: np.ndarray
    policy_class: str
    count: int
    norm_defect: float

    def policy_json(self, problem: DiscreteProblem, K: int | None = None) -> list:
        return table_to_json(problem, self.table, self.policy_class, problem.horizon if K is None else K)


def table_to_json(problem: DiscreteProblem, table, policy_class: str, K: int) -> list:
    offsets, _, per_node = _slot_layout(problem, policy_class, K)
    out = []
    for k in range(K):
        for node, hist in enumerate(itertools.product(range(problem.C), repeat=k)):
            for s in range(per_node):
                entry = {"k": k, "history": list(hist), "action": int(table[offsets[k] + node * per_node + s])}
                if policy_class == "feedback":
                    entry["state"] = s
                out.append(entry)
    return out


def all_values(problem: DiscreteProblem, policy_class: str, K: int | None = None, nu0=None,
               tracker: _Tracker | None = None, leaf=None) -> np.ndarray:
    """Value of every table in lexicographic order."""
    K = problem.horizon if K is None else K
    _, slots, _ = _slot_layout(problem, policy_class, K)
    count = problem.A ** slots
    _check_guard(count)
    tracker = tracker or _Tracker()
    out = np.empty(count)
    for a in range(0, count, CHUNK):
        idx = np.arange(a, min(a + CHUNK, count), dtype=np.int64)
        out[a:a + idx.size] = _evaluate(problem, _tables(idx, slots, problem.A), policy_class, K, tracker, leaf, nu0)
    return out


def exact_value(problem: DiscreteProblem, policy_class: str = "feedback") -> ExactResult:
    """Maximum over the whole table class by exhaustive enumeration."""
    tracker = _Tracker()
    vals = all_values(problem, policy_class, tracker=tracker)
    i = int(np.argmax(vals))
    _, slots, _ = _slot_layout(problem, policy_class, problem.horizon)
    return ExactResult(float(vals[i]), _tables(np.array([i]), slots, problem.A)[0], policy_class, vals.size,
                       tracker.norm_defect)


@dataclass(frozen=True)
class DppCertificate:
    value: float
    rhs: float
    defect: float
    concatenation_defect: float
    concatenation_ok: bool
    norm_defect: float
    split: int
    policy_class: str
    policy: tuple
    tables_checked: int

    @property
    def ok(self) -> bool:
        return self.defect < 1e-12 and self.concatenation_ok and self.norm_defect < NORM_TOL

    def to_json(self) -> dict:
        return {"value": self.value, "rhs": self.rhs, "defect": self.defect,
                "concatenation_defect": self.concatenation_defect, "concatenation_ok": self.concatenation_ok,
                "norm_defect": self.norm_defect, "split": self.split, "policy_class": self.policy_class,
                "policy": list(self.policy), "tables_checked": self.tables_checked, "ok": self.ok}


def verify_dpp_exact(problem: DiscreteProblem, split: int, policy_class: str = "feedback") -> DppCertificate:
    """Exact DPP at an intermediate step.

    lhs: best full table.  rhs: best head table (steps before ``split``) with
    each history continued by the value restarted from its distribution.  The
    concatenation check compares, for every head, the best full table sharing
    that head with the head spliced onto the optimal continuations.
    """
    K = problem.horizon
    if not 0 < split <= K:
        raise ValueError("split must satisfy 0 < split <= horizon")
    tracker = _Tracker()
    full = all_values(problem, policy_class, tracker=tracker)
    best = int(np.argmax(full))
    _, slots, _ = _slot_layout(problem, policy_class, K)
    table = tuple(int(a) for a in _tables(np.array([best]), slots, problem.A)[0])
    lhs = float(full[best])
    if split == K:
        return DppCertificate(lhs, lhs, 0.0, 0.0, True, tracker.norm_defect, split, policy_class, table, full.size)

    memo: dict = {}

    def tail_value(nu_row):
        key = nu_row.tobytes()
        if key not in memo:
            memo[key] = float(np.max(all_values(problem, policy_class, K - split, nu0=nu_row, tracker=tracker)))
        return memo[key]

    def leaf(nu):
        return np.array([tail_value(row) for row in nu])

    head = all_values(problem, policy_class, split, tracker=tracker, leaf=leaf)
    rhs = float(np.max(head))
    # head slots come first in the ordering, so full values reshape to (heads, tails)
    per_head = full.reshape(head.size, -1).max(axis=1)
    concat = float(np.max(np.abs(per_head - head)))
    shortfall = float(np.max(per_head - head))
    return DppCertificate(lhs, rhs, abs(lhs - rhs), concat, shortfall < 1e-12, tracker.norm_defect, split,
                          policy_class, table, full.size)
