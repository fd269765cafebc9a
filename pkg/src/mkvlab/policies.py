"""Control rules grouped by information class.

Three classes are distinguished by what a rule may read at step k:

* ``bstrong``  time, the common-noise path and conditional-law statistics;
* ``strong``   additionally the particle's initial state, its own
  idiosyncratic noise and (as a functional of those) its current state;
* ``feedback`` time, the updating-function summary of the own path and
  conditional-law statistics.

Everything exposed at step k is known at t_k; the increments of step k are
never visible (predictability).  Randomised rules add an independent uniform
per particle and step, which is how extra randomisation of weak controls is
realised.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .problems.spec import Box, box
from .problems.updating import UpdatingFunction, apply_updating

INFO_CLASSES = ("bstrong", "strong", "feedback")
FAMILIES = ("constant", "piecewise-constant", "linear-feedback", "table", "scheduled-feedback")
GRID_LIMIT = 10**6


@dataclass(frozen=True)
class StepInfo:
    """Everything known at one grid time, batched over all particles."""

    t: float
    step: int
    state: np.ndarray  # (M, N, n)
    summary: np.ndarray  # (M, N, E)
    slice_mean: np.ndarray  # (G, 1, n)
    slice_var: np.ndarray  # (G, 1, n)
    common_level: np.ndarray  # (M, 1, ell), B_t - B_start
    idio_level: np.ndarray  # (M, N, d), W_t - W_start
    initial: np.ndarray  # (M, N, n)
    aux: np.ndarray | None = None  # (M, N) uniforms


@dataclass(frozen=True)
class BStrongView:
    t: float
    step: int
    common_level: np.ndarray
    slice_mean: np.ndarray
    slice_var: np.ndarray
    aux: np.ndarray | None = None
    common_increments: np.ndarray | None = None


@dataclass(frozen=True)
class StrongView:
    t: float
    step: int
    initial: np.ndarray
    idio_level: np.ndarray
    common_level: np.ndarray
    state: np.ndarray
    slice_mean: np.ndarray
    slice_var: np.ndarray
    aux: np.ndarray | None = None
    idio_increments: np.ndarray | None = None
    common_increments: np.ndarray | None = None


@dataclass(frozen=True)
class FeedbackView:
    t: float
    step: int
    summary: np.ndarray
    slice_mean: np.ndarray
    slice_var: np.ndarray
    aux: np.ndarray | None = None


def restrict(info: StepInfo, info_class: str):
    if info_class == "bstrong":
        return BStrongView(info.t, info.step, info.common_level, info.slice_mean, info.slice_var, info.aux)
    if info_class == "strong":
        return StrongView(info.t, info.step, info.initial, info.idio_level, info.common_level, info.state,
                          info.slice_mean, info.slice_var, info.aux)
    if info_class == "feedback":
        return FeedbackView(info.t, info.step, info.summary, info.slice_mean, info.slice_var, info.aux)
    raise ValueError(f"unknown information class {info_class!r}")


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def info_views(ensemble, policy_class: str, scenario: int, particle: int, step: int, phi: UpdatingFunction | None = None):
    """Single-particle view at ``step`` holding copies of class-permitted data only."""
    K = ensemble.grid.steps
    if not (0 <= scenario < ensemble.M and 0 <= particle < ensemble.N and 0 <= step <= K):
        raise IndexError("view indices out of range")
    t = float(ensemble.grid.points[step])
    xs = ensemble.states[step, scenario]
    mean = xs.mean(axis=0)
    var = ((xs - mean) ** 2).mean(axis=0)
    dB = ensemble.common_noise[:step, scenario]
    common_level = dB.sum(axis=0)
    if policy_class == "bstrong":
        return BStrongView(t, step, _frozen(common_level), _frozen(mean), _frozen(var),
                           common_increments=_frozen(dB))
    if policy_class == "strong":
        dW = ensemble.idio_noise[:step, scenario, particle]
        return StrongView(t, step, _frozen(ensemble.states[0, scenario, particle]), _frozen(dW.sum(axis=0)),
                          _frozen(common_level), _frozen(ensemble.states[step, scenario, particle]),
                          _frozen(mean), _frozen(var), idio_increments=_frozen(dW), common_increments=_frozen(dB))
    if policy_class == "feedback":
        phi = phi or UpdatingFunction("running-state", ensemble.n)
        H = ensemble.history_len
        path = ensemble.paths[: H + step + 1, scenario, particle]
        summary = apply_updating(phi, ensemble.times[: H + step + 1], path)[-1]
        return FeedbackView(t, step, _frozen(summary), _frozen(mean), _frozen(var))
    raise ValueError(f"unknown information class {policy_class!r}")


@dataclass(frozen=True, eq=False)
class Policy:
    """A parameterised control rule; outputs are always clipped into ``clip``."""

    info_class: str
    family: str
    params: tuple
    clip: Box
    randomized: bool = False
    time_range: tuple | None = None  # piecewise-constant / table time bins
    bins: int = 1  # piecewise-constant / table time bin count
    edges: tuple = ()  # table feature bin edges
    schedule: tuple | None = None  # (times, gains (S, 2)) for scheduled-feedback
    phi: UpdatingFunction | None = None
    name: str = ""

    def __post_init__(self):
        if self.info_class not in INFO_CLASSES:
            raise ValueError(f"unknown information class {self.info_class!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown policy family {self.family!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in np.ravel(self.params)))
        if self.family == "scheduled-feedback" and self.info_class == "bstrong" and self.params[1] != 0.0:
            raise ValueError("a bstrong scheduled rule cannot react to the particle state (k1 must be 0)")

    # -- parameter layout --------------------------------------------------
    def _n_features(self, n: int, ell: int) -> int:
        if self.info_class == "bstrong":
            return max(ell, 1)
        if self.info_class == "feedback" and self.phi is not None:
            return self.phi.E_dim
        return n

    def param_count(self, n: int, ell: int) -> int:
        m = self.clip.dim
        base = {
            "constant": m,
            "piecewise-constant": self.bins * m,
            "linear-feedback": m + m * self._n_features(n, ell) + m * n,
            "table": self.bins * (len(self.edges) + 1) * m,
            "scheduled-feedback": 3,
        }[self.family]
        return base + (m if self.randomized else 0)

    def check(self, n: int, ell: int):
        need = self.param_count(n, ell)
        if len(self.params) != need:
            raise ValueError(f"{self.family} policy expects {need} parameters, got {len(self.params)}")
        if self.family == "scheduled-feedback" and (n != 1 or self.clip.dim != 1):
            raise ValueError("scheduled-feedback supports scalar state and control only")

    @property
    def needs_aux(self) -> bool:
        return self.randomized

    def with_params(self, params) -> "Policy":
        return replace(self, params=tuple(float(p) for p in np.ravel(params)))

    # -- evaluation --------------------------------------------------------
    def _primary(self, view):
        if isinstance(view, BStrongView):
            return view.common_level
        if isinstance(view, StrongView):
            return view.state
        return view.summary

    def _time_bin(self, t: float) -> int:
        t0, t1 = self.time_range if self.time_range is not None else (0.0, 1.0)
        if t1 <= t0:
            return 0
        return int(min(max(np.floor((t - t0) / (t1 - t0) * self.bins + 1e-9), 0), self.bins - 1))

    def evaluate(self, view) -> np.ndarray:
        """Control for every particle in the view (clipped into the box)."""
        p = np.asarray(self.params)
        m = self.clip.dim
        core = p[:-m] if self.randomized else p
        fam = self.family
        if fam == "constant":
            u = core
        elif fam == "piecewise-constant":
            u = core.reshape(self.bins, m)[self._time_bin(view.t)]
        elif fam == "linear-feedback":
            z = self._primary(view)
            if z.shape[-1] == 0:
                z = np.zeros(z.shape[:-1] + (1,))
            nf = z.shape[-1]
            n = view.slice_mean.shape[-1]
            if core.shape[0] != m + m * nf + m * n:
                raise ValueError(f"linear-feedback policy expects {m + m * nf + m * n} parameters, got {core.shape[0]}")
            k0 = core[:m]
            K1 = core[m:m + m * nf].reshape(m, nf)
            K2 = core[m + m * nf:].reshape(m, n)
            u = k0 + z @ K1.T + view.slice_mean @ K2.T
        elif fam == "table":
            z = self._primary(view)
            feat = z[..., 0] if z.shape[-1] else np.zeros(z.shape[:-1])
            fb = np.searchsorted(np.asarray(self.edges, float), feat, side="right")
            table = core.reshape(self.bins, len(self.edges) + 1, m)
            u = table[self._time_bin(view.t)][fb]
        else:  # scheduled-feedback
            times, gains = self.schedule
            g_var = np.interp(view.t, times, gains[:, 0])
            g_mean = np.interp(view.t, times, gains[:, 1])
            mean = view.slice_mean
            u = core[0] + core[2] * g_mean * mean
            if not isinstance(view, BStrongView):
                u = u + core[1] * g_var * (self._primary(view) - mean)
        if self.randomized:
            if view.aux is None:
                raise ValueError("randomized policy evaluated without an auxiliary uniform stream")
            u = u + p[-m:] * (2.0 * view.aux[..., None] - 1.0)
        return self.clip.clip(u)

    def to_json(self) -> dict:
        out = {"info_class": self.info_class, "family": self.family, "params": list(self.params),
               "bounds": self.clip.to_json(), "randomized": self.randomized}
        if self.time_range is not None:
            out["time_range"] = list(self.time_range)
        if self.family in ("piecewise-constant", "table"):
            out["bins"] = self.bins
        if self.edges:
            out["edges"] = list(self.edges)
        if self.schedule is not None:
            out["schedule"] = {"times": np.asarray(self.schedule[0]).tolist(),
                               "gains": np.asarray(self.schedule[1]).tolist()}
        if self.phi is not None:
            out["phi"] = self.phi.to_json()
        if self.name:
            out["name"] = self.name
        return out


@dataclass(frozen=True, eq=False)
class SplicedPolicy:
    """``first`` before ``switch_time``, ``second`` from then on."""

    first: Policy
    second: Policy
    switch_time: float

    @property
    def info_class(self) -> str:
        order = {"feedback": 0, "bstrong": 0, "strong": 1}
        return max((self.first.info_class, self.second.info_class), key=order.get)

    @property
    def needs_aux(self) -> bool:
        return self.first.needs_aux or self.second.needs_aux

    @property
    def phi(self):
        return self.first.phi or self.second.phi

    @property
    def clip(self) -> Box:
        return self.first.clip

    def check(self, n: int, ell: int):
        self.first.check(n, ell)
        self.second.check(n, ell)

    def evaluate(self, view):
        return (self.first if view.t < self.switch_time - 1e-12 else self.second).evaluate(view)

    def to_json(self) -> dict:
        return {"spliced": {"first": self.first.to_json(), "second": self.second.to_json(),
                            "switch_time": self.switch_time}}


def evaluate(policy, info) -> np.ndarray:
    """Evaluate on the class-restricted view of a batched StepInfo."""
    if isinstance(policy, SplicedPolicy):
        active = policy.first if info.t < policy.switch_time - 1e-12 else policy.second
        return active.evaluate(restrict(info, active.info_class))
    return policy.evaluate(restrict(info, policy.info_class))


def policy_from_json(data: dict):
    if isinstance(data, str):
        data = json.loads(data)
    if "spliced" in data:
        s = data["spliced"]
        return SplicedPolicy(policy_from_json(s["first"]), policy_from_json(s["second"]), float(s["switch_time"]))
    allowed = {"info_class", "family", "params", "bounds", "randomized", "time_range", "bins", "edges",
               "schedule", "phi", "name"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown policy keys: {sorted(unknown)}")
    b = data["bounds"]
    sched = data.get("schedule")
    phi = data.get("phi")
    return Policy(
        info_class=data["info_class"], family=data["family"], params=tuple(data["params"]),
        clip=box(b["lo"], b["hi"]), randomized=bool(data.get("randomized", False)),
        time_range=tuple(data["time_range"]) if "time_range" in data else None,
        bins=int(data.get("bins", 1)), edges=tuple(data.get("edges", ())),
        schedule=(np.asarray(sched["times"], float), np.asarray(sched["gains"], float)) if sched else None,
        phi=UpdatingFunction(phi["kind"], phi.get("n", 1)) if phi else None,
        name=data.get("name", ""),
    )


# ---------------------------------------------------------------------------
# search families


def family_grid(family: str, bounds: Sequence[tuple], resolution) -> np.ndarray:
    """Tensor grid of parameter vectors, one row per candidate (lexicographic order)."""
    bounds = [tuple(map(float, b)) for b in bounds]
    if not bounds:
        raise ValueError(f"{family}: no parameter bounds given")
    res = [int(resolution)] * len(bounds) if np.isscalar(resolution) else [int(r) for r in resolution]
    if len(res) != len(bounds):
        raise ValueError("one resolution per parameter expected")
    if any(r < 1 for r in res):
        raise ValueError("resolution must be >= 1")
    if any(not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo for lo, hi in bounds):
        raise ValueError("bounds must be finite with lo <= hi")
    size = int(np.prod([float(r) for r in res]))
    if size > GRID_LIMIT:
        raise ValueError(f"{family} grid has {size} points, limit is {GRID_LIMIT}")
    axes = [np.array([(lo + hi) / 2]) if r == 1 else np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, res)]
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(size, len(bounds))


@dataclass(frozen=True, eq=False)
class FamilySearch:
    """Search space: a template policy and a tensor grid over its parameters."""

    template: Policy
    bounds: tuple
    resolution: tuple
    refine_levels: int = 3
    budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(tuple(map(float, b)) for b in self.bounds))
        res = self.resolution
        res = (int(res),) * len(self.bounds) if np.isscalar(res) else tuple(int(r) for r in res)
        object.__setattr__(self, "resolution", res)

    def grid(self) -> np.ndarray:
        return family_grid(self.template.family, self.bounds, self.resolution)

    def cell_widths(self) -> np.ndarray:
        return np.array([0.0 if r == 1 else (hi - lo) / (r - 1) for (lo, hi), r in zip(self.bounds, self.resolution)])

    def policy(self, params) -> Policy:
        return self.template.with_params(params)

    def refined(self) -> "FamilySearch":
        """One refinement level: grids nested in the original."""
        return replace(self, resolution=tuple(1 if r == 1 else 2 * r - 1 for r in self.resolution))

    def with_template(self, template: Policy) -> "FamilySearch":
        return replace(self, template=template)

    def contains(self, params, atol: float = 1e-12) -> bool:
        g = self.grid()
        return bool(np.any(np.all(np.abs(g - np.asarray(params)) <= atol, axis=1)))

    def to_json(self) -> dict:
        return {"template": self.template.to_json(), "bounds": [list(b) for b in self.bounds],
                "resolution": list(self.resolution), "refine_levels": self.refine_levels, "budget": self.budget}


def family_search_from_json(data: dict) -> FamilySearch:
    tpl = dict(data["template"])
    tpl.setdefault("params", [0.0] * len(data["bounds"]))
    return FamilySearch(policy_from_json(tpl), tuple(tuple(b) for b in data["bounds"]),
                        tuple(data["resolution"]) if not np.isscalar(data["resolution"]) else data["resolution"],
                        int(data.get("refine_levels", 3)), data.get("budget"))


def constant_policy(value, clip: Box, info_class: str = "bstrong") -> Policy:
    return Policy(info_class, "constant", tuple(np.atleast_1d(value)), clip)


def linear_feedback(k0, k1, k2, clip: Box, info_class: str = "feedback", randomized_amp=None) -> Policy:
    params = [k0, k1, k2] + ([] if randomized_amp is None else [randomized_amp])
    return Policy(info_class, "linear-feedback", tuple(params), clip, randomized=randomized_amp is not None)
