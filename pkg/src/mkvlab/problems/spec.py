"""Problem specifications: control box, coefficient arguments, initial laws."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from ..measures import EmpiricalMeasure
from ..rng import Role, particle_normals, particle_uniforms, stream_indices


@dataclass(frozen=True)
class Box:
    """Axis-aligned control set; the reference control u0 is the centre."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, float))
        hi = np.atleast_1d(np.asarray(self.hi, float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have equal shapes")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("control box must be bounded")
        if np.any(lo > hi):
            raise ValueError("control box is empty (lo > hi)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def clip(self, u):
        return np.clip(u, self.lo, self.hi)

    def contains(self, u) -> bool:
        u = np.asarray(u)
        return bool(np.all((u >= self.lo) & (u <= self.hi)))

    def rho(self, u) -> np.ndarray:
        """Distance to the reference control, over the last axis."""
        return np.linalg.norm(np.asarray(u) - self.center, axis=-1)

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


def box(lo, hi) -> Box:
    return Box(np.asarray(lo, float), np.asarray(hi, float))


class PathHistory:
    """Own-particle paths handed to coefficients.

    ``values`` has shape (times, ..., n); ``index`` marks the current time.
    Coefficients should read ``current`` (or ``at(s)`` for s <= now); anything
    later than ``index`` is future information.
    """

    __slots__ = ("values", "times", "index")

    def __init__(self, values, times, index=None):
        self.values = values
        self.times = times
        self.index = len(times) - 1 if index is None else index

    @property
    def t(self) -> float:
        return float(self.times[self.index])

    @property
    def current(self) -> np.ndarray:
        return self.values[self.index]

    def at(self, s: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, s - 1e-12, side="left"))
        return self.values[min(i, len(self.times) - 1)]

    def running_max(self) -> np.ndarray:
        return self.values[: self.index + 1].max(axis=0)

    def stopped(self) -> "PathHistory":
        v = self.values.copy()
        v[self.index + 1:] = v[self.index]
        return PathHistory(v, self.times, self.index)


class LawHistory:
    """Conditional law argument: population paths plus current controls.

    ``values`` has shape (times, G, P, n) and ``controls`` (G, P, m); group g
    is the conditional population of scenario g.  With ``pooled`` the whole
    array is one population (no common noise) and statistics come back with a
    leading axis of length one so they broadcast against every scenario.
    """

    __slots__ = ("values", "controls", "times", "index", "pooled", "_cache")

    def __init__(self, values, controls, times, index=None, pooled=False):
        self.values = values
        self.controls = controls
        self.times = times
        self.index = len(times) - 1 if index is None else index
        self.pooled = pooled
        self._cache = {}

    @property
    def t(self) -> float:
        return float(self.times[self.index])

    def state_slice(self, s: float | None = None) -> np.ndarray:
        """States of each population at time s (default: now); shape (G, P, n)."""
        if s is None:
            x = self.values[self.index]
        else:
            i = int(np.searchsorted(self.times, s - 1e-12, side="left"))
            x = self.values[min(i, len(self.times) - 1)]
        if self.pooled:
            return x.reshape(1, -1, x.shape[-1])
        return x

    def control_slice(self) -> np.ndarray:
        u = self.controls
        if self.pooled:
            return u.reshape(1, -1, u.shape[-1])
        return u

    def mean(self) -> np.ndarray:
        if "mean" not in self._cache:
            self._cache["mean"] = self.state_slice().mean(axis=1, keepdims=True)
        return self._cache["mean"]

    def second_moment(self) -> np.ndarray:
        if "m2" not in self._cache:
            x = self.state_slice()
            self._cache["m2"] = (x * x).mean(axis=1, keepdims=True)
        return self._cache["m2"]

    def variance(self) -> np.ndarray:
        if "var" not in self._cache:
            x = self.state_slice()
            self._cache["var"] = ((x - self.mean()) ** 2).mean(axis=1, keepdims=True)
        return self._cache["var"]

    def control_mean(self) -> np.ndarray:
        return self.control_slice().mean(axis=1, keepdims=True)

    def control_second_moment(self, center=None) -> np.ndarray:
        u = self.control_slice()
        if center is not None:
            u = u - center
        return (u * u).sum(axis=-1).mean(axis=1, keepdims=True)

    def stopped(self) -> "LawHistory":
        v = self.values.copy()
        v[self.index + 1:] = v[self.index]
        return LawHistory(v, self.controls, self.times, self.index, self.pooled)


class Coefficient(Protocol):
    def __call__(self, t: float, x: PathHistory, mu: LawHistory, u: np.ndarray) -> np.ndarray: ...


class Terminal(Protocol):
    def __call__(self, x: PathHistory, mu: LawHistory) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialDraw:
    times: np.ndarray  # (H+1,), last entry is the start time
    paths: np.ndarray  # (H+1, M, N, n)


class InitialLaw:
    n: int

    def sample(self, seed: int, M: int, N: int, t_start: float, pooled: bool = False,
               threads: int = 1) -> InitialDraw:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


def _point_draw(x: np.ndarray, t_start: float) -> InitialDraw:
    return InitialDraw(np.array([float(t_start)]), x[None])


@dataclass(frozen=True)
class Gaussian(InitialLaw):
    mean: tuple
    std: tuple

    @property
    def n(self) -> int:
        return len(self.mean)

    def sample(self, seed, M, N, t_start, pooled=False, threads=1):
        s, p = stream_indices(M, N, pooled)
        z = particle_normals(seed, Role.INIT, s, p, self.n, threads)
        x = np.asarray(self.mean) + np.asarray(self.std) * z
        return _point_draw(x.reshape(M, N, self.n), t_start)

    def to_json(self):
        return {"type": "gaussian", "mean": list(self.mean), "std": list(self.std)}


@dataclass(frozen=True)
class Dirac(InitialLaw):
    point: tuple

    @property
    def n(self) -> int:
        return len(self.point)

    def sample(self, seed, M, N, t_start, pooled=False, threads=1):
        x = np.broadcast_to(np.asarray(self.point, float), (M, N, self.n)).copy()
        return _point_draw(x, t_start)

    def to_json(self):
        return {"type": "dirac", "point": list(self.point)}


@dataclass(frozen=True)
class Uniform(InitialLaw):
    lo: tuple
    hi: tuple

    @property
    def n(self) -> int:
        return len(self.lo)

    def sample(self, seed, M, N, t_start, pooled=False, threads=1):
        s, p = stream_indices(M, N, pooled)
        u = particle_uniforms(seed, Role.INIT, s, p, self.n, threads)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return _point_draw((lo + (hi - lo) * u).reshape(M, N, self.n), t_start)

    def to_json(self):
        return {"type": "uniform", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class PathAtoms(InitialLaw):
    """Discrete law on pre-start paths, resampled i.i.d. per particle.

    ``offsets`` are history times relative to the start (last entry 0) and
    ``atoms`` has shape (H+1, P, n).  A plain state measure is the H = 0 case.
    """

    offsets: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.atoms.shape[-1]

    def sample(self, seed, M, N, t_start, pooled=False, threads=1):
        s, p = stream_indices(M, N, pooled)
        u = particle_uniforms(seed, Role.RESTART, s, p, 1, threads)[:, 0]
        cdf = np.cumsum(self.weights)
        cdf[-1] = 1.0
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        paths = self.atoms[:, idx].reshape(len(self.offsets), M, N, self.n)
        return InitialDraw(t_start + self.offsets, paths)

    def to_json(self):
        return {"type": "path-atoms", "offsets": self.offsets.tolist(), "atoms": self.atoms.tolist(),
                "weights": self.weights.tolist()}


def from_measure(mu: EmpiricalMeasure) -> PathAtoms:
    return PathAtoms(np.zeros(1), mu.points[None].copy(), mu.weights.copy())


def from_path_atoms(offsets, atoms, weights=None) -> PathAtoms:
    atoms = np.asarray(atoms, float)
    if atoms.ndim == 2:
        atoms = atoms[..., None]
    P = atoms.shape[1]
    w = np.full(P, 1.0 / P) if weights is None else np.asarray(weights, float) / np.sum(weights)
    offsets = np.asarray(offsets, float)
    if offsets[-1] != 0 or np.any(np.diff(offsets) <= 0):
        raise ValueError("history offsets must increase and end at 0")
    return PathAtoms(offsets, atoms, w)


@dataclass(frozen=True)
class Explicit(InitialLaw):
    """Particle-for-particle initial paths, shape (H+1, M, N, n)."""

    offsets: np.ndarray
    paths: np.ndarray

    @property
    def n(self) -> int:
        return self.paths.shape[-1]

    def sample(self, seed, M, N, t_start, pooled=False, threads=1):
        if self.paths.shape[1:3] != (M, N):
            raise ValueError(f"explicit initial paths have layout {self.paths.shape[1:3]}, expected {(M, N)}")
        return InitialDraw(t_start + self.offsets, self.paths.copy())

    def to_json(self):
        return {"type": "explicit", "offsets": self.offsets.tolist(), "paths": self.paths.tolist()}


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, rewards, dimensions and initial law of one control problem.

    Evaluators are vectorised over an (M, N) particle layout:
    ``drift`` -> (M, N, n), ``diffusion`` -> (M, N, n, d),
    ``common_diffusion`` -> (M, N, n, ell), ``running`` and ``terminal`` -> (M, N).
    Results may be any array broadcastable to those shapes.
    """

    n: int
    d: int
    ell: int
    T: float
    control_box: Box
    drift: Coefficient
    diffusion: Coefficient
    common_diffusion: Coefficient
    running: Coefficient
    terminal: Terminal
    initial: InitialLaw
    objective: str = "maximize"
    p_integrability: float = 2.0
    name: str = "problem"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if min(self.n, self.d, self.ell) < 0 or self.n == 0:
            raise ValueError("dimensions must be nonnegative with n >= 1")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.objective not in ("maximize", "minimize"):
            raise ValueError(f"objective must be 'maximize' or 'minimize', got {self.objective!r}")
        if self.p_integrability < 0:
            raise ValueError("p must be >= 0")

    @property
    def m(self) -> int:
        return self.control_box.dim

    @property
    def sign(self) -> float:
        """+1 when larger values are better, -1 for costs."""
        return 1.0 if self.objective == "maximize" else -1.0

    def with_initial(self, initial: InitialLaw) -> "ProblemSpec":
        from dataclasses import replace
        return replace(self, initial=initial)
