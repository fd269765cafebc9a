"""Outer x inner particle scheme for the conditional McKean-Vlasov SDE.

Arrays are time-major.  For M scenarios of N particles on a grid of K steps:

* ``paths``       (H+K+1, M, N, n), the first H entries are the pre-start history
* ``controls``    (K, M, N, m), u_k is held on [t_k, t_{k+1})
* ``integrated``  (K+1, M, N, m), A_{k+1} = A_k + u_k dt
* ``common``      (K, M, ell) increments shared by a scenario's particles
* ``idio``        (K, M, N, d) per-particle increments
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .policies import StepInfo, evaluate
from .problems.spec import InitialDraw, InitialLaw, LawHistory, PathHistory, ProblemSpec
from .problems.updating import UpdatingFunction


class SimulationError(RuntimeError):
    """Non-finite state or failing coefficient; carries the first bad location."""

    def __init__(self, message, scenario=None, particle=None, step=None):
        super().__init__(message)
        self.scenario, self.particle, self.step = scenario, particle, step


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def points(self) -> np.ndarray:
        p = self.t_start + self.dt * np.arange(self.steps + 1)
        p[-1] = self.t_end
        return p

    def index_of(self, t: float) -> int:
        k = (t - self.t_start) / self.dt
        j = int(round(k))
        if abs(k - j) > 1e-9 or not 0 <= j <= self.steps:
            raise ValueError(f"time {t} is not a grid point of [{self.t_start}, {self.t_end}] / {self.steps}")
        return j

    def split(self, t: float) -> tuple["TimeGrid", "TimeGrid"]:
        j = self.index_of(t)
        if not 0 < j < self.steps:
            raise ValueError("split time must be interior")
        return TimeGrid(self.t_start, float(self.points[j]), j), TimeGrid(float(self.points[j]), self.t_end, self.steps - j)


def brownian_increments(steps: int, dim: int, dt: float, seed: int, role: rng.Role,
                        scenario: int = 0, particle: int = 0) -> np.ndarray:
    """N(0, dt) increments of one stream, shape (steps, dim)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = rng.normal_streams(seed, role, np.array([scenario]), np.array([particle]), steps * dim)
    return z[0].reshape(steps, dim) * np.sqrt(dt)


@dataclass(frozen=True, eq=False)
class NoiseBank:
    """All increments (and auxiliary uniforms) for one run; reusable across policies."""

    seed: int
    steps: int
    M: int
    N: int
    common: np.ndarray  # (K, M, ell)
    idio: np.ndarray  # (K, M, N, d)
    aux: np.ndarray | None  # (K, M, N)

    @classmethod
    def generate(cls, seed, grid: TimeGrid, M, N, d, ell, *, pooled=None, aux=False, threads=1):
        K = grid.steps
        pooled = ell == 0 if pooled is None else pooled
        sq = np.sqrt(grid.dt)
        s, p = rng.stream_indices(M, N, pooled)
        if d:
            z = rng.particle_normals(seed, rng.Role.IDIO, s, p, K * d, threads)
            idio = np.ascontiguousarray(z.reshape(M, N, K, d).transpose(2, 0, 1, 3)) * sq
        else:
            idio = np.zeros((K, M, N, 0))
        if ell:
            z = rng.particle_normals(seed, rng.Role.COMMON, np.arange(M), np.zeros(M, dtype=np.int64), K * ell, threads)
            common = np.ascontiguousarray(z.reshape(M, K, ell).transpose(1, 0, 2)) * sq
        else:
            common = np.zeros((K, M, 0))
        a = None
        if aux:
            a = np.ascontiguousarray(rng.particle_uniforms(seed, rng.Role.AUX, s, p, K, threads).reshape(M, N, K).transpose(2, 0, 1))
        for arr in (idio, common, a):
            if arr is not None:
                arr.setflags(write=False)
        return cls(seed, K, M, N, common, idio, a)

    def with_aux(self, seed, pooled, threads=1) -> "NoiseBank":
        if self.aux is not None:
            return self
        s, p = rng.stream_indices(self.M, self.N, pooled)
        a = np.ascontiguousarray(rng.particle_uniforms(seed, rng.Role.AUX, s, p, self.steps, threads)
                                 .reshape(self.M, self.N, self.steps).transpose(2, 0, 1))
        a.setflags(write=False)
        return NoiseBank(self.seed, self.steps, self.M, self.N, self.common, self.idio, a)


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    grid: TimeGrid
    M: int
    N: int
    seed: int
    times: np.ndarray  # (H+K+1,) history times followed by grid points
    paths: np.ndarray
    controls: np.ndarray
    integrated_control: np.ndarray
    common_noise: np.ndarray
    idio_noise: np.ndarray
    history_len: int = 0
    pooled: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def states(self) -> np.ndarray:
        """States on the grid, shape (K+1, M, N, n)."""
        return self.paths[self.history_len:]

    @property
    def n(self) -> int:
        return self.paths.shape[-1]

    @property
    def m(self) -> int:
        return self.controls.shape[-1]

    def law(self, step: int) -> LawHistory:
        """Conditional law argument at grid step (last control held at the end)."""
        i = self.history_len + step
        u = self.controls[min(step, self.grid.steps - 1)]
        return LawHistory(self.paths[: i + 1], u, self.times[: i + 1], pooled=self.pooled)

    def path_history(self, step: int) -> PathHistory:
        i = self.history_len + step
        return PathHistory(self.paths[: i + 1], self.times[: i + 1])

    def slice_means(self) -> np.ndarray:
        """Per-scenario means of the state on the grid, (K+1, M, n)."""
        return self.states.mean(axis=2)

    def to_csv(self, path) -> None:
        """Columnar export: scenario, particle, time, x..., u..., A...  (u blank at t_end)."""
        n, m, K = self.n, self.m, self.grid.steps
        header = ["scenario", "particle", "time"] + [f"x{i + 1}" for i in range(n)] \
            + [f"u{i + 1}" for i in range(m)] + [f"A{i + 1}" for i in range(m)]
        pts = self.grid.points
        X, U, A = self.states, self.controls, self.integrated_control
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for j in range(self.M):
                for i in range(self.N):
                    for k in range(K + 1):
                        u = [repr(float(v)) for v in U[k, j, i]] if k < K else [""] * m
                        w.writerow([j, i, repr(float(pts[k]))] + [repr(float(v)) for v in X[k, j, i]] + u
                                   + [repr(float(v)) for v in A[k, j, i]])

    def to_binary(self, path) -> None:
        """Snapshot layout (all little-endian):

        8-byte magic ``MKVENS01``; int64 M, N, steps, n, m, d, ell, history_len, seed;
        float64 t_start, t_end; then float64 arrays in C order: times (H+K+1),
        paths (H+K+1, M, N, n), controls (K, M, N, m), integrated (K+1, M, N, m),
        common (K, M, ell), idio (K, M, N, d).
        """
        d = self.idio_noise.shape[-1]
        ell = self.common_noise.shape[-1]
        with open(path, "wb") as fh:
            fh.write(b"MKVENS01")
            fh.write(struct.pack("<9q", self.M, self.N, self.grid.steps, self.n, self.m, d, ell,
                                 self.history_len, int(self.seed) & ((1 << 63) - 1)))
            fh.write(struct.pack("<2d", self.grid.t_start, self.grid.t_end))
            for arr in (self.times, self.paths, self.controls, self.integrated_control, self.common_noise,
                        self.idio_noise):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_binary(path) -> ParticleEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != b"MKVENS01":
        raise ValueError("not an ensemble snapshot")
    M, N, K, n, m, d, ell, H, seed = struct.unpack_from("<9q", raw, 8)
    t0, t1 = struct.unpack_from("<2d", raw, 80)
    off = 96
    out = []
    for shape in ((H + K + 1,), (H + K + 1, M, N, n), (K, M, N, m), (K + 1, M, N, m), (K, M, ell), (K, M, N, d)):
        size = int(np.prod(shape))
        out.append(np.frombuffer(raw, "<f8", size, off).reshape(shape).astype(float))
        off += 8 * size
    return ParticleEnsemble(TimeGrid(t0, t1, K), M, N, seed, out[0], out[1], out[2], out[3], out[4], out[5], H, ell == 0)


@dataclass(frozen=True)
class FrozenLaw:
    """Measure argument held fixed during one Picard sweep."""

    paths: np.ndarray  # same layout as ParticleEnsemble.paths
    controls: np.ndarray  # (K, M, N, m)


def _check_policy(spec: ProblemSpec, policy):
    if hasattr(policy, "check"):
        policy.check(spec.n, spec.ell)


def _run(spec: ProblemSpec, policy, grid: TimeGrid, M: int, N: int, seed: int, noise: NoiseBank,
         draw: InitialDraw, pooled: bool, frozen: FrozenLaw | None = None, phi: UpdatingFunction | None = None):
    K, dt, n, m = grid.steps, grid.dt, spec.n, spec.m
    H = len(draw.times) - 1
    if draw.paths.shape != (H + 1, M, N, n):
        raise ValueError(f"initial paths have shape {draw.paths.shape}, expected {(H + 1, M, N, n)}")
    if abs(draw.times[-1] - grid.t_start) > 1e-12:
        raise ValueError("initial draw does not end at the grid start")
    times = np.concatenate([draw.times[:-1], grid.points])
    paths = np.empty((H + K + 1, M, N, n))
    paths[: H + 1] = draw.paths
    controls = np.empty((K, M, N, m))
    integ = np.zeros((K + 1, M, N, m))
    common_level = np.zeros((M, 1, spec.ell))
    idio_level = np.zeros((M, N, spec.d))
    phi = phi or getattr(policy, "phi", None) or UpdatingFunction("running-state", n)
    tracker = phi.start(paths[0])
    for h in range(1, H + 1):
        tracker.advance(paths[h], times[h] - times[h - 1])
    pts = grid.points
    for k in range(K):
        i = H + k
        t = float(pts[k])
        law_paths = paths if frozen is None else frozen.paths
        stats = LawHistory(law_paths[: i + 1], None, times[: i + 1], pooled=pooled)
        info = StepInfo(t, k, paths[i], tracker.value(), stats.mean(), stats.variance(), common_level,
                        idio_level, paths[H], None if noise.aux is None else noise.aux[k])
        try:
            u = np.broadcast_to(evaluate(policy, info), (M, N, m))
        except ValueError:
            raise
        except Exception as exc:  # policy failures carry the step
            raise SimulationError(f"policy evaluation failed at step {k}: {exc}", step=k) from exc
        controls[k] = u
        law = LawHistory(law_paths[: i + 1], u if frozen is None else frozen.controls[k], times[: i + 1], pooled=pooled)
        law._cache = stats._cache
        x = PathHistory(paths[: i + 1], times[: i + 1])
        try:
            b = spec.drift(t, x, law, controls[k])
            sig = spec.diffusion(t, x, law, controls[k])
            sig0 = spec.common_diffusion(t, x, law, controls[k])
        except Exception as exc:
            raise SimulationError(f"coefficient evaluation failed at step {k}: {exc}", step=k) from exc
        dW = noise.idio[k]
        dB = noise.common[k][:, None, :]
        nxt = paths[i] + np.asarray(b) * dt
        if spec.d:
            nxt = nxt + (np.asarray(sig) @ dW[..., None])[..., 0]
        if spec.ell:
            nxt = nxt + (np.asarray(sig0) @ dB[..., None])[..., 0]
        nxt = np.broadcast_to(nxt, (M, N, n))
        if not np.all(np.isfinite(nxt)):
            j, p = np.argwhere(~np.isfinite(nxt).all(axis=-1))[0][:2]
            raise SimulationError(f"non-finite state at scenario {j}, particle {p}, step {k}",
                                  int(j), int(p), k)
        paths[i + 1] = nxt
        integ[k + 1] = integ[k] + controls[k] * dt
        common_level = common_level + dB
        idio_level = idio_level + dW
        tracker.advance(paths[i + 1], dt)
    return times, paths, controls, integ, H


def simulate(spec: ProblemSpec, policy, grid: TimeGrid, M: int, N: int, seed: int, *,
             noise: NoiseBank | None = None, initial: InitialLaw | InitialDraw | None = None,
             threads: int = 1, frozen: FrozenLaw | None = None) -> ParticleEnsemble:
    """Euler-Maruyama with the same-step within-scenario joint slice as the measure argument.

    Deterministic in (seed, M, N, grid, policy); ``threads`` only affects how
    random streams are generated, never their values.
    """
    if M < 1 or N < 1:
        raise ValueError("M and N must be positive")
    _check_policy(spec, policy)
    pooled = spec.ell == 0
    if noise is None:
        noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=pooled,
                                   aux=getattr(policy, "needs_aux", False), threads=threads)
    elif getattr(policy, "needs_aux", False) and noise.aux is None:
        noise = noise.with_aux(seed, pooled, threads)
    if (noise.steps, noise.M, noise.N) != (grid.steps, M, N):
        raise ValueError("noise bank layout does not match the run")
    if isinstance(initial, InitialDraw):
        draw = initial
    else:
        draw = (initial or spec.initial).sample(seed, M, N, grid.t_start, pooled, threads)
    times, paths, controls, integ, H = _run(spec, policy, grid, M, N, seed, noise, draw, pooled, frozen)
    for arr in (times, paths, controls, integ):
        arr.setflags(write=False)
    return ParticleEnsemble(grid, M, N, seed, times, paths, controls, integ, noise.common, noise.idio, H, pooled)


@dataclass(frozen=True)
class PicardReport:
    distances: tuple
    iterations: int
    converged: bool
    tol: float

    def to_json(self) -> dict:
        return {"distances": list(self.distances), "iterations": self.iterations, "converged": self.converged,
                "tol": self.tol}


def picard_solve(spec: ProblemSpec, policy, grid: TimeGrid, M: int, N: int, seed: int,
                 tol: float = 1e-4, max_iter: int = 50, threads: int = 1):
    """Fixed-point iteration on the measure argument with shared noise.

    Y^0 holds the initial paths constant and the box centre as control; each
    sweep solves the SDE with the law frozen from the previous iterate.  The
    distance is the max over grid times of the particle mean of |Y^{k+1}-Y^k|^2.
    """
    _check_policy(spec, policy)
    pooled = spec.ell == 0
    noise = NoiseBank.generate(seed, grid, M, N, spec.d, spec.ell, pooled=pooled,
                               aux=getattr(policy, "needs_aux", False), threads=threads)
    draw = spec.initial.sample(seed, M, N, grid.t_start, pooled, threads)
    H = len(draw.times) - 1
    K = grid.steps
    y_paths = np.concatenate([draw.paths, np.repeat(draw.paths[-1:], K, axis=0)])
    y_controls = np.broadcast_to(spec.control_box.center, (K, M, N, spec.m)).copy()
    distances = []
    ens = None
    for _ in range(max_iter):
        ens = simulate(spec, policy, grid, M, N, seed, noise=noise, initial=draw,
                       frozen=FrozenLaw(y_paths, y_controls))
        diff = ens.paths[H:] - y_paths[H:]
        dist = float(np.max(np.mean(np.sum(diff * diff, axis=-1), axis=(1, 2))))
        distances.append(dist)
        y_paths, y_controls = np.array(ens.paths), np.array(ens.controls)
        if dist < tol:
            break
    converged = bool(distances and distances[-1] < tol)
    return ens, PicardReport(tuple(distances), len(distances), converged, tol)
