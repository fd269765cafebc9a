"""Empirical measures, Wasserstein-2 distances and conditional slices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

if TYPE_CHECKING:
    from .simulator import ParticleEnsemble

EXACT_ATOM_LIMIT = 256


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud in R^k."""

    points: np.ndarray  # (atoms, k)
    weights: np.ndarray  # (atoms,), sums to one

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c

    def project(self, coords) -> "EmpiricalMeasure":
        return EmpiricalMeasure(np.ascontiguousarray(self.points[:, list(coords)]), self.weights.copy())


def empirical_from_points(points, weights=None) -> EmpiricalMeasure:
    pts = np.array(points, dtype=float)
    if pts.size == 0:
        raise ValueError("empirical measure needs at least one point")
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"points must be a list of vectors, got array of shape {pts.shape}")
    if weights is None:
        w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    else:
        w = np.array(weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        w = w / total
    return EmpiricalMeasure(pts, w)


def moment(mu: EmpiricalMeasure, coordinate: int, order: int, central: bool = False) -> float:
    if not 0 <= coordinate < mu.dim:
        raise ValueError(f"coordinate {coordinate} out of range for dimension {mu.dim}")
    if order not in (1, 2, 3, 4):
        raise ValueError(f"order must be 1..4, got {order}")
    x = mu.points[:, coordinate]
    if central:
        x = x - mu.weights @ x
    return float(mu.weights @ x**order)


def central_moment(mu: EmpiricalMeasure, coordinate: int, order: int = 2) -> float:
    return moment(mu, coordinate, order, central=True)


# ---------------------------------------------------------------------------
# optimal transport


@dataclass(frozen=True)
class TransportResult:
    distance: float
    method: str  # "quantile" | "assignment" | "linprog" | "sinkhorn"
    gap: float = 0.0  # duality gap on the squared cost, nonzero only for sinkhorn
    plan: np.ndarray | None = field(default=None, repr=False)


def _quantile_w2sq(x, a, y, b) -> float:
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, a, y, b = x[ix], a[ix], y[iy], b[iy]
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    levels = levels[levels > 0]
    dp = np.diff(np.concatenate([[0.0], levels]))
    # quantile index of each level interval (right-continuous inverse cdf)
    mids = levels - dp / 2
    qx = x[np.minimum(np.searchsorted(ca, mids, side="left"), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cb, mids, side="left"), len(y) - 1)]
    return float(np.sum(dp * (qx - qy) ** 2))


REPLICATION_LIMIT = 2048


def _exact_cost(C, a, b) -> tuple[float, np.ndarray, str]:
    n1, n2 = C.shape
    uniform = np.allclose(a, 1.0 / n1, rtol=0, atol=1e-15) and np.allclose(b, 1.0 / n2, rtol=0, atol=1e-15)
    L = math.lcm(n1, n2)
    if uniform and L <= REPLICATION_LIMIT:
        # equal-mass copies turn uniform transport into an assignment problem
        ra, rb = L // n1, L // n2
        r, c = linear_sum_assignment(np.repeat(np.repeat(C, ra, axis=0), rb, axis=1))
        plan = np.zeros_like(C)
        np.add.at(plan, (r // ra, c // rb), 1.0 / L)
        return float(C[r // ra, c // rb].sum() / L), plan, "assignment"
    # transport LP: rows sum to a, columns to b
    A_eq = np.zeros((n1 + n2, n1 * n2))
    for i in range(n1):
        A_eq[i, i * n2:(i + 1) * n2] = 1.0
    for j in range(n2):
        A_eq[n1 + j, j::n2] = 1.0
    res = linprog(C.reshape(-1), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs-ds", options={"primal_feasibility_tolerance": 1e-10,
                                              "dual_feasibility_tolerance": 1e-10})
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(n1, n2)
    return float(np.sum(plan * C)), plan, "linprog"


def _sinkhorn(C, a, b, eps, iters=5000, tol=1e-10):
    la, lb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    for _ in range(iters):
        f_new = -eps * logsumexp((g[None, :] - C) / eps + lb[None, :], axis=1)
        g = -eps * logsumexp((f_new[:, None] - C) / eps + la[:, None], axis=0)
        if np.max(np.abs(f_new - f)) < tol:
            f = f_new
            break
        f = f_new
    logp = (f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]
    plan = np.exp(logp)
    primal = float(np.sum(plan * C))
    # dual of the unregularised problem using the c-transform of f
    g_ct = np.min(C - f[:, None], axis=0)
    dual = float(a @ f + b @ g_ct)
    return primal, max(primal - dual, 0.0), plan


def transport(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cost: np.ndarray | None = None,
              keep_plan: bool = False) -> TransportResult:
    """Optimal transport for the squared Euclidean cost (or a supplied cost matrix)."""
    if cost is None and mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    a, b = mu.weights, nu.weights
    if cost is None and mu.dim == 1:
        d2 = _quantile_w2sq(mu.points[:, 0], a, nu.points[:, 0], b)
        return TransportResult(float(np.sqrt(max(d2, 0.0))), "quantile")
    if cost is None:
        diff = mu.points[:, None, :] - nu.points[None, :, :]
        cost = np.einsum("ijk,ijk->ij", diff, diff)
    if max(mu.size, nu.size) <= EXACT_ATOM_LIMIT:
        d2, plan, method = _exact_cost(cost, a, b)
        return TransportResult(float(np.sqrt(max(d2, 0.0))), method, 0.0, plan if keep_plan else None)
    scale = float(np.mean(cost)) or 1.0
    d2, gap, plan = _sinkhorn(cost, a, b, 1e-3 * scale)
    return TransportResult(float(np.sqrt(max(d2, 0.0))), "sinkhorn", gap, plan if keep_plan else None)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    return transport(mu, nu).distance


def assignment_wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact solver irrespective of dimension (used to cross-check the 1-D formula)."""
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    d2, _, _ = _exact_cost(np.einsum("ijk,ijk->ij", diff, diff), mu.weights, nu.weights)
    return float(np.sqrt(max(d2, 0.0)))


def path_wasserstein2(paths_a, paths_b, controls_a=None, controls_b=None) -> float:
    """W2 between uniform measures on grid paths under the sup norm.

    ``paths_*`` have shape (atoms, times, n); optional ``controls_*`` (atoms, m)
    add a Euclidean control coordinate to the ground cost.
    """
    pa, pb = np.asarray(paths_a, float), np.asarray(paths_b, float)
    diff = pa[:, None] - pb[None, :]
    cost = np.max(np.einsum("ijtk,ijtk->ijt", diff, diff), axis=2)
    if controls_a is not None:
        du = np.asarray(controls_a, float)[:, None] - np.asarray(controls_b, float)[None, :]
        cost = cost + np.einsum("ijk,ijk->ij", du, du)
    mu = EmpiricalMeasure(np.zeros((pa.shape[0], 1)), np.full(pa.shape[0], 1.0 / pa.shape[0]))
    nu = EmpiricalMeasure(np.zeros((pb.shape[0], 1)), np.full(pb.shape[0], 1.0 / pb.shape[0]))
    return transport(mu, nu, cost=cost).distance


# ---------------------------------------------------------------------------
# conditional slices of a particle ensemble


@dataclass(frozen=True)
class ConditionalFlow:
    scenario_index: int
    times: np.ndarray
    state_measures: tuple[EmpiricalMeasure, ...]
    joint_measures: tuple[EmpiricalMeasure, ...]


def _slice_pair(states_k: np.ndarray, controls_k: np.ndarray):
    state = empirical_from_points(states_k)
    joint = empirical_from_points(np.concatenate([states_k, controls_k], axis=1))
    return state, joint


def _controls_at(ensemble: "ParticleEnsemble", k: int) -> np.ndarray:
    # controls are piecewise constant on [t_k, t_{k+1}); at the final time the
    # last control is held
    K = ensemble.grid.steps
    return ensemble.controls[min(k, K - 1)]


def conditional_slices(ensemble: "ParticleEnsemble", time_index: int):
    """Per-scenario (state, joint state-control) empirical measures at a grid index."""
    K = ensemble.grid.steps
    if not -K - 1 <= time_index <= K:
        raise IndexError(f"time index {time_index} outside 0..{K}")
    k = time_index % (K + 1)
    xs = ensemble.states[k]
    us = _controls_at(ensemble, k)
    return [_slice_pair(xs[j], us[j]) for j in range(ensemble.M)]


def pooled_slice(ensemble: "ParticleEnsemble", time_index: int) -> EmpiricalMeasure:
    k = time_index % (ensemble.grid.steps + 1)
    xs = ensemble.states[k]
    return empirical_from_points(xs.reshape(-1, xs.shape[-1]))


def conditional_flow(ensemble: "ParticleEnsemble", scenario: int) -> ConditionalFlow:
    if not 0 <= scenario < ensemble.M:
        raise IndexError(f"scenario {scenario} outside 0..{ensemble.M - 1}")
    states, joints = [], []
    for k in range(ensemble.grid.steps + 1):
        s, j = _slice_pair(ensemble.states[k, scenario], _controls_at(ensemble, k)[scenario])
        states.append(s)
        joints.append(j)
    return ConditionalFlow(scenario, ensemble.grid.points.copy(), tuple(states), tuple(joints))


def wasserstein2_many(pairs: Sequence[tuple[EmpiricalMeasure, EmpiricalMeasure]], threads: int = 1) -> list[float]:
    if threads <= 1:
        return [wasserstein2(a, b) for a, b in pairs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: wasserstein2(*p), pairs))
