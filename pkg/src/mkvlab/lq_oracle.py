"""Closed-form scalar linear-quadratic benchmark with common noise.

Dynamics ``dX = (A X + Abar m + B u) dt + sigma dW + sigma0 dB`` with ``m`` the
conditional mean; cost ``Q X^2 + Qbar m^2 + R u^2`` and terminal
``G X^2 + Gbar m^2``, minimised.  The value is quadratic in the conditional
law, ``V(t, nu) = P(t) Var(nu) + Pi(t) mean(nu)^2 + r(t)``, with

    -P'  = 2 A P - B^2 P^2 / R + Q,                 P(T)  = G
    -Pi' = 2 (A + Abar) Pi - B^2 Pi^2 / R + Q + Qbar, Pi(T) = G + Gbar
    -r'  = sigma^2 P + sigma0^2 Pi,                  r(T)  = 0

for controls that may react to the own state.  When the control may only
depend on the common noise (one action per scenario) the variance is out of
reach and the first equation loses its quadratic term: ``-P' = 2 A P + Q``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .policies import Policy
from .problems.spec import Box, Gaussian, ProblemSpec, box
from .problems.templates import constant_diffusion, linear_drift, quadratic_reward, quadratic_terminal

BLOWUP = 1e8
BRANCHES = ("strong", "bstrong")


class RiccatiBlowup(ValueError):
    pass


@dataclass(frozen=True)
class LqSpec:
    A: float = 0.0
    Abar: float = 0.0
    B: float = 1.0
    Q: float = 1.0
    Qbar: float = 0.0
    R: float = 1.0
    G: float = 1.0
    Gbar: float = 0.0
    sigma: float = 0.5
    sigma0: float = 0.5
    T: float = 1.0

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.Q < 0 or self.G < 0:
            raise ValueError("Q and G must be nonnegative")
        if self.Q + self.Qbar < 0 or self.G + self.Gbar < 0:
            raise ValueError("Q + Qbar and G + Gbar must be nonnegative")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    def to_json(self) -> dict:
        return asdict(self)


PRESETS = {
    "LQCN-1": LqSpec(),
    "LQCN-2": LqSpec(Abar=0.5, Qbar=1.0),
}


def preset(name: str, **overrides) -> LqSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown LQ preset {name!r}; known: {sorted(PRESETS)}")
    return LqSpec(**{**PRESETS[name].to_json(), **overrides})


def to_problem(lq: LqSpec, *, initial=None, control_bounds=(-10.0, 10.0), ell: int = 1,
               name: str = "lq") -> ProblemSpec:
    """The benchmark as a (minimised) particle problem with n = d = m = 1."""
    if ell == 0 and lq.sigma0 != 0:
        raise ValueError("ell = 0 requires sigma0 = 0")
    return ProblemSpec(
        n=1, d=1, ell=ell, T=lq.T, control_box=box([control_bounds[0]], [control_bounds[1]]),
        drift=linear_drift(1, 1, state=lq.A, mean=lq.Abar, control=lq.B),
        diffusion=constant_diffusion(lq.sigma, 1, 1),
        common_diffusion=constant_diffusion(lq.sigma0, 1, ell),
        running=quadratic_reward(1, 1, state=lq.Q, mean=lq.Qbar, control=lq.R),
        terminal=quadratic_terminal(1, state=lq.G, mean=lq.Gbar),
        initial=initial or Gaussian((0.0,), (1.0,)),
        objective="minimize", name=name, meta={"lq": lq.to_json()},
    )


def _rhs(lq: LqSpec, branch: str):
    a, abar, b, q, qbar, rr = lq.A, lq.Abar, lq.B, lq.Q, lq.Qbar, lq.R
    s2, s02 = lq.sigma ** 2, lq.sigma0 ** 2
    ctrl_var = 1.0 if branch == "strong" else 0.0

    def f(y):
        P, Pi, _ = y
        return np.array([
            -(2 * a * P - ctrl_var * b * b * P * P / rr + q),
            -(2 * (a + abar) * Pi - b * b * Pi * Pi / rr + q + qbar),
            -(s2 * P + s02 * Pi),
        ])
    return f


def rhs(lq: LqSpec, branch: str = "strong"):
    """d/dt of (P, Pi, r) as a function of the state vector."""
    return _rhs(lq, branch)


def _integrate(lq, times, substeps, branch):
    f = _rhs(lq, branch)
    out = np.empty((len(times), 3))
    y = np.array([lq.G, lq.G + lq.Gbar, 0.0])
    out[-1] = y
    for j in range(len(times) - 1, 0, -1):
        h = (times[j - 1] - times[j]) / substeps
        for _ in range(substeps):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)) or abs(y[0]) > BLOWUP or abs(y[1]) > BLOWUP:
                raise RiccatiBlowup(f"Riccati solution exceeds {BLOWUP:g} near t={times[j]:.6g}")
        out[j - 1] = y
    return out


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    lq: LqSpec
    times: np.ndarray
    P: np.ndarray
    Pi: np.ndarray
    r: np.ndarray
    branch: str = "strong"
    substeps: int = 1

    @property
    def k_var(self) -> np.ndarray:
        if self.branch == "bstrong":
            return np.zeros_like(self.P)
        return -self.lq.B * self.P / self.lq.R

    @property
    def k_mean(self) -> np.ndarray:
        return -self.lq.B * self.Pi / self.lq.R

    def _check_t(self, t):
        t = np.asarray(t, float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise ValueError(f"t outside [{self.times[0]}, {self.times[-1]}]")
        return t

    def at(self, t):
        """(P, Pi, r) at t by linear interpolation between nodes."""
        t = self._check_t(t)
        return (np.interp(t, self.times, self.P), np.interp(t, self.times, self.Pi),
                np.interp(t, self.times, self.r))

    def _splines(self):
        cache = self.__dict__.setdefault("_spl", {})
        if not cache:
            for key in ("P", "Pi", "r"):
                cache[key] = CubicSpline(self.times, getattr(self, key))
        return cache

    def smooth(self, t, derivative: int = 0):
        """Spline through the nodes (and its derivatives), independent of the ODE right-hand side."""
        t = self._check_t(t)
        s = self._splines()
        return s["P"](t, derivative), s["Pi"](t, derivative), s["r"](t, derivative)

    def shifted(self, dP=0.0, dPi=0.0, dr=0.0) -> "RiccatiSolution":
        return RiccatiSolution(self.lq, self.times, self.P + dP, self.Pi + dPi, self.r + dr, self.branch,
                               self.substeps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["t", "P", "Pi", "r", "k_var", "k_mean"])
            for row in zip(self.times, self.P, self.Pi, self.r, self.k_var, self.k_mean):
                w.writerow([repr(float(v)) for v in row])


def solve_riccati(lq: LqSpec, grid=1000, branch: str = "strong", tol: float = 1e-8,
                  max_substeps: int = 4096) -> RiccatiSolution:
    """Backward RK4 on a grid over [0, T] (int = number of steps, or explicit increasing times).

    Substeps are doubled until two consecutive refinements agree to ``tol``.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    if np.isscalar(grid):
        times = np.linspace(0.0, lq.T, int(grid) + 1)
    else:
        times = np.asarray(getattr(grid, "points", grid), float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("Riccati grid must be strictly increasing with at least two nodes")
    if abs(times[-1] - lq.T) > 1e-12:
        raise ValueError("Riccati grid must end at the horizon")
    s = max(1, int(np.ceil(np.max(np.diff(times)) / 1e-3)))
    coarse = _integrate(lq, times, s, branch)
    while True:
        fine = _integrate(lq, times, 2 * s, branch)
        if np.max(np.abs(fine - coarse)) < tol:
            break
        s *= 2
        if s > max_substeps:
            raise RiccatiBlowup("Riccati integration did not settle under step doubling")
        coarse = fine
    return RiccatiSolution(lq, times, fine[:, 0], fine[:, 1], fine[:, 2], branch, 2 * s)


def lq_value(sol: RiccatiSolution, t, mean, variance):
    P, Pi, r = sol.at(t)
    return P * np.asarray(variance) + Pi * np.asarray(mean) ** 2 + r


def terminal_mismatch(sol: RiccatiSolution) -> float:
    lq = sol.lq
    return float(max(abs(sol.P[-1] - lq.G), abs(sol.Pi[-1] - lq.G - lq.Gbar), abs(sol.r[-1])))


def riccati_policy(sol: RiccatiSolution, clip: Box | None = None) -> Policy:
    """Optimal rule u = k_var (x - m) + k_mean m (mean term only on the bstrong branch)."""
    clip = clip or box([-10.0], [10.0])
    sched = (np.array(sol.times), np.column_stack([sol.k_var, sol.k_mean]))
    if sol.branch == "bstrong":
        return Policy("bstrong", "scheduled-feedback", (0.0, 0.0, 1.0), clip, schedule=sched, name="riccati-bstrong")
    return Policy("feedback", "scheduled-feedback", (0.0, 1.0, 1.0), clip, schedule=sched, name="riccati")


# ---------------------------------------------------------------------------
# Lions derivatives and HJB residuals, written for the reward (maximise)
# convention: V = -(P Var + Pi m^2 + r), running reward -(Q x^2 + Qbar m^2 + R u^2).


def _moments(atoms, weights):
    y = np.asarray(atoms, float).reshape(-1)
    w = np.full(y.shape, 1.0 / y.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    m = float(w @ y)
    var = float(w @ (y - m) ** 2)
    return y, w, m, var


def reward_value(P, Pi, r, atoms, weights=None) -> float:
    _, _, m, var = _moments(atoms, weights)
    return -(P * var + Pi * m * m + r)


def lions_derivative(P, Pi, atoms, weights=None) -> np.ndarray:
    """d_nu V at each atom."""
    y, _, m, _ = _moments(atoms, weights)
    return -(2 * P * (y - m) + 2 * Pi * m)


def lions_spatial_derivative(P, Pi, atoms, weights=None) -> np.ndarray:
    """d_y d_nu V, constant in y."""
    y = np.asarray(atoms, float).reshape(-1)
    return np.full(y.shape, -2.0 * P)


def lions_second_derivative(P, Pi, atoms, weights=None) -> np.ndarray:
    """d^2_nu V(y, y'), constant in both arguments; returned as an atoms x atoms matrix."""
    y = np.asarray(atoms, float).reshape(-1)
    return np.full((y.size, y.size), -2.0 * (Pi - P))


def _quadratic_sup(lin, quad, lo, hi):
    """sup of lin*u - quad*u^2 over [lo, hi] (quad > 0): clipped vertex."""
    u = np.clip(lin / (2 * quad), lo, hi)
    return lin * u - quad * u * u, u


def hamiltonian(lq: LqSpec, P, Pi, atoms, weights=None, kind: str = "bstrong", bounds=(-np.inf, np.inf)):
    """H^B (one constant action for the whole population) or H (one action per atom), in closed form."""
    y, w, m, _ = _moments(atoms, weights)
    dV = lions_derivative(P, Pi, y, w)
    dydV = lions_spatial_derivative(P, Pi, y, w)
    d2V = lions_second_derivative(P, Pi, y, w)
    drift0 = lq.A * y + lq.Abar * m
    base = w @ (drift0 * dV - lq.Q * y * y - lq.Qbar * m * m)
    diff = 0.5 * (lq.sigma ** 2 + lq.sigma0 ** 2) * (w @ dydV) + 0.5 * lq.sigma0 ** 2 * (w @ d2V @ w)
    lo, hi = bounds
    if kind == "bstrong":
        best, _ = _quadratic_sup(lq.B * (w @ dV), lq.R, lo, hi)
    elif kind == "strong":
        vals, _ = _quadratic_sup(lq.B * dV, lq.R, lo, hi)
        best = w @ vals
    else:
        raise ValueError("kind must be 'bstrong' or 'strong'")
    return float(base + diff + best)


def hjb_residual(lq: LqSpec, sol: RiccatiSolution, t: float, atoms, weights=None, kind: str | None = None,
                 bounds=(-np.inf, np.inf)) -> float:
    """-d_t V - H[V] at (t, nu) for the quadratic value carried by ``sol``.

    The time derivative comes from a spline through the solution nodes, so the
    residual measures how well the stored solution solves the equation.  The
    terminal condition is not part of the residual (see ``terminal_mismatch``).
    ``kind`` defaults to the Hamiltonian matching the branch of ``sol``.
    """
    kind = kind or sol.branch
    P, Pi, _ = (float(v) for v in sol.smooth(t))
    dP, dPi, dr = (float(v) for v in sol.smooth(t, 1))
    _, _, m, var = _moments(atoms, weights)
    dtV = -(dP * var + dPi * m * m + dr)
    return -dtV - hamiltonian(lq, P, Pi, atoms, weights, kind, bounds)


def lifted_gradient(P, Pi, r, atoms, weights=None, h: float = 1e-6) -> np.ndarray:
    """Finite-difference gradient of the lifted value in each atom position, divided by the weight."""
    y, w, _, _ = _moments(atoms, weights)
    g = np.empty_like(y)
    for i in range(y.size):
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        g[i] = (reward_value(P, Pi, r, yp, w) - reward_value(P, Pi, r, ym, w)) / (2 * h) / w[i]
    return g


def lifted_hessian(P, Pi, r, atoms, weights=None, h: float = 1e-4) -> np.ndarray:
    """Finite-difference Hessian of the lifted value; equals w_i w_j d2V + delta_ij w_i d_y d_nu V."""
    y, w, _, _ = _moments(atoms, weights)
    k = y.size
    H = np.empty((k, k))
    f = lambda z: reward_value(P, Pi, r, z, w)  # noqa: E731
    for i in range(k):
        for j in range(k):
            zs = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                z = y.copy()
                z[i] += si * h
                z[j] += sj * h
                zs.append(f(z))
            H[i, j] = (zs[0] - zs[1] - zs[2] + zs[3]) / (4 * h * h)
    return H
