"""Built-in coefficient templates (constant, linear, quadratic).

Each template is a small frozen dataclass so problems can be round-tripped
through JSON.  All of them depend on the path only through its current value
and on the law only through the current slice mean, hence they are
non-anticipative and Lipschitz in W2.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


def _arr(v, shape):
    a = np.asarray(v, float)
    return np.broadcast_to(a, shape) if a.ndim < len(shape) else a


def _mat(v, rows, cols):
    if v is None:
        return np.zeros((rows, cols))
    a = np.asarray(v, float)
    if a.ndim == 0:
        return a * np.eye(rows, cols)
    return a.reshape(rows, cols)


def _vec(v, n):
    if v is None:
        return np.zeros(n)
    return np.broadcast_to(np.asarray(v, float), (n,)).copy()


class Template:
    kind = ""

    def to_json(self) -> dict:
        out = {"template": self.kind}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass(frozen=True, eq=False)
class ConstantDrift(Template):
    value: np.ndarray
    kind = "constant"

    def __call__(self, t, x, mu, u):
        return self.value


@dataclass(frozen=True, eq=False)
class LinearDrift(Template):
    """b = const + state @ x + mean @ m + control @ u."""

    const: np.ndarray
    state: np.ndarray
    mean: np.ndarray
    control: np.ndarray
    kind = "linear"

    def __call__(self, t, x, mu, u):
        out = self.const + x.current @ self.state.T + u @ self.control.T
        if np.any(self.mean):
            out = out + mu.mean() @ self.mean.T
        return out


@dataclass(frozen=True, eq=False)
class ConstantDiffusion(Template):
    value: np.ndarray  # (n, k)
    kind = "constant"

    def __call__(self, t, x, mu, u):
        return self.value


@dataclass(frozen=True, eq=False)
class LinearDiffusion(Template):
    """sigma_ij = value_ij + state_ij * x_i."""

    value: np.ndarray
    state: np.ndarray
    kind = "linear"

    def __call__(self, t, x, mu, u):
        return self.value + self.state * x.current[..., :, None]


@dataclass(frozen=True, eq=False)
class QuadraticReward(Template):
    """L = const + x'Sx + m'Mm + u'Ru + s.x + r.u (symmetric forms)."""

    const: float
    state: np.ndarray
    mean: np.ndarray
    control: np.ndarray
    state_linear: np.ndarray
    control_linear: np.ndarray
    kind = "quadratic"

    def __call__(self, t, x, mu, u):
        xc = x.current
        out = (self.const + np.einsum("...i,ij,...j->...", xc, self.state, xc)
               + np.einsum("...i,ij,...j->...", u, self.control, u)
               + xc @ self.state_linear + u @ self.control_linear)
        if np.any(self.mean):
            m = mu.mean()
            out = out + np.einsum("...i,ij,...j->...", m, self.mean, m)
        return out


@dataclass(frozen=True, eq=False)
class QuadraticTerminal(Template):
    """g = const + x'Sx + m'Mm + s.x evaluated at the final time."""

    const: float
    state: np.ndarray
    mean: np.ndarray
    state_linear: np.ndarray
    kind = "quadratic"

    def __call__(self, x, mu):
        xc = x.current
        out = self.const + np.einsum("...i,ij,...j->...", xc, self.state, xc) + xc @ self.state_linear
        if np.any(self.mean):
            m = mu.mean()
            out = out + np.einsum("...i,ij,...j->...", m, self.mean, m)
        return out


def constant_drift(value, n):
    return ConstantDrift(_vec(value, n))


def linear_drift(n, m, const=None, state=None, mean=None, control=None):
    return LinearDrift(_vec(const, n), _mat(state, n, n), _mat(mean, n, n), _mat(control, n, m))


def constant_diffusion(value, n, k):
    return ConstantDiffusion(_mat(value, n, k))


def linear_diffusion(n, k, value=None, state=None):
    return LinearDiffusion(_mat(value, n, k), _mat(state, n, k))


def quadratic_reward(n, m, const=0.0, state=None, mean=None, control=None,
                     state_linear=None, control_linear=None):
    return QuadraticReward(float(const), _mat(state, n, n), _mat(mean, n, n), _mat(control, m, m),
                           _vec(state_linear, n), _vec(control_linear, m))


def quadratic_terminal(n, const=0.0, state=None, mean=None, state_linear=None):
    return QuadraticTerminal(float(const), _mat(state, n, n), _mat(mean, n, n), _vec(state_linear, n))


def constant_reward(value, n, m):
    return quadratic_reward(n, m, const=value)


def constant_terminal(value, n):
    return quadratic_terminal(n, const=value)
