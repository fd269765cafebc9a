"""Updating functions: path summaries computed by left-to-right recursion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("running-state", "running-max", "running-average", "composite")


@dataclass(frozen=True)
class UpdatingFunction:
    """A path summary Z_t = Phi_t(X).

    ``composite`` stacks (state, running max, running average) as in the
    classical example; the bare max and average kinds are only updating
    functions jointly with the current state.
    """

    kind: str = "running-state"
    n: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown updating function {self.kind!r}; expected one of {KINDS}")

    @property
    def E_dim(self) -> int:
        return 3 * self.n if self.kind == "composite" else self.n

    def start(self, x0: np.ndarray) -> "UpdatingState":
        return UpdatingState(self, x0)

    def to_json(self) -> dict:
        return {"kind": self.kind, "n": self.n}


class UpdatingState:
    """Incremental evaluator; ``advance`` consumes the next grid value."""

    def __init__(self, phi: UpdatingFunction, x0):
        x0 = np.asarray(x0, float)
        self.phi = phi
        self.x = x0
        self.max = x0.copy()
        self.integral = np.zeros_like(x0)
        self.elapsed = 0.0

    def advance(self, x_next, dt: float):
        x_next = np.asarray(x_next, float)
        self.integral = self.integral + 0.5 * (self.x + x_next) * dt
        self.elapsed += dt
        self.max = np.maximum(self.max, x_next)
        self.x = x_next

    def value(self) -> np.ndarray:
        avg = self.x if self.elapsed == 0.0 else self.integral / self.elapsed
        kind = self.phi.kind
        if kind == "running-state":
            return self.x
        if kind == "running-max":
            return self.max
        if kind == "running-average":
            return avg
        return np.concatenate([self.x, self.max, avg], axis=-1)


def apply_updating(phi: UpdatingFunction, times, values) -> np.ndarray:
    """Summary path on the same grid; ``values`` has shape (J+1, ..., n)."""
    values = np.asarray(values, float)
    times = np.asarray(times, float)
    if values.shape[0] == 0:
        raise ValueError("empty path")
    if values.ndim == 1:
        values = values[:, None]
    if times.shape[0] != values.shape[0]:
        raise ValueError("times and values disagree in length")
    st = phi.start(values[0])
    out = [st.value()]
    for j in range(1, values.shape[0]):
        st.advance(values[j], times[j] - times[j - 1])
        out.append(st.value())
    return np.stack(out)


def summary_at(phi: UpdatingFunction, times, values) -> np.ndarray:
    return apply_updating(phi, times, values)[-1]


def increment_consistency_defect(phi: UpdatingFunction, times, x, y, s_index: int) -> float | None:
    """Largest summary mismatch on [s, t] for a path pair.

    Returns None when the hypotheses fail (summaries differ at s or the
    increments after s differ), otherwise the sup difference after s.
    """
    zx, zy = apply_updating(phi, times, x), apply_updating(phi, times, y)
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if not np.array_equal(zx[s_index], zy[s_index]):
        return None
    if not np.allclose(x[s_index:] - x[s_index], y[s_index:] - y[s_index], rtol=0, atol=1e-14):
        return None
    return float(np.max(np.abs(zx[s_index:] - zy[s_index:])))
