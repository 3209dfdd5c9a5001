"""Ground-truth plants used to generate data and to cross-check certificates.

The reduction code never looks inside these models; they stand in for the
unknown system and are only queried through ``rhs`` / the simulators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dictionary import (DictionarySpec, build_data_matrix, ct10_dictionary, dt10_dictionary,
                         evaluate, pendulum_dictionary)

CONTINUOUS = "continuous"
DISCRETE = "discrete"

DIVERGENCE_LIMIT = 1e9
GRAVITY = 9.81
PENDULUM_DT_STEP = 0.05

BENCHMARKS = ("ct10", "dt10", "pendulum_ct", "pendulum_dt")


class DivergenceError(RuntimeError):
    def __init__(self, step, state):
        self.step = step
        self.state = state
        super().__init__(f"state diverged at step {step} (max |x| = {np.max(np.abs(state)):.3g})")


# -- closed-form benchmark dynamics -----------------------------------------

def _ct10(x, u):
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = x
    return np.array([
        -2 * x1 + x2 + np.log1p(x10 ** 2) + x1 / (1 + x5 ** 2) + u[0],
        4 * x1 - 3 * x2 - 4 * x3,
        -4 * x3 + 8 * x4,
        8 * x3 - 5 * x4 - 8 * x5 + np.sin(x8 * x10) + u[1],
        -6 * x4 - 6 * x5 - 9 * x6,
        -x5 - 7 * x6 - 10 * x7,
        -x6 - 8 * x7 + 3 * x8,
        -5 * x7 - 9 * x8 + 4 * x9 + x1 / (1 + x3 ** 2) + u[2],
        2 * x8 - 10 * x9 - 10 * x10,
        x9 - 11 * x10 + np.log1p(x10 ** 2) + u[3],
    ])


def _dt10(x, u):
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = x
    return np.array([
        0.7 * x1 + 0.3 * x2 + 0.15 * x6 * x7 + 0.15 * x4 * np.arctan(x4) + 0.15 * u[0],
        0.15 * x1 + 0.55 * x2 + 0.3 * x3,
        0.15 * x2 + 0.4 * x3 + 0.3 * x4,
        0.15 * x3 + 0.25 * x4 + 0.3 * x5 + 0.15 * x9 * x10 + 0.15 * u[1],
        0.15 * x4 + 0.1 * x5 + 0.3 * x6,
        0.15 * x5 - 0.05 * x6 + 0.3 * x7,
        0.15 * x6 - 0.2 * x7 + 0.3 * x8,
        0.15 * x7 - 0.35 * x8 + 0.3 * x9 + 0.15 * np.sin(x1) + 0.15 * u[2],
        0.15 * x8 - 0.5 * x9 + 0.3 * x10,
        0.15 * x9 - 0.65 * x10 + x5 * np.arctan(x5) + 0.15 * u[3],
    ])


def _pendulum_ct(x, u):
    x1, x2, x3, x4 = x
    s = np.sin(x1 - x3)
    return np.array([
        x2,
        GRAVITY * np.sin(x1) - s * x2 ** 2 + 30 * u[0],
        x4,
        GRAVITY * np.sin(x3) - s * x4 ** 2 + 39 * u[1],
    ])


def _pendulum_dt(x, u):
    # forward-Euler discretisation at 0.05 s
    return x + PENDULUM_DT_STEP * _pendulum_ct(x, u)


_CLOSED_FORM = {
    "ct10": (CONTINUOUS, 10, 4, _ct10, ct10_dictionary),
    "dt10": (DISCRETE, 10, 4, _dt10, dt10_dictionary),
    "pendulum_ct": (CONTINUOUS, 4, 2, _pendulum_ct, pendulum_dictionary),
    "pendulum_dt": (DISCRETE, 4, 2, _pendulum_dt, pendulum_dictionary),
}


@dataclass(frozen=True)
class PlantModel:
    time_kind: str
    state_dim: int
    input_dim: int
    benchmark: Optional[str] = None
    A: Optional[np.ndarray] = field(default=None, repr=False)
    B: Optional[np.ndarray] = field(default=None, repr=False)
    spec: Optional[DictionarySpec] = field(default=None, repr=False)

    def __post_init__(self):
        if self.time_kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"time_kind must be {CONTINUOUS!r} or {DISCRETE!r}")
        if self.benchmark is None:
            if self.A is None or self.B is None or self.spec is None:
                raise ValueError("generic plants need A, B and a dictionary spec")
            A = np.array(self.A, dtype=float)
            B = np.array(self.B, dtype=float).reshape(self.state_dim, -1)
            if A.shape != (self.state_dim, self.spec.size):
                raise ValueError(f"A must be {self.state_dim}x{self.spec.size}, got {A.shape}")
            if B.shape != (self.state_dim, self.input_dim):
                raise ValueError(f"B must be {self.state_dim}x{self.input_dim}, got {B.shape}")
            A.flags.writeable = False
            B.flags.writeable = False
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "B", B)
        elif self.benchmark not in _CLOSED_FORM:
            raise ValueError(f"unknown benchmark {self.benchmark!r}")

    @property
    def continuous(self) -> bool:
        return self.time_kind == CONTINUOUS


def benchmark(name: str) -> PlantModel:
    kind, n, m, _, _ = _CLOSED_FORM[name]
    return PlantModel(kind, n, m, benchmark=name)


def benchmark_dictionary(name: str) -> DictionarySpec:
    return _CLOSED_FORM[name][4]()


def linear_in_dictionary(time_kind, A, B, spec: DictionarySpec) -> PlantModel:
    B = np.asarray(B, dtype=float)
    n = spec.state_dim
    return PlantModel(time_kind, n, B.reshape(n, -1).shape[1], A=A, B=B, spec=spec)


def rhs(plant: PlantModel, x, u) -> np.ndarray:
    """x-dot for continuous plants, x-plus for discrete ones."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (plant.state_dim,) or u.shape != (plant.input_dim,):
        raise ValueError(f"expected x:({plant.state_dim},) u:({plant.input_dim},), "
                         f"got {x.shape} {u.shape}")
    if plant.benchmark is not None:
        return _CLOSED_FORM[plant.benchmark][3](x, u)
    return plant.A @ evaluate(plant.spec, x) + plant.B @ u


def rhs_batch(plant: PlantModel, X, U) -> np.ndarray:
    """Column-wise ``rhs`` for state/input matrices (n, T), (m, T)."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if plant.benchmark is not None:
        f = _CLOSED_FORM[plant.benchmark][3]
        return f(X, U)  # closed forms broadcast over trailing axes
    return plant.A @ build_data_matrix(plant.spec, X) + plant.B @ U


def rk4_step(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _check(z, step):
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > DIVERGENCE_LIMIT:
        raise DivergenceError(step, z)


def simulate_ct(plant: PlantModel, x0, input_signal, tau: float, steps: int) -> np.ndarray:
    """RK4 with zero-order-hold input ``input_signal(k * tau)`` on [k tau, (k+1) tau)."""
    if not plant.continuous:
        raise ValueError("simulate_ct needs a continuous-time plant")
    if tau <= 0:
        raise ValueError("tau must be positive")
    out = np.empty((plant.state_dim, steps + 1))
    out[:, 0] = np.asarray(x0, dtype=float)
    for k in range(steps):
        u = np.asarray(input_signal(k * tau), dtype=float)
        out[:, k + 1] = rk4_step(lambda z: rhs(plant, z, u), out[:, k], tau)
        _check(out[:, k + 1], k + 1)
    return out


def simulate_dt(plant: PlantModel, x0, input_signal, steps: int) -> np.ndarray:
    if plant.continuous:
        raise ValueError("simulate_dt needs a discrete-time plant")
    out = np.empty((plant.state_dim, steps + 1))
    out[:, 0] = np.asarray(x0, dtype=float)
    for k in range(steps):
        out[:, k + 1] = rhs(plant, out[:, k], np.asarray(input_signal(k), dtype=float))
        _check(out[:, k + 1], k + 1)
    return out


def estimate_derivatives(states, tau: float) -> np.ndarray:
    """Forward differences; the error is O(tau) for smooth trajectories.

    ``states`` holds T+1 samples; the result has T columns.
    """
    S = np.asarray(states, dtype=float)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ValueError("forward differences need at least 2 samples")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return (S[:, 1:] - S[:, :-1]) / tau


def true_matrices(name: str) -> tuple[np.ndarray, np.ndarray]:
    """(A, B) of a benchmark in its own dictionary basis.

    Only for tests and diagnostics: the reduction pipeline never sees these.
    """
    kind, n, m, _, mkspec = _CLOSED_FORM[name]
    spec = mkspec()
    A = np.zeros((n, spec.size))
    B = np.zeros((n, m))
    idx = {e.label(): k for k, e in enumerate(spec.entries)}

    def put(i, label, c):
        A[i - 1, idx[label]] += c

    if name == "ct10":
        rows = {1: [(1, -2), (2, 1)], 2: [(1, 4), (2, -3), (3, -4)], 3: [(3, -4), (4, 8)],
                4: [(3, 8), (4, -5), (5, -8)], 5: [(4, -6), (5, -6), (6, -9)],
                6: [(5, -1), (6, -7), (7, -10)], 7: [(6, -1), (7, -8), (8, 3)],
                8: [(7, -5), (8, -9), (9, 4)], 9: [(8, 2), (9, -10), (10, -10)],
                10: [(9, 1), (10, -11)]}
        for i, terms in rows.items():
            for j, c in terms:
                put(i, f"coordinate({j})", c)
        put(1, "log1p_square(10)", 1)
        put(1, "rational(1,5)", 1)
        put(4, "sine_product(8,10)", 1)
        put(8, "rational(1,3)", 1)
        put(10, "log1p_square(10)", 1)
        for k, i in enumerate((1, 4, 8, 10)):
            B[i - 1, k] = 1
    elif name == "dt10":
        diag = [0.7, 0.55, 0.4, 0.25, 0.1, -0.05, -0.2, -0.35, -0.5, -0.65]
        for i in range(1, 11):
            put(i, f"coordinate({i})", diag[i - 1])
            if i < 10:
                put(i, f"coordinate({i + 1})", 0.3)
            if i > 1:
                put(i, f"coordinate({i - 1})", 0.15)
        put(1, "product(6,7)", 0.15)
        put(1, "arctan_weighted(4)", 0.15)
        put(4, "product(9,10)", 0.15)
        put(8, "sine(1)", 0.15)
        put(10, "arctan_weighted(5)", 1)
        for k, i in enumerate((1, 4, 8, 10)):
            B[i - 1, k] = 0.15
    else:
        h = PENDULUM_DT_STEP if name == "pendulum_dt" else 1.0
        put(1, "coordinate(2)", h)
        put(2, "sine(1)", h * GRAVITY)
        put(2, "pendulum_coupling(2)", -h)
        put(3, "coordinate(4)", h)
        put(4, "sine(3)", h * GRAVITY)
        put(4, "pendulum_coupling(4)", -h)
        B[1, 0] = 30 * h
        B[3, 1] = 39 * h
        if name == "pendulum_dt":
            A[:, :n] += np.eye(n)
    return A, B
