"""Extended dictionaries D(x) = [x; N(x)] built from a closed set of basis kinds.

Indices in specs and config records are 1-based, matching how state
coordinates are usually written down (x1, ..., xn).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# kind -> number of integer arguments
KINDS = {
    "coordinate": 1,
    "log1p_square": 1,       # ln(1 + x_i^2)
    "rational": 2,           # x_i / (1 + x_j^2)
    "sine_product": 2,       # sin(x_i x_j)
    "cosine_product": 2,     # cos(x_i x_j)
    "sine": 1,
    "cosine": 1,
    "arctan_weighted": 1,    # x_i atan(x_i)
    "product": 2,            # x_i x_j
    "pendulum_coupling": 1,  # sin(x_1 - x_3) x_i^2
}


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class BasisFunction:
    kind: str
    args: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DictionaryError(f"unknown basis kind {self.kind!r}")
        if len(self.args) != KINDS[self.kind]:
            raise DictionaryError(
                f"{self.kind} takes {KINDS[self.kind]} index argument(s), got {len(self.args)}")
        if any(int(a) != a or a < 1 for a in self.args):
            raise DictionaryError(f"indices must be positive integers: {self.args}")
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))

    def max_index(self) -> int:
        if self.kind == "pendulum_coupling":
            return max(3, self.args[0])
        return max(self.args)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on a state vector (n,) or a batch of states (n, T)."""
        a = [x[i - 1] for i in self.args]
        k = self.kind
        if k == "coordinate":
            return a[0]
        if k == "log1p_square":
            return np.log1p(a[0] ** 2)
        if k == "rational":
            return a[0] / (1.0 + a[1] ** 2)
        if k == "sine_product":
            return np.sin(a[0] * a[1])
        if k == "cosine_product":
            return np.cos(a[0] * a[1])
        if k == "sine":
            return np.sin(a[0])
        if k == "cosine":
            return np.cos(a[0])
        if k == "arctan_weighted":
            return a[0] * np.arctan(a[0])
        if k == "product":
            return a[0] * a[1]
        # pendulum_coupling
        return np.sin(x[0] - x[2]) * a[0] ** 2

    def label(self) -> str:
        return f"{self.kind}({','.join(map(str, self.args))})"


@dataclass(frozen=True)
class DictionarySpec:
    """Ordered basis list; the first ``state_dim`` entries are the coordinates."""

    state_dim: int
    entries: tuple[BasisFunction, ...]

    def __post_init__(self):
        n = self.state_dim
        if n < 1:
            raise DictionaryError("state_dim must be positive")
        object.__setattr__(self, "entries", tuple(self.entries))
        if len(self.entries) < n:
            raise DictionaryError(f"dictionary has {len(self.entries)} entries, needs at least n={n}")
        for i, e in enumerate(self.entries[:n]):
            if e != BasisFunction("coordinate", (i + 1,)):
                raise DictionaryError(
                    f"entry {i} must be coordinate({i + 1}), got {e.label()}")
        for e in self.entries[n:]:
            if e.kind == "coordinate":
                raise DictionaryError("nonlinear part may not contain coordinate entries")
        for e in self.entries:
            if e.max_index() > n:
                raise DictionaryError(f"{e.label()} references a state index above n={n}")

    @property
    def size(self) -> int:
        return len(self.entries)

    d = size

    @classmethod
    def build(cls, state_dim: int, nonlinear: Iterable[tuple[str, Sequence[int]]] = ()):
        """Coordinates 1..n followed by the given (kind, args) nonlinear terms."""
        head = [BasisFunction("coordinate", (i + 1,)) for i in range(state_dim)]
        tail = [BasisFunction(k, tuple(a)) for k, a in nonlinear]
        return cls(state_dim, tuple(head + tail))

    def to_records(self) -> list[dict]:
        return [{"kind": e.kind, "args": list(e.args)} for e in self.entries]

    @classmethod
    def from_records(cls, state_dim: int, records: Iterable[dict]) -> "DictionarySpec":
        return cls(state_dim, tuple(BasisFunction(r["kind"], tuple(r["args"])) for r in records))

    def digest(self) -> str:
        blob = json.dumps({"n": self.state_dim, "entries": self.to_records()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate(spec: DictionarySpec, state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    if x.shape != (spec.state_dim,):
        raise DictionaryError(f"state must have shape ({spec.state_dim},), got {x.shape}")
    out = np.empty(spec.size)
    out[: spec.state_dim] = x
    for k, e in enumerate(spec.entries[spec.state_dim:], start=spec.state_dim):
        out[k] = e(x)
    return out


def build_data_matrix(spec: DictionarySpec, states) -> np.ndarray:
    """Stack D(x_k) column by column for a state matrix of shape (n, T)."""
    X = np.asarray(states, dtype=float)
    if X.ndim != 2 or X.shape[0] != spec.state_dim:
        raise DictionaryError(f"states must have shape ({spec.state_dim}, T), got {X.shape}")
    if X.shape[1] < 1:
        raise DictionaryError("need at least one sample")
    out = np.empty((spec.size, X.shape[1]))
    out[: spec.state_dim] = X
    for k, e in enumerate(spec.entries[spec.state_dim:], start=spec.state_dim):
        out[k] = e(X)
    return out


# -- dictionaries of the built-in benchmarks ---------------------------------

def ct10_dictionary() -> DictionarySpec:
    terms = [("log1p_square", (i,)) for i in range(1, 11)]
    terms += [("rational", (1, j)) for j in range(1, 6)]
    terms += [("sine_product", (8, 10)), ("cosine_product", (8, 10))]
    return DictionarySpec.build(10, terms)


def dt10_dictionary() -> DictionarySpec:
    terms = [("arctan_weighted", (i,)) for i in range(1, 6)]
    terms += [("product", (5, 6)), ("product", (6, 7)), ("product", (7, 8)),
              ("product", (8, 9)), ("product", (9, 10))]
    terms += [("sine", (1,)), ("cosine", (10,)), ("sine", (2,)), ("cosine", (8,)),
              ("sine", (3,)), ("cosine", (6,))]
    return DictionarySpec.build(10, terms)


def pendulum_dictionary() -> DictionarySpec:
    terms = [("sine", (i,)) for i in range(1, 5)]
    terms += [("pendulum_coupling", (i,)) for i in range(1, 5)]
    return DictionarySpec.build(4, terms)
