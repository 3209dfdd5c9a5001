"""Collection of the two input-state trajectories and the data-matrix algebra on them."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import qr, solve_triangular

from .dictionary import DictionarySpec, build_data_matrix
from .plant import (CONTINUOUS, DISCRETE, PlantModel, estimate_derivatives, rhs_batch,
                    simulate_ct, simulate_dt)

log = logging.getLogger(__name__)

RANK_RTOL = 1e-8
EXCITED = "excited"
ZERO_INPUT = "zero_input"


class DataRichnessError(ValueError):
    """A data matrix lacks full row rank, so no right inverse exists.

    At least d+1 samples are required, and in practice noticeably more.
    """


@dataclass(frozen=True)
class TrajectoryBatch:
    """Data matrices of one experiment.

    An experiment is one trajectory or, when ``segments`` lists several
    lengths, a concatenation of short trajectories from independent initial
    states. ``final_states`` holds the trailing sample of each segment.
    """
    time_kind: str
    U: np.ndarray
    X: np.ndarray
    Xplus: np.ndarray
    D: np.ndarray
    tau: Optional[float]
    excitation: str
    final_states: np.ndarray = field(repr=False)
    derivatives: str = "exact"  # "forward" | "oracle" | "exact" (dt)
    segments: tuple = ()

    def __post_init__(self):
        T = self.X.shape[1]
        for name in ("U", "Xplus", "D"):
            if getattr(self, name).shape[1] != T:
                raise ValueError(f"{name} must have {T} columns")
        n = self.X.shape[0]
        if not np.array_equal(self.D[:n], self.X):
            raise ValueError("leading dictionary rows must equal the state samples")
        if self.excitation == ZERO_INPUT and np.any(self.U != 0):
            raise ValueError("zero-input batch with nonzero inputs")
        segs = tuple(int(k) for k in self.segments) or (T,)
        if sum(segs) != T or self.final_states.shape != (n, len(segs)):
            raise ValueError("segment lengths and trailing samples do not match the data")
        object.__setattr__(self, "segments", segs)
        for name in ("U", "X", "Xplus", "D", "final_states"):
            getattr(self, name).flags.writeable = False

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.D.shape[0]

    def segment_states(self):
        """Per segment, the recorded states including the trailing sample."""
        out, k = [], 0
        for j, L in enumerate(self.segments):
            out.append(np.column_stack([self.X[:, k:k + L], self.final_states[:, j]]))
            k += L
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    T: int
    tau: float = 0.01
    input_law: str = "uniform"              # "uniform" | "zero"
    input_bounds: tuple[float, float] = (-1.0, 1.0)
    x0: Optional[tuple[float, ...]] = None  # fixed initial state, else drawn from x0_box
    x0_box: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0
    oracle_derivatives: bool = False
    segment_length: Optional[int] = None    # None: one trajectory
    zero_input_segment_length: Optional[int] = 3

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.input_law not in ("uniform", "zero"):
            raise ValueError(f"unknown input law {self.input_law!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for L in (self.segment_length, self.zero_input_segment_length):
            if L is not None and L < 1:
                raise ValueError("segment lengths must be positive")


def default_sample_count(spec: DictionarySpec) -> int:
    return 2 * (spec.size + 1)


def collect(plant: PlantModel, spec: DictionarySpec, config: ExperimentConfig) -> TrajectoryBatch:
    if spec.state_dim != plant.state_dim:
        raise ValueError("dictionary and plant disagree on the state dimension")
    if config.T < spec.size + 1:
        warnings.warn(f"T={config.T} < d+1={spec.size + 1}: the dictionary matrix cannot "
                      "have full row rank", stacklevel=2)
    rng = np.random.default_rng(config.seed)
    n, m, T = plant.state_dim, plant.input_dim, config.T
    L = config.segment_length or T
    lengths = [L] * (T // L) + ([T % L] if T % L else [])
    x0s = []
    for _ in lengths:
        if config.x0 is not None:
            x0s.append(np.asarray(config.x0, dtype=float))
        else:
            x0s.append(rng.uniform(*config.x0_box, size=n))
    if config.input_law == "zero":
        U = np.zeros((m, T))
    else:
        U = rng.uniform(*config.input_bounds, size=(m, T))

    Xs, Xps, finals, k0 = [], [], [], 0
    for x0, Lk in zip(x0s, lengths):
        Useg = U[:, k0:k0 + Lk]
        if plant.continuous:
            S = simulate_ct(plant, x0, lambda t, Us=Useg: Us[:, min(int(round(t / config.tau)), Lk - 1)],
                            config.tau, Lk)
            if config.oracle_derivatives:
                Xps.append(rhs_batch(plant, S[:, :Lk], Useg))
            else:
                Xps.append(estimate_derivatives(S, config.tau))
        else:
            S = simulate_dt(plant, x0, lambda k, Us=Useg: Us[:, k], Lk)
            Xps.append(S[:, 1:])
        Xs.append(S[:, :Lk])
        finals.append(S[:, Lk])
        k0 += Lk
    if plant.continuous:
        how, tau = ("oracle" if config.oracle_derivatives else "forward"), config.tau
    else:
        how, tau = "exact", None
    X = np.hstack(Xs)
    return TrajectoryBatch(
        time_kind=plant.time_kind, U=U, X=X, Xplus=np.hstack(Xps),
        D=build_data_matrix(spec, X), tau=tau,
        excitation=ZERO_INPUT if config.input_law == "zero" else EXCITED,
        final_states=np.column_stack(finals), derivatives=how, segments=tuple(lengths))


def collect_pair(plant, spec, config: ExperimentConfig):
    """The excited and the zero-input experiment, seeded independently from ``config.seed``."""
    s1, s2 = np.random.SeedSequence(config.seed).generate_state(2)
    excited = collect(plant, spec, replace(config, seed=int(s1), input_law="uniform"))
    zero = collect(plant, spec, replace(config, seed=int(s2), input_law="zero",
                                        segment_length=config.zero_input_segment_length))
    return excited, zero


# -- rank and inverses -------------------------------------------------------

def rank_report(D) -> dict:
    D = np.atleast_2d(np.asarray(D, dtype=float))
    s = np.linalg.svd(D, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return {"full_row_rank": False, "rank": 0, "condition": float("inf"), "rows": D.shape[0]}
    rank = int(np.sum(s > RANK_RTOL * s[0]))
    full = rank == D.shape[0]
    cond = float(s[0] / s[-1]) if full and s[-1] > 0 else float("inf")
    return {"full_row_rank": full, "rank": rank, "condition": cond, "rows": D.shape[0]}


def right_pinv(M) -> np.ndarray:
    """M^T (M M^T)^{-1} through a QR factorisation of M^T."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    p, q = M.shape
    if p > q:
        raise DataRichnessError(f"a {p}x{q} matrix cannot have a right inverse")
    rep = rank_report(M)
    if not rep["full_row_rank"]:
        raise DataRichnessError(
            f"matrix is not full row rank (rank {rep['rank']} < {p}); collect more samples, "
            "at least d+1 are required")
    Qf, R = qr(M.T, mode="economic")
    return Qf @ solve_triangular(R, np.eye(p), trans="T")


def solve_qbar(Dbar) -> np.ndarray:
    """Right inverse of the zero-input dictionary matrix; blocks split at column n."""
    return right_pinv(Dbar)


# -- CSV round trip ------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_batch(path, batch: TrajectoryBatch, spec: DictionarySpec, seed=None) -> Path:
    """Write ``path`` (CSV) plus ``path.meta`` and, for oracle derivatives, ``path.xdot``.

    Each segment is written as its states followed by a trailing row whose
    inputs are ``nan``; a single trajectory therefore has T+1 rows.
    """
    path = Path(path)
    n, m = batch.n, batch.m
    step = batch.tau if batch.time_kind == CONTINUOUS else 1.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
        k0 = 0
        for S, L in zip(batch.segment_states(), batch.segments):
            for k in range(L + 1):
                u = batch.U[:, k0 + k] if k < L else np.full(m, np.nan)
                w.writerow([_fmt(k * step)] + [_fmt(v) for v in S[:, k]] + [_fmt(v) for v in u])
            k0 += L
    meta = {"time_kind": batch.time_kind, "tau": "" if batch.tau is None else _fmt(batch.tau),
            "T": batch.T, "seed": "" if seed is None else seed, "dictionary_hash": spec.digest(),
            "excitation": batch.excitation, "derivatives": batch.derivatives,
            "segments": " ".join(map(str, batch.segments))}
    with open(str(path) + ".meta", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    if batch.derivatives == "oracle":
        with open(str(path) + ".xdot", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + [f"dx{i + 1}" for i in range(n)])
            for k in range(batch.T):
                w.writerow([k] + [_fmt(v) for v in batch.Xplus[:, k]])
    return path


def read_meta(path) -> dict:
    out = {}
    with open(str(path) + ".meta") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def read_batch(path, spec: DictionarySpec) -> TrajectoryBatch:
    meta = read_meta(path)
    if meta.get("dictionary_hash") and meta["dictionary_hash"] != spec.digest():
        raise ValueError(f"{path}: recorded with a different dictionary "
                         f"({meta['dictionary_hash']} != {spec.digest()})")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("u"))
    if n != spec.state_dim:
        raise ValueError(f"{path}: {n} state columns, dictionary expects {spec.state_dim}")
    T = int(meta["T"])
    segs = tuple(int(v) for v in meta.get("segments", str(T)).split())
    if sum(segs) != T or body.shape[0] != T + len(segs):
        raise ValueError(f"{path}: expected {T + len(segs)} rows, found {body.shape[0]}")
    kind = meta["time_kind"]
    tau = float(meta["tau"]) if meta.get("tau") else None
    how = meta.get("derivatives", "forward" if kind == CONTINUOUS else "exact")
    Xs, Us, Xps, finals, r = [], [], [], [], 0
    for L in segs:
        S = body[r:r + L + 1, 1:1 + n].T
        if not np.all(np.isnan(body[r + L, 1 + n:])):
            raise ValueError(f"{path}: row {r + L + 2} should close a segment with nan inputs")
        Xs.append(S[:, :L])
        Us.append(body[r:r + L, 1 + n:1 + n + m].T)
        finals.append(S[:, L])
        if kind == DISCRETE:
            Xps.append(S[:, 1:])
        elif how != "oracle":
            Xps.append(estimate_derivatives(S, tau))
        r += L + 1
    if kind == CONTINUOUS and how == "oracle":
        with open(str(path) + ".xdot", newline="") as fh:
            xd = np.array(list(csv.reader(fh))[1:], dtype=float)
        Xplus = np.ascontiguousarray(xd[:, 1:].T)
    else:
        Xplus = np.hstack(Xps)
    X = np.hstack(Xs)
    return TrajectoryBatch(kind, np.hstack(Us), X, Xplus, build_data_matrix(spec, X), tau,
                           meta.get("excitation", EXCITED), np.column_stack(finals), how, segs)
