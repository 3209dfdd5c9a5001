"""Reduction artifacts shared by the continuous- and discrete-time pipelines.

Both algorithms share the same data products (Q, Qbar, G, Bdata), the same
matching equality for (R1, R2, Ahat, Xi), the same Psi and the same
interface; they differ in the LMI, in rho, and in how the simulation
function is checked.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import lmi
from .dictionary import BasisFunction, DictionarySpec, build_data_matrix
from .experiment import DataRichnessError, TrajectoryBatch, rank_report, right_pinv, solve_qbar

log = logging.getLogger(__name__)

EQ_TOL = lmi.EQ_TOL
ARCHIVE_VERSION = 1


class EqualityError(RuntimeError):
    """The matching equality for (R1, R2, Ahat, Xi) has no solution within tolerance."""


@dataclass(frozen=True)
class ReductionConfig:
    nhat: int = 2
    kappa_hat: Optional[float] = None   # ct
    mu: float = 0.5
    kappa: Optional[float] = None       # dt
    eta: float = 0.99                   # dt
    nu: Optional[float] = None          # dt, sup of |uhat|^2
    equality_mode: str = "fix_Ahat"     # or "fix_R1"
    fixed: Optional[np.ndarray] = None  # Ahat (nhat x nhat) or R1 (n x nhat)
    gamma: float = 0.1                  # Bhat = gamma I
    anchor_rows: Optional[tuple[int, ...]] = None  # 1-based rows of R1 pinned to anchor_scale * I
    anchor_scale: float = 1.0

    def __post_init__(self):
        if self.nhat < 1:
            raise ValueError("nhat must be positive")
        if self.equality_mode not in ("fix_Ahat", "fix_R1"):
            raise ValueError(f"unknown equality mode {self.equality_mode!r}")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.fixed is not None:
            object.__setattr__(self, "fixed", np.atleast_2d(np.asarray(self.fixed, dtype=float)))
        if self.anchor_rows is not None:
            rows = tuple(int(r) for r in self.anchor_rows)
            if len(rows) != self.nhat or len(set(rows)) != len(rows) or min(rows) < 1:
                raise ValueError("anchor_rows needs nhat distinct positive row indices")
            object.__setattr__(self, "anchor_rows", rows)

    def fixed_matrix(self, n):
        if self.fixed is not None:
            return self.fixed
        if self.equality_mode == "fix_Ahat":
            return np.zeros((self.nhat, self.nhat))
        raise ValueError("fix_R1 requires the fixed R1 matrix")

    def digest(self) -> str:
        d = asdict(self)
        d["fixed"] = None if self.fixed is None else self.fixed.tolist()
        return hashlib.sha256(repr(sorted(d.items())).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Reduction:
    time_kind: str
    spec: DictionarySpec = field(repr=False)
    P: np.ndarray
    H: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    Qbar: np.ndarray = field(repr=False)
    R1: np.ndarray
    R2: np.ndarray = field(repr=False)
    Ahat: np.ndarray
    Bhat: np.ndarray
    Chat: np.ndarray = field(repr=False)
    Xi: np.ndarray = field(repr=False)
    Psi: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)
    Bdata: np.ndarray = field(repr=False)
    XQ: np.ndarray = field(repr=False)        # X+ Q, the data closed-loop matrix
    XbarQbar: np.ndarray = field(repr=False)  # Xbar+ Qbar, the data estimate of A
    alpha: float
    kappa: float
    rho: float
    mu: float
    kappa_hat: Optional[float] = None
    eta: Optional[float] = None
    nu: Optional[float] = None
    residuals: dict = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not np.array_equal(self.Chat, self.R1):
            raise ValueError("Chat must equal R1")
        w = np.linalg.eigvalsh(self.P)
        if w[0] <= 0:
            raise ValueError("P must be positive definite")

    @property
    def n(self):
        return self.R1.shape[0]

    @property
    def nhat(self):
        return self.R1.shape[1]

    @property
    def m(self):
        return self.G.shape[0]

    @property
    def d(self):
        return self.Q.shape[1]

    @property
    def R(self):
        return np.vstack([self.R1, self.R2])

    def replace(self, **kw) -> "Reduction":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return Reduction(**vals)


# -- algebra ---------------------------------------------------------------------

def data_hash(*batches) -> str:
    h = hashlib.sha256()
    for b in batches:
        for M in (b.U, b.X, b.Xplus):
            h.update(np.ascontiguousarray(M, dtype=float).tobytes())
    return h.hexdigest()[:16]


def solve_equality(Abar1, Abar2, Bdata, mode, fixed, nhat, anchor_rows=None, anchor_scale=1.0):
    """Solve Abar1 R1 + Abar2 R2 = R1 Ahat - Bdata Xi.

    ``mode='fix_Ahat'``: unknowns (R1, R2, Xi). The system is homogeneous, so
    the minimum-norm solution is zero unless rows of R1 are pinned; with
    ``anchor_rows`` those rows are fixed to ``anchor_scale * I`` and the
    minimum-norm solution over the remaining unknowns is returned.
    ``mode='fix_R1'``: unknowns (Ahat, R2, Xi), least squares.
    Returns a dict with R1, R2, Ahat, Xi and the max-abs residual.
    """
    Abar1 = np.atleast_2d(np.asarray(Abar1, float))
    n = Abar1.shape[0]
    Abar2 = np.asarray(Abar2, float).reshape(n, -1)
    Bdata = np.asarray(Bdata, float).reshape(n, -1)
    fixed = np.atleast_2d(np.asarray(fixed, float))
    p, m = Abar2.shape[1], Bdata.shape[1]
    In, Ik = np.eye(n), np.eye(nhat)

    if mode == "fix_Ahat":
        if fixed.shape != (nhat, nhat):
            raise ValueError(f"fixed Ahat must be {nhat}x{nhat}")
        Ahat = fixed
        K = np.hstack([np.kron(Ik, Abar1) - np.kron(Ahat.T, In),
                       np.kron(Ik, Abar2), np.kron(Ik, Bdata)])
        z_fixed = np.zeros(K.shape[1])
        pinned = np.zeros(K.shape[1], dtype=bool)
        if anchor_rows is not None:
            if len(anchor_rows) != nhat or max(anchor_rows) > n:
                raise ValueError("anchor rows must be nhat row indices of R1")
            for j in range(nhat):
                for i, r in enumerate(anchor_rows):
                    idx = (r - 1) + j * n
                    pinned[idx] = True
                    z_fixed[idx] = anchor_scale if i == j else 0.0
        rhs = -K[:, pinned] @ z_fixed[pinned]
        z_free = np.linalg.lstsq(K[:, ~pinned], rhs, rcond=None)[0]
        z = z_fixed.copy()
        z[~pinned] = z_free
        R1 = z[:n * nhat].reshape((n, nhat), order="F")
        R2 = z[n * nhat:(n + p) * nhat].reshape((p, nhat), order="F")
        Xi = z[(n + p) * nhat:].reshape((m, nhat), order="F")
    elif mode == "fix_R1":
        R1 = fixed
        if R1.shape != (n, nhat):
            raise ValueError(f"fixed R1 must be {n}x{nhat}")
        # R1 Ahat - Abar2 R2 - Bdata Xi = Abar1 R1
        K = np.hstack([np.kron(Ik, R1), -np.kron(Ik, Abar2), -np.kron(Ik, Bdata)])
        rhs = (Abar1 @ R1).reshape(-1, order="F")
        z = np.linalg.lstsq(K, rhs, rcond=None)[0]
        Ahat = z[:nhat * nhat].reshape((nhat, nhat), order="F")
        R2 = z[nhat * nhat:(nhat + p) * nhat].reshape((p, nhat), order="F")
        Xi = z[(nhat + p) * nhat:].reshape((m, nhat), order="F")
    else:
        raise ValueError(f"unknown equality mode {mode!r}")

    res = Abar1 @ R1 + Abar2 @ R2 - R1 @ Ahat + Bdata @ Xi
    resid = float(np.max(np.abs(res))) if res.size else 0.0
    if resid > EQ_TOL:
        over = n > (p + n + nhat + m) / 2
        raise EqualityError(
            f"matching equality has no solution (residual {resid:.3g})"
            + ("; the system is overdetermined for this n, nhat, d and m" if over else ""))
    return {"R1": R1, "R2": R2, "Ahat": Ahat, "Xi": Xi, "residual": resid}


def compute_psi(P, Bdata, R1, Bhat) -> np.ndarray:
    """argmin over Psi of |sqrt(P) (Bdata Psi - R1 Bhat)|, i.e. (Bd' P Bd)^{-1} Bd' P R1 Bhat."""
    P, Bdata, R1, Bhat = (np.atleast_2d(np.asarray(a, float)) for a in (P, Bdata, R1, Bhat))
    Gram = Bdata.T @ P @ Bdata
    rhs = Bdata.T @ P @ R1 @ Bhat
    if np.linalg.matrix_rank(Gram) < Gram.shape[0]:
        warnings.warn("Bdata' P Bdata is singular; falling back to the pseudo-inverse", stacklevel=2)
        return np.linalg.pinv(Gram) @ rhs
    return np.linalg.solve(Gram, rhs)


def rho_residual(P, Bdata, Psi, R1, Bhat) -> float:
    """|sqrt(P) (Bdata Psi - R1 Bhat)|^2 in the spectral norm."""
    M = Bdata @ Psi - R1 @ Bhat
    if M.size == 0:
        return 0.0
    return float(max(np.linalg.eigvalsh(M.T @ P @ M)[-1], 0.0))


def _cols(v, k):
    v = np.asarray(v, dtype=float)
    if v.shape[0] != k:
        raise ValueError(f"expected leading dimension {k}, got {v.shape}")
    return v


def interface(red: Reduction, x, xhat, uhat) -> np.ndarray:
    """u = G (D(x) - R xhat) + Xi xhat + Psi uhat; columns are independent points."""
    x, xhat, uhat = _cols(x, red.n), _cols(xhat, red.nhat), _cols(uhat, red.Psi.shape[1])
    single = x.ndim == 1
    X = x.reshape(red.n, -1)
    Dx = build_data_matrix(red.spec, X)
    Xh = xhat.reshape(red.nhat, -1)
    Uh = uhat.reshape(uhat.shape[0], -1)
    u = red.G @ (Dx - red.R @ Xh) + red.Xi @ Xh + red.Psi @ Uh
    return u[:, 0] if single else u


def closed_loop_rhs_data(red: Reduction, batches, x, xhat, uhat) -> np.ndarray:
    """X+ Q D(x) - (X+ Q - Xbar+ Qbar) R xhat + Bdata (Xi xhat + Psi uhat), from data only."""
    excited, zero = batches
    XQ = excited.Xplus @ red.Q
    XbQb = zero.Xplus @ red.Qbar
    return _data_rhs(red, XQ, XbQb, x, xhat, uhat)


def _data_rhs(red, XQ, XbQb, x, xhat, uhat):
    x = _cols(x, red.n)
    single = x.ndim == 1
    X = x.reshape(red.n, -1)
    Xh = np.asarray(xhat, float).reshape(red.nhat, -1)
    Uh = np.asarray(uhat, float).reshape(red.Psi.shape[1], -1)
    out = XQ @ build_data_matrix(red.spec, X) - (XQ - XbQb) @ red.R @ Xh \
        + red.Bdata @ (red.Xi @ Xh + red.Psi @ Uh)
    return out[:, 0] if single else out


def data_model_rhs(red: Reduction, x, xhat, uhat):
    """Same as ``closed_loop_rhs_data`` using the products stored in the reduction."""
    return _data_rhs(red, red.XQ, red.XbarQbar, x, xhat, uhat)


def sf_value(red: Reduction, x, xhat):
    """S(x, xhat) = (x - R1 xhat)' P (x - R1 xhat), column-wise."""
    E = np.asarray(x, float).reshape(red.n, -1) - red.R1 @ np.asarray(xhat, float).reshape(red.nhat, -1)
    return np.einsum("ik,ij,jk->k", E, red.P, E)


def rom_step(red: Reduction, xhat, uhat):
    return red.Ahat @ xhat + red.Bhat @ uhat


# -- the shared pipeline ------------------------------------------------------------

def check_batches(excited: TrajectoryBatch, zero: TrajectoryBatch, spec: DictionarySpec, kind):
    for b, nm in ((excited, "excited"), (zero, "zero-input")):
        if b.time_kind != kind:
            raise ValueError(f"{nm} batch is {b.time_kind}, expected {kind}")
        if b.d != spec.size or b.n != spec.state_dim:
            raise ValueError(f"{nm} batch does not match the dictionary dimensions")
    if np.any(zero.U != 0):
        raise ValueError("the second batch must have zero input")
    for b, nm in ((excited, "D"), (zero, "Dbar")):
        rep = rank_report(b.D)
        if not rep["full_row_rank"]:
            raise DataRichnessError(
                f"{nm} has rank {rep['rank']} < d = {spec.size}; at least d+1 samples are "
                "required and in practice more")


def build(kind, excited, zero, spec, config: ReductionConfig, problem, rho_factor, scalars):
    """Steps common to both algorithms once the LMI problem is assembled."""
    n, d, nhat = spec.state_dim, spec.size, config.nhat
    if nhat > n:
        raise ValueError("nhat cannot exceed n")
    Qbar = solve_qbar(zero.D)
    sol = lmi.solve(problem)
    Phi = sol.Phi
    P = np.linalg.inv(Phi)
    P = 0.5 * (P + P.T)
    Q1 = sol.H @ P
    Q = np.hstack([Q1, sol.Q2]) if d > n else Q1
    G = excited.U @ Q
    XQ = excited.Xplus @ Q
    XbQb = zero.Xplus @ Qbar
    try:
        Bdata = (XQ - XbQb) @ right_pinv(G)
    except DataRichnessError as exc:
        raise DataRichnessError(f"U Q lacks full row rank: {exc}") from exc
    anchor = None
    if config.equality_mode == "fix_Ahat":
        # without pinned rows the minimum-norm solution of the homogeneous system is R1 = 0
        anchor = config.anchor_rows or tuple(range(1, nhat + 1))
    eq = solve_equality(XbQb[:, :n], XbQb[:, n:], Bdata, config.equality_mode,
                        config.fixed_matrix(n), nhat, anchor, config.anchor_scale)
    R1 = eq["R1"]
    Bhat = config.gamma * np.eye(nhat)
    Psi = compute_psi(P, Bdata, R1, Bhat)
    alpha = float(np.linalg.eigvalsh(P)[0])
    rho = rho_factor * rho_residual(P, Bdata, Psi, R1, Bhat)

    res = dict(sol.residuals)
    res["DQ-I"] = float(np.max(np.abs(excited.D @ Q - np.eye(d))))
    res["DbarQbar-I"] = float(np.max(np.abs(zero.D @ Qbar - np.eye(d))))
    res["eq:" + ("8e" if kind == "continuous" else "22e")] = eq["residual"]
    if res["DQ-I"] > EQ_TOL:
        raise EqualityError(f"D Q differs from the identity by {res['DQ-I']:.3g}")
    meta = {"dictionary_hash": spec.digest(), "config_hash": config.digest(),
            "data_hash": data_hash(excited, zero), "solver": sol.solver_status,
            "lmi_phase": sol.phase, "T": excited.T, "derivatives": excited.derivatives,
            "equality_mode": config.equality_mode,
            "anchor_rows": " ".join(map(str, anchor)) if anchor else "",
            "anchor_scale": config.anchor_scale}
    return Reduction(kind, spec, P, sol.H, Q, Qbar, R1, eq["R2"], eq["Ahat"], Bhat, R1.copy(),
                     eq["Xi"], Psi, G, Bdata, XQ, XbQb, alpha, scalars.pop("kappa"), rho,
                     residuals=res, meta=meta, **scalars)


# -- verification sampling -----------------------------------------------------

def _box(b, k):
    lo, hi = np.asarray(b[0], float), np.asarray(b[1], float)
    return np.broadcast_to(lo, (k,)), np.broadcast_to(hi, (k,))


def sample_points(red: Reduction, count, seed, x_box=(-1.0, 1.0), xhat_box=(-1.0, 1.0),
                  uhat_box=(-1.0, 1.0), near_fraction=0.5, uhat_override=None):
    """(x, xhat, uhat) samples, columns.

    A share of the points is placed near the diagonal x = R1 xhat + e with
    |e| spread over several decades; that is where a too-small rho shows up.
    """
    rng = np.random.default_rng(seed)
    n, k = red.n, red.nhat
    mhat = red.Psi.shape[1]
    lo, hi = _box(xhat_box, k)
    Xh = rng.uniform(lo, hi, size=(count, k)).T
    lo, hi = _box(uhat_box, mhat)
    Uh = rng.uniform(lo, hi, size=(count, mhat)).T if uhat_override is None else uhat_override
    lo, hi = _box(x_box, n)
    X = rng.uniform(lo, hi, size=(count, n)).T
    near = rng.random(count) < near_fraction
    dirs = rng.standard_normal((n, count))
    dirs /= np.linalg.norm(dirs, axis=0)
    span = float(np.max(hi - lo)) if n else 1.0
    mags = span * 10.0 ** rng.uniform(-5, 0, size=count)
    Xn = red.R1 @ Xh + dirs * mags
    X[:, near] = Xn[:, near]
    return X, Xh, Uh


@dataclass
class SFReport:
    kind: str
    samples: int
    violations_bound: int
    violations_decrease: int
    max_excess_bound: float
    max_excess_decrease: float
    source: str

    @property
    def passed(self) -> bool:
        return self.violations_bound == 0 and self.violations_decrease == 0

    def lines(self):
        c = "2" if self.kind == "continuous" else "16"
        return [f"samples={self.samples} source={self.source}",
                f"condition {c}a violations={self.violations_bound} max_excess={self.max_excess_bound:.3e}",
                f"condition {c}b violations={self.violations_decrease} max_excess={self.max_excess_decrease:.3e}",
                f"verdict={'pass' if self.passed else 'FAIL'}"]


def sf_tolerance(scale):
    return 1e-6 * (1.0 + np.abs(scale))


# -- archive -------------------------------------------------------------------------

_MATRICES = ("P", "H", "Q", "Qbar", "R1", "R2", "Ahat", "Bhat", "Chat", "Xi", "Psi", "G",
             "Bdata", "XQ", "XbarQbar")
_SCALARS = ("alpha", "kappa", "rho", "mu", "kappa_hat", "eta", "nu")


def _num(v) -> str:
    return format(float(v), ".17g")


def save_reduction(red: Reduction, path, extra=None) -> None:
    """Text archive: ``meta``/``scalar``/``residual`` lines, dictionary records and
    ``matrix NAME rows cols`` headers followed by row-major rows."""
    with open(path, "w") as fh:
        fh.write(f"# reduction archive v{ARCHIVE_VERSION}\n")
        fh.write(f"meta time_kind {red.time_kind}\n")
        for k, v in sorted(red.meta.items()):
            fh.write(f"meta {k} {v}\n")
        for k, v in sorted((extra or {}).items()):
            fh.write(f"meta {k} {v}\n")
        fh.write(f"meta state_dim {red.spec.state_dim}\n")
        for e in red.spec.entries:
            fh.write(f"basis {e.kind} {' '.join(map(str, e.args))}\n")
        for s in _SCALARS:
            v = getattr(red, s)
            if v is not None:
                fh.write(f"scalar {s} {_num(v)}\n")
        for k, v in sorted(red.residuals.items()):
            fh.write(f"residual {k} {_num(v)}\n")
        for nme in _MATRICES:
            M = np.atleast_2d(getattr(red, nme))
            fh.write(f"matrix {nme} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(" ".join(_num(v) for v in row) + "\n")


def load_reduction(path) -> Reduction:
    meta, scalars, residuals, mats, basis = {}, {}, {}, {}, []
    kind, state_dim = None, None
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    i = 0
    while i < len(lines):
        ln = lines[i]
        i += 1
        if not ln or ln.startswith("#"):
            continue
        tag, _, rest = ln.partition(" ")
        if tag == "meta":
            k, _, v = rest.partition(" ")
            if k == "time_kind":
                kind = v
            elif k == "state_dim":
                state_dim = int(v)
            else:
                meta[k] = v
        elif tag == "basis":
            parts = rest.split()
            basis.append(BasisFunction(parts[0], tuple(int(a) for a in parts[1:])))
        elif tag == "scalar":
            k, v = rest.split()
            scalars[k] = float(v)
        elif tag == "residual":
            k, v = rest.split()
            residuals[k] = float(v)
        elif tag == "matrix":
            nme, r, c = rest.split()
            r, c = int(r), int(c)
            rows = [np.array(lines[i + j].split(), dtype=float).reshape(c) for j in range(r)]
            mats[nme] = np.array(rows).reshape(r, c)
            i += r
        else:
            raise ValueError(f"{path}: unrecognised line {ln!r}")
    missing = [m for m in _MATRICES if m not in mats]
    if kind is None or state_dim is None or missing:
        raise ValueError(f"{path}: incomplete archive (missing {missing or 'header'})")
    spec = DictionarySpec(state_dim, tuple(basis))
    kw = {s: scalars.get(s) for s in _SCALARS}
    return Reduction(kind, spec, residuals=residuals, meta=meta, **mats, **kw)
