"""Data-dependent LMI feasibility programs in (Q2, H, Phi = P^{-1}).

A problem is a list of linear matrix equalities and affine symmetric matrix
inequalities over named matrix variables. ``solve`` eliminates the
equalities exactly (minimum-norm particular solution plus null-space
directions), keeps only the null-space directions the inequalities can see,
and hands the remaining small conic problem to cvxpy. Residuals are always
recomputed from the returned matrices.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cvxpy as cp
import numpy as np

log = logging.getLogger(__name__)

EPS_REG = 1e-6
EQ_TOL = 1e-6
LMI_TOL = 1e-7
MAX_CONDITION = 1e10
STRICT_MARGIN = 1e-6
NORM_WEIGHT = 1e-3


class InfeasibleError(RuntimeError):
    def __init__(self, message, family=None):
        self.family = family
        super().__init__(message)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    shape: tuple[int, int]
    symmetric: bool = False

    @property
    def size(self) -> int:
        r, c = self.shape
        return r * (r + 1) // 2 if self.symmetric else r * c


@dataclass(frozen=True)
class Term:
    """``left @ V @ right``; ``None`` stands for an identity of matching size."""
    var: str
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Equality:
    label: str
    terms: tuple[Term, ...]
    rhs: np.ndarray


@dataclass(frozen=True)
class MatrixInequality:
    """sym(constant + sum of terms) must be PSD (``sense='psd'``) or NSD.

    The symmetric part is what is constrained, so an off-diagonal block
    entered once with weight 2 stands for the block and its transpose.
    """
    label: str
    terms: tuple[Term, ...]
    size: int
    sense: str = "psd"
    constant: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FeasibilityProblem:
    variables: tuple[Variable, ...]
    equalities: tuple[Equality, ...]
    lmis: tuple[MatrixInequality, ...]
    definite: tuple[str, ...] = ()    # symmetric variables kept positive definite
    homogeneous: bool = False         # constraints invariant under positive scaling
    scalars: dict = field(default_factory=dict)
    kind: str = "generic"

    def __post_init__(self):
        names = {v.name for v in self.variables}
        for c in list(self.equalities) + list(self.lmis):
            for t in c.terms:
                if t.var not in names:
                    raise ValueError(f"{c.label} references undeclared variable {t.var!r}")
        for nme in self.definite:
            if nme not in names:
                raise ValueError(f"undeclared definite variable {nme!r}")

    def var(self, name) -> Variable:
        return next(v for v in self.variables if v.name == name)


@dataclass(frozen=True)
class FeasibilitySolution:
    values: dict
    residuals: dict
    solver_status: str
    phase: str = ""

    @property
    def Q2(self):
        return self.values.get("Q2")

    @property
    def H(self):
        return self.values.get("H")

    @property
    def Phi(self):
        return self.values.get("Phi")

    def max_equality_residual(self) -> float:
        vals = [v for k, v in self.residuals.items() if k.startswith("eq:")]
        return max(vals, default=0.0)

    def min_lmi_margin(self) -> float:
        vals = [v for k, v in self.residuals.items() if k.startswith("lmi:")]
        return min(vals, default=float("inf"))


# -- assembly ----------------------------------------------------------------

def _unit_block(n, d):
    """[I_n; 0] of shape d x n."""
    E = np.zeros((d, n))
    E[:n, :n] = np.eye(n)
    return E


def _common(batch, label_a, label_b, label_c):
    D = np.asarray(batch.D, dtype=float)
    Xp = np.asarray(batch.Xplus, dtype=float)
    n, T, d = batch.n, batch.T, batch.d
    variables = [Variable("H", (T, n)), Variable("Phi", (n, n), symmetric=True)]
    eqs = []
    if d > n:
        variables.insert(0, Variable("Q2", (T, d - n)))
        rhs_b = np.zeros((d, d - n))
        rhs_b[n:, :] = np.eye(d - n)
        eqs.append(Equality(label_a, (Term("Q2", Xp),), np.zeros((n, d - n))))
        eqs.append(Equality(label_b, (Term("Q2", D),), rhs_b))
    eqs.append(Equality(label_c, (Term("H", D), Term("Phi", -_unit_block(n, d))), np.zeros((d, n))))
    return variables, eqs, Xp, n


def assemble_ct(batch_excited, kappa_hat: float) -> FeasibilityProblem:
    """X+ Q2 = 0, D Q2 = [0; I], D H = [Phi; 0], H' X+' + X+ H + kappa_hat Phi <= 0."""
    if batch_excited.time_kind != "continuous":
        raise ValueError("assemble_ct needs a continuous-time batch")
    if not kappa_hat > 0:
        raise ValueError("kappa_hat must be positive")
    variables, eqs, Xp, n = _common(batch_excited, "8a", "8b", "8c")
    lmi = MatrixInequality("8d", (Term("H", 2.0 * Xp), Term("Phi", kappa_hat * np.eye(n))),
                           size=n, sense="nsd")
    return FeasibilityProblem(tuple(variables), tuple(eqs), (lmi,), definite=("Phi",),
                              homogeneous=True, scalars={"kappa_hat": float(kappa_hat)}, kind="ct")


def assemble_dt(batch_excited, kappa: float, mu: float) -> FeasibilityProblem:
    """Equalities as in the ct case plus [[Phi/(1+mu), X+ H], [*, kappa Phi]] >= 0."""
    if batch_excited.time_kind != "discrete":
        raise ValueError("assemble_dt needs a discrete-time batch")
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    if not mu > 0:
        raise ValueError("mu must be positive")
    variables, eqs, Xp, n = _common(batch_excited, "22a", "22b", "22c")
    top = np.vstack([np.eye(n), np.zeros((n, n))])
    bottom = np.vstack([np.zeros((n, n)), np.eye(n)])
    lmi = MatrixInequality("22d", (
        Term("Phi", top / (1 + mu), top.T),
        Term("H", 2.0 * top @ Xp, bottom.T),
        Term("Phi", kappa * bottom, bottom.T),
    ), size=2 * n, sense="psd")
    return FeasibilityProblem(tuple(variables), tuple(eqs), (lmi,), definite=("Phi",),
                              homogeneous=True, scalars={"kappa": float(kappa), "mu": float(mu)},
                              kind="dt")


# -- vectorisation (column-major vec throughout) ----------------------------------

def _duplication(n):
    """vec(S) = Dn @ svec(S), svec stacking the lower triangle column by column."""
    Dn = np.zeros((n * n, n * (n + 1) // 2))
    k = 0
    for j in range(n):
        for i in range(j, n):
            Dn[i + j * n, k] = 1.0
            Dn[j + i * n, k] = 1.0
            k += 1
    return Dn


class _Layout:
    def __init__(self, problem):
        self.offsets = {}
        self.maps = {}
        off = 0
        for v in problem.variables:
            self.offsets[v.name] = off
            r, c = v.shape
            self.maps[v.name] = _duplication(r) if v.symmetric else None
            off += v.size
        self.size = off
        self.problem = problem

    def term_matrix(self, term: Term, out_shape):
        """Matrix K with vec(left V right) = K @ z."""
        v = self.problem.var(term.var)
        r, c = v.shape
        L = np.eye(r) if term.left is None else np.asarray(term.left, dtype=float)
        R = np.eye(c) if term.right is None else np.asarray(term.right, dtype=float)
        if L.shape[1] != r or R.shape[0] != c or (L.shape[0], R.shape[1]) != tuple(out_shape):
            raise ValueError(f"term on {term.var} has inconsistent shapes")
        K = np.kron(R.T, L)
        if self.maps[term.var] is not None:
            K = K @ self.maps[term.var]
        full = np.zeros((K.shape[0], self.size))
        o = self.offsets[term.var]
        full[:, o:o + v.size] = K
        return full

    def unpack(self, z):
        out = {}
        for v in self.problem.variables:
            o = self.offsets[v.name]
            seg = z[o:o + v.size]
            r, c = v.shape
            if v.symmetric:
                M = (self.maps[v.name] @ seg).reshape((r, r), order="F")
                out[v.name] = 0.5 * (M + M.T)
            else:
                out[v.name] = seg.reshape((r, c), order="F")
        return out


def _equality_system(problem, layout):
    rows, rhs, labels = [], [], []
    for e in problem.equalities:
        C = np.asarray(e.rhs, dtype=float)
        K = sum(layout.term_matrix(t, C.shape) for t in e.terms)
        rows.append(K)
        rhs.append(C.reshape(-1, order="F"))
        labels += [e.label] * C.size
    if not rows:
        return np.zeros((0, layout.size)), np.zeros(0), []
    return np.vstack(rows), np.concatenate(rhs), labels


def _lmi_map(lmi, layout):
    k = lmi.size
    K = sum(layout.term_matrix(t, (k, k)) for t in lmi.terms)
    c = np.zeros(k * k) if lmi.constant is None else np.asarray(lmi.constant, float).reshape(-1, order="F")
    return K, c


def dump_triplets(problem: FeasibilityProblem, path) -> None:
    """Sparse text dump: ``eq|lmi <constraint row> <variable column> <coefficient>``."""
    layout = _Layout(problem)
    A, b, labels = _equality_system(problem, layout)
    with open(path, "w") as fh:
        fh.write(f"# kind={problem.kind} variables=" +
                 ",".join(f"{v.name}:{v.shape[0]}x{v.shape[1]}{':sym' if v.symmetric else ''}"
                          for v in problem.variables) + "\n")
        fh.write("# columns: vec (column-major); symmetric variables by lower-triangle svec\n")
        for i, j in zip(*np.nonzero(A)):
            fh.write(f"eq {i} {j} {A[i, j]:.17g}\n")
        for i in np.nonzero(b)[0]:
            fh.write(f"eqrhs {i} {b[i]:.17g}\n")
        for k, lmi in enumerate(problem.lmis):
            K, c = _lmi_map(lmi, layout)
            fh.write(f"# lmi {k} label={lmi.label} size={lmi.size} sense={lmi.sense}\n")
            for i, j in zip(*np.nonzero(K)):
                fh.write(f"lmi{k} {i} {j} {K[i, j]:.17g}\n")
            for i in np.nonzero(c)[0]:
                fh.write(f"lmi{k}const {i} {c[i]:.17g}\n")


# -- solve -----------------------------------------------------------------------

def residuals(problem: FeasibilityProblem, values: dict) -> dict:
    """Max-abs equality violations and LMI eigenvalue margins (>= 0 means satisfied)."""
    out = {}
    for e in problem.equalities:
        acc = -np.asarray(e.rhs, dtype=float)
        for t in e.terms:
            V = values[t.var]
            L = np.eye(V.shape[0]) if t.left is None else t.left
            R = np.eye(V.shape[1]) if t.right is None else t.right
            acc = acc + L @ V @ R
        out["eq:" + e.label] = float(np.max(np.abs(acc))) if acc.size else 0.0
    for lmi in problem.lmis:
        F = np.zeros((lmi.size, lmi.size)) if lmi.constant is None else np.array(lmi.constant, float)
        for t in lmi.terms:
            V = values[t.var]
            L = np.eye(V.shape[0]) if t.left is None else t.left
            R = np.eye(V.shape[1]) if t.right is None else t.right
            F = F + L @ V @ R
        F = 0.5 * (F + F.T)
        w = np.linalg.eigvalsh(F)
        out["lmi:" + lmi.label] = float(w[0]) if lmi.sense == "psd" else float(-w[-1])
    for nme in problem.definite:
        S = values[nme]
        out["sym:" + nme] = float(np.max(np.abs(S - S.T)))
        out["min_eig:" + nme] = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    return out


def _solve_conic(Fmaps, Fconst, sizes, senses, Pmaps, Pconst, psizes, homogeneous, margin,
                 Aeq=None, beq=None, weight=NORM_WEIGHT):
    r = Fmaps[0].shape[1] if Fmaps else Pmaps[0].shape[1]
    v = cp.Variable(r)
    cons = [Aeq @ v == beq] if Aeq is not None and Aeq.shape[0] else []
    for K, c, k, s in zip(Fmaps, Fconst, sizes, senses):
        F = cp.reshape(K @ v + c, (k, k), order="F")
        F = 0.5 * (F + F.T)
        cons.append(F >> margin * np.eye(k) if s == "psd" else F << -margin * np.eye(k))
    t = cp.Variable()
    for K, c, k in zip(Pmaps, Pconst, psizes):
        S = cp.reshape(K @ v + c, (k, k), order="F")
        S = 0.5 * (S + S.T)
        lower = 1.0 if homogeneous else EPS_REG
        cons += [S >> lower * np.eye(k), S << t * np.eye(k)]
    # the norm term picks a moderate solution along directions the inequalities leave free
    # (e.g. the skew part of X+ H, which sets the closed-loop gain)
    obj = t if Pmaps else 0
    if weight > 0:
        obj = obj + weight * sum(cp.norm(K @ v + c, 2) for K, c in zip(Fmaps, Fconst))
    obj = cp.Minimize(obj)
    prob = cp.Problem(obj, cons)
    status = "unsolved"
    for solver in ("CLARABEL", "SCS"):
        if solver not in cp.installed_solvers():
            continue
        try:
            with warnings.catch_warnings():
                # inaccurate solutions are checked against the tolerances below
                warnings.simplefilter("ignore", UserWarning)
                prob.solve(solver=solver)
        except cp.error.SolverError as exc:
            log.info("%s failed: %s", solver, exc)
            continue
        status = f"{solver}:{prob.status}"
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE, cp.INFEASIBLE,
                           cp.INFEASIBLE_INACCURATE):
            break
    if v.value is None:
        return None, status
    return np.asarray(v.value), status


class _Elimination:
    """Minimum-norm particular solution and null-space projector of the equalities.

    Variables coupled by equalities are eliminated group by group. A joint SVD
    would mix groups that share singular values (8b and 8c both involve D), and
    a large particular solution in one group then pollutes the other.
    """

    def __init__(self, problem, layout):
        A, b, labels = _equality_system(problem, layout)
        self.A, self.b, self.labels = A, b, labels
        parent = {v.name: v.name for v in problem.variables}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        row_groups, r0 = [], 0
        for e in problem.equalities:
            names = [t.var for t in e.terms]
            for nm in names[1:]:
                parent[find(nm)] = find(names[0])
            k = np.asarray(e.rhs).size
            row_groups.append((names[0], np.arange(r0, r0 + k)))
            r0 += k
        self.blocks = []
        for root in dict.fromkeys(find(v.name) for v in problem.variables):
            cols = np.concatenate([np.arange(layout.offsets[v.name], layout.offsets[v.name] + v.size)
                                   for v in problem.variables if find(v.name) == root])
            rows = [r for nm, r in row_groups if find(nm) == root]
            if not rows:
                continue
            rows = np.concatenate(rows)
            Ab = A[np.ix_(rows, cols)]
            U, sv, Vt = np.linalg.svd(Ab, full_matrices=False)
            tol = max(Ab.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
            r = int(np.sum(sv > tol))
            self.blocks.append((rows, cols, U[:, :r], sv[:r], Vt[:r]))
        z = np.zeros(layout.size)
        for rows, cols, U, sv, Vt in self.blocks:
            z[cols] = Vt.T @ ((U.T @ b[rows]) / sv)
        self.z0 = self.refine(z)

    def refine(self, z, sweeps=3):
        """Iterative refinement back onto {A z = b}; null-space parts are untouched."""
        z = z.copy()
        for _ in range(sweeps):
            for rows, cols, U, sv, Vt in self.blocks:
                r = self.A[np.ix_(rows, cols)] @ z[cols] - self.b[rows]
                z[cols] -= Vt.T @ ((U.T @ r) / sv)
        return z

    def project(self, K):
        K = K.copy()
        for _, cols, _, _, Vt in self.blocks:
            Kc = K[:, cols]
            K[:, cols] = Kc - (Kc @ Vt.T) @ Vt
        return K


def solve(problem: FeasibilityProblem) -> FeasibilitySolution:
    layout = _Layout(problem)
    elim = _Elimination(problem, layout)
    z0 = elim.z0
    if elim.A.shape[0]:
        res = elim.A @ z0 - elim.b
        if np.max(np.abs(res), initial=0.0) > EQ_TOL:
            worst = elim.labels[int(np.argmax(np.abs(res)))]
            raise InfeasibleError(
                f"linear equalities are inconsistent (worst: {worst}, "
                f"residual {np.max(np.abs(res)):.3g})", family=worst)

    Fraw = [_lmi_map(l, layout) for l in problem.lmis]
    Praw = []
    for nme in problem.definite:
        k = problem.var(nme).shape[0]
        Praw.append((layout.term_matrix(Term(nme), (k, k)), np.zeros(k * k)))

    if not Fraw and not Praw:
        values = layout.unpack(z0)
        return FeasibilitySolution(values, residuals(problem, values), "least_squares")

    # the conic solve only sees the inequality variables and the equalities coupled to
    # them; groups that touch no inequality keep their minimum-norm solution
    touched = np.any(np.vstack([K for K, _ in Fraw + Praw]) != 0, axis=0)
    active = touched.copy()
    rows = []
    for rws, cols, *_ in elim.blocks:
        if touched[cols].any():
            active[cols] = True
            rows.append(rws)
    cols = np.flatnonzero(active)
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
    Aeq, beq = elim.A[np.ix_(rows, cols)], elim.b[rows]
    Fm = [(K[:, cols], c) for K, c in Fraw]
    Pm = [(K[:, cols], c) for K, c in Praw]
    sizes = [l.size for l in problem.lmis]
    senses = [l.sense for l in problem.lmis]
    psizes = [problem.var(nme).shape[0] for nme in problem.definite]

    best = None
    attempts = (("strict", STRICT_MARGIN, NORM_WEIGHT), ("strict-plain", STRICT_MARGIN, 0.0),
                ("boundary", 0.0, 0.0))
    for phase, margin, weight in attempts:
        w, status = _solve_conic([K for K, _ in Fm], [c for _, c in Fm], sizes, senses,
                                 [K for K, _ in Pm], [c for _, c in Pm], psizes,
                                 problem.homogeneous, margin, Aeq, beq, weight)
        if w is None:
            log.info("phase %s: %s", phase, status)
            continue
        z = z0.copy()
        z[cols] = w
        values = layout.unpack(elim.refine(z))
        res = residuals(problem, values)
        sol = FeasibilitySolution(values, res, status, phase)
        if _acceptable(problem, sol):
            best = sol
            break
        best = best or sol
    if best is None or not _acceptable(problem, best):
        fam = ",".join(l.label for l in problem.lmis)
        detail = "" if best is None else f" (min LMI margin {best.min_lmi_margin():.3g})"
        raise InfeasibleError(f"no solution satisfies the matrix inequality {fam}{detail}; "
                              "try a smaller decay rate or more data", family=fam)
    for nme in problem.definite:
        w = np.linalg.eigvalsh(best.values[nme])
        if w[-1] / w[0] > MAX_CONDITION:
            raise SolverError(f"{nme} is ill-conditioned (condition {w[-1] / w[0]:.3g})")
    return best


def _acceptable(problem, sol) -> bool:
    if sol.max_equality_residual() > EQ_TOL:
        return False
    if sol.min_lmi_margin() < -LMI_TOL:
        return False
    for nme in problem.definite:
        if sol.residuals["sym:" + nme] > 1e-10 or sol.residuals["min_eig:" + nme] < EPS_REG / 2:
            return False
    return True


def schur_margin_dt(Xp_H, Phi, kappa, mu) -> float:
    """lambda_min(kappa Phi - (1+mu) (X+H)' Phi^{-1} (X+H)), the Schur form of the dt block LMI."""
    M = kappa * Phi - (1 + mu) * Xp_H.T @ np.linalg.solve(Phi, Xp_H)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
