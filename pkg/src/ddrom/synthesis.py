"""Grid abstraction and reach-while-avoid synthesis for 2-D linear ROMs, plus
refinement of the ROM controller to the full-order plant through the interface.

Only the ROM is abstracted. The closeness certificate enters by inflating
the obstacles, so a ROM trajectory that keeps its distance from the
inflated boxes drags the full-order output along at a safe distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .mor_ct import simulate_pair_ct
from .mor_dt import simulate_pair_dt
from .plant import PlantModel
from .reduction import Reduction

log = logging.getLogger(__name__)

PAD = 1e-9


class SynthesisError(RuntimeError):
    pass


class UnsafeCellError(RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


def _box(b):
    b = np.asarray(b, dtype=float).reshape(2, 2)
    if np.any(b[:, 0] > b[:, 1]):
        raise ValueError(f"box bounds must be ordered: {b.tolist()}")
    return b


def inflate(box, r):
    b = _box(box).copy()
    b[:, 0] -= r
    b[:, 1] += r
    return b


@dataclass(frozen=True)
class ReachAvoidProblem:
    """Boxes are ((x1_lo, x1_hi), (x2_lo, x2_hi)) in ROM coordinates."""
    state_box: np.ndarray
    target_box: np.ndarray
    initial_box: np.ndarray
    obstacle_boxes: tuple = ()
    input_box: np.ndarray = field(default_factory=lambda: np.array([[-1.0, 1.0], [-1.0, 1.0]]))
    state_cells: tuple[int, int] = (100, 100)
    input_cells: tuple[int, int] = (7, 7)
    horizon: int = 1000
    sample_time: Optional[float] = None   # ct ROMs
    steps_per_transition: int = 1         # dt ROMs: input held for this many steps
    sweep_points: int = 10                # ct ROMs: intermediate times checked per transition

    def __post_init__(self):
        for nme in ("state_box", "target_box", "initial_box", "input_box"):
            object.__setattr__(self, nme, _box(getattr(self, nme)))
        object.__setattr__(self, "obstacle_boxes", tuple(_box(o) for o in self.obstacle_boxes))
        if min(self.state_cells) < 2 or min(self.input_cells) < 1:
            raise ValueError("need at least 2 state cells per axis and 1 input point per channel")
        sb = self.state_box
        for b in (self.target_box, self.initial_box) + self.obstacle_boxes:
            if np.any(b[:, 0] < sb[:, 0] - PAD) or np.any(b[:, 1] > sb[:, 1] + PAD):
                raise ValueError("target, initial and obstacle boxes must lie in the state box")
        if self.sample_time is not None and self.sample_time <= 0:
            raise ValueError("sample_time must be positive")
        if self.steps_per_transition < 1:
            raise ValueError("steps_per_transition must be positive")

    @property
    def cell_size(self):
        return (self.state_box[:, 1] - self.state_box[:, 0]) / np.asarray(self.state_cells)

    def input_grid(self) -> np.ndarray:
        """(k, 2) input points in lexicographic order."""
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2])
                for (lo, hi), c in zip(self.input_box, self.input_cells)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return g.reshape(-1, 2)

    def uhat_inf(self) -> float:
        return float(np.max(np.linalg.norm(self.input_grid(), axis=1)))

    def cell_of(self, xhat):
        idx = np.floor((np.asarray(xhat, float) - self.state_box[:, 0]) / self.cell_size).astype(int)
        return tuple(idx)

    def cell_box(self, i, j):
        lo = self.state_box[:, 0] + self.cell_size * np.array([i, j])
        return np.column_stack([lo, lo + self.cell_size])


@dataclass(frozen=True)
class Abstraction:
    """Per (input, cell): successor cell range and a blocked flag."""
    inputs: np.ndarray           # (k, 2)
    succ_lo: np.ndarray          # (k, Nx, Ny, 2) inclusive cell indices
    succ_hi: np.ndarray
    blocked: np.ndarray          # (k, Nx, Ny)
    succ_boxes: np.ndarray       # (k, Nx, Ny, 2, 2) successor interval hulls
    inflation: float
    time_kind: str


def _maps(red_or_mats, problem):
    """Per-step (A, B) lists describing the intermediate and final transition maps."""
    if isinstance(red_or_mats, Reduction):
        A, B, kind = red_or_mats.Ahat, red_or_mats.Bhat, red_or_mats.time_kind
    else:
        A, B, kind = red_or_mats
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    if A.shape != (2, 2) or B.shape[0] != 2:
        raise ValueError(f"grid synthesis supports 2-D ROMs only (got nhat={A.shape[0]})")
    if kind == "continuous":
        if problem.sample_time is None:
            raise ValueError("continuous ROMs need a sample_time")
        m = B.shape[1]
        J = problem.sweep_points
        out = []
        for j in range(1, J + 1):
            s = problem.sample_time * j / J
            M = np.zeros((2 + m, 2 + m))
            M[:2, :2], M[:2, 2:] = A, B
            E = expm(M * s)
            out.append((E[:2, :2], E[:2, 2:]))
        return out, kind, A, B
    out, Ak, Bk = [], np.eye(2), np.zeros_like(B)
    for _ in range(problem.steps_per_transition):
        Ak, Bk = A @ Ak, A @ Bk + B
        out.append((Ak.copy(), Bk.copy()))
    return out, kind, A, B


def abstract_rom(red_or_mats, problem: ReachAvoidProblem, epsilon_inflation: float = 0.0) -> Abstraction:
    """Interval over-approximation of the ROM transitions on the cell grid.

    The successor hull of a cell under x -> A x + B u is exact for boxes
    (centre image, radius |A| r). Intermediate states of a transition are
    checked against the inflated obstacles and the state box; for ct ROMs
    the chord between checked times is covered by a curvature margin.
    """
    maps, kind, A, B = _maps(red_or_mats, problem)
    Nx, Ny = problem.state_cells
    h = problem.cell_size
    sb = problem.state_box
    ci = sb[0, 0] + h[0] * (np.arange(Nx) + 0.5)
    cj = sb[1, 0] + h[1] * (np.arange(Ny) + 0.5)
    C = np.stack(np.meshgrid(ci, cj, indexing="ij"), axis=-1)      # (Nx, Ny, 2)
    r = h / 2
    U = problem.input_grid()
    obst = [inflate(o, epsilon_inflation) for o in problem.obstacle_boxes]

    margin = 0.0
    if kind == "continuous":
        dt_sweep = problem.sample_time / problem.sweep_points
        xmax = float(np.max(np.linalg.norm(np.abs(sb).max(axis=1))))
        umax = float(np.max(np.linalg.norm(U, axis=1)))
        nA, nB = np.linalg.norm(A, 2), np.linalg.norm(B, 2)
        # chord-to-arc distance over a sub-interval, |x''| <= |A| (|A| |x| + |B| |u|);
        # |x| is bounded by the state box because leaving it blocks the transition
        margin = dt_sweep ** 2 / 8 * nA * (nA * xmax + nB * umax)

    k = len(U)
    blocked = np.zeros((k, Nx, Ny), dtype=bool)
    succ_lo = np.zeros((k, Nx, Ny, 2), dtype=int)
    succ_hi = np.zeros((k, Nx, Ny, 2), dtype=int)
    boxes = np.zeros((k, Nx, Ny, 2, 2))
    # the cell itself is the first swept set
    base_lo, base_hi = C - r, C + r
    for a, u in enumerate(U):
        bad = _hits(base_lo, base_hi, obst) | _outside(base_lo, base_hi, sb)
        prev_lo, prev_hi = base_lo, base_hi
        for Aj, Bj in maps:
            cen = C @ Aj.T + Bj @ u
            rad = np.abs(Aj) @ r
            lo, hi = cen - rad, cen + rad
            if kind == "continuous":
                # hull of consecutive boxes contains the chord between sampled times
                lo_s = np.minimum(prev_lo, lo) - margin
                hi_s = np.maximum(prev_hi, hi) + margin
            else:
                lo_s, hi_s = lo, hi
            # chords between sampled boxes stay in the convex state box
            bad |= _hits(lo_s, hi_s, obst) | _outside(lo, hi, sb)
            prev_lo, prev_hi = lo, hi
        cen = C @ maps[-1][0].T + maps[-1][1] @ u
        rad = np.abs(maps[-1][0]) @ r
        lo, hi = cen - rad, cen + rad
        boxes[a, ..., 0], boxes[a, ..., 1] = lo - PAD, hi + PAD
        # cells whose interior meets the successor box
        succ_lo[a] = np.floor((lo - sb[:, 0]) / h + PAD).astype(int)
        succ_hi[a] = np.maximum(np.ceil((hi - sb[:, 0]) / h - PAD).astype(int) - 1, succ_lo[a])
        bad |= np.any(succ_lo[a] < 0, axis=-1) | (succ_hi[a][..., 0] >= Nx) | (succ_hi[a][..., 1] >= Ny)
        blocked[a] = bad
    np.clip(succ_lo, 0, [Nx - 1, Ny - 1], out=succ_lo)
    np.clip(succ_hi, 0, [Nx - 1, Ny - 1], out=succ_hi)
    return Abstraction(U, succ_lo, succ_hi, blocked, boxes, float(epsilon_inflation), kind)


def _hits(lo, hi, obstacles):
    out = np.zeros(lo.shape[:-1], dtype=bool)
    for o in obstacles:
        out |= np.all((hi > o[:, 0]) & (lo < o[:, 1]), axis=-1)
    return out


def _outside(lo, hi, sb):
    return np.any((lo < sb[:, 0] - PAD) | (hi > sb[:, 1] + PAD), axis=-1)


@dataclass(frozen=True)
class ControllerTable:
    problem: ReachAvoidProblem
    inputs: np.ndarray
    choice: np.ndarray      # (Nx, Ny) input index, -1 where no winning input
    level: np.ndarray       # (Nx, Ny) iteration at which the cell was won, -1 otherwise
    target: np.ndarray      # (Nx, Ny) target cells
    inflation: float
    iterations: int
    winning_sizes: tuple = ()

    @property
    def winning(self):
        return self.level >= 0

    def covers(self, box) -> bool:
        lo, hi = _cell_range(self.problem, box)
        return bool(np.all(self.winning[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1]))

    def action(self, xhat):
        i, j = self.problem.cell_of(xhat)
        Nx, Ny = self.problem.state_cells
        if not (0 <= i < Nx and 0 <= j < Ny) or self.level[i, j] < 0:
            raise UnsafeCellError(f"ROM state {np.round(xhat, 6).tolist()} is in a losing cell")
        if self.target[i, j]:
            return None
        return self.inputs[self.choice[i, j]]

    def in_target(self, xhat) -> bool:
        i, j = self.problem.cell_of(xhat)
        Nx, Ny = self.problem.state_cells
        return bool(0 <= i < Nx and 0 <= j < Ny and self.target[i, j])

    def export(self, path) -> None:
        """Rows ``cell_i,cell_j,u1,u2``; target cells carry ``target``, losing cells ``unsafe``."""
        Nx, Ny = self.problem.state_cells
        with open(path, "w") as fh:
            fh.write("cell_i,cell_j,u1,u2\n")
            for i in range(Nx):
                for j in range(Ny):
                    if self.target[i, j]:
                        fh.write(f"{i},{j},target,target\n")
                    elif self.level[i, j] < 0:
                        fh.write(f"{i},{j},unsafe,unsafe\n")
                    else:
                        u = self.inputs[self.choice[i, j]]
                        fh.write(f"{i},{j},{u[0]:.17g},{u[1]:.17g}\n")


def _cell_range(problem, box):
    """Cells intersecting a box (inclusive index range)."""
    b = _box(box)
    h, sb = problem.cell_size, problem.state_box
    lo = np.floor((b[:, 0] - sb[:, 0]) / h + PAD).astype(int)
    hi = np.ceil((b[:, 1] - sb[:, 0]) / h - PAD).astype(int) - 1
    Nx, Ny = problem.state_cells
    return np.clip(lo, 0, [Nx - 1, Ny - 1]), np.clip(np.maximum(hi, lo), 0, [Nx - 1, Ny - 1])


def target_cells(problem) -> np.ndarray:
    """Cells lying entirely inside the target box."""
    Nx, Ny = problem.state_cells
    h, sb, t = problem.cell_size, problem.state_box, problem.target_box
    lo_i = np.ceil((t[:, 0] - sb[:, 0]) / h - PAD).astype(int)
    hi_i = np.floor((t[:, 1] - sb[:, 0]) / h + PAD).astype(int)  # exclusive
    mask = np.zeros((Nx, Ny), dtype=bool)
    mask[max(lo_i[0], 0):min(hi_i[0], Nx), max(lo_i[1], 0):min(hi_i[1], Ny)] = True
    return mask


def synthesize(abstraction: Abstraction, problem: ReachAvoidProblem,
               epsilon_inflation: Optional[float] = None) -> ControllerTable:
    """Backward reach-avoid fixed point over the abstraction.

    A cell joins the winning set once some input keeps the whole transition
    clear of the (inflated) obstacles and lands every successor cell in the
    current winning set. The first such input in grid order is recorded.
    """
    if epsilon_inflation is not None and abs(epsilon_inflation - abstraction.inflation) > 1e-12:
        raise ValueError("abstraction was built with a different obstacle inflation")
    infl = abstraction.inflation
    Nx, Ny = problem.state_cells
    T = target_cells(problem)
    if not T.any():
        raise SynthesisError("the target box contains no complete grid cell")
    obst = [inflate(o, infl) for o in problem.obstacle_boxes]
    C_lo = np.stack(np.meshgrid(problem.state_box[0, 0] + problem.cell_size[0] * np.arange(Nx),
                                problem.state_box[1, 0] + problem.cell_size[1] * np.arange(Ny),
                                indexing="ij"), axis=-1)
    T = T & ~_hits(C_lo, C_lo + problem.cell_size, obst)
    if not T.any():
        raise SynthesisError("the inflated obstacles swallow the target")

    level = np.where(T, 0, -1)
    choice = np.full((Nx, Ny), -1)
    W = T.copy()
    sizes = [int(W.sum())]
    it = 0
    lo, hi = abstraction.succ_lo, abstraction.succ_hi
    area = (hi[..., 0] - lo[..., 0] + 1) * (hi[..., 1] - lo[..., 1] + 1)
    while it < problem.horizon:
        it += 1
        S = np.zeros((Nx + 1, Ny + 1), dtype=np.int64)
        S[1:, 1:] = np.cumsum(np.cumsum(W, axis=0), axis=1)
        inside = (S[hi[..., 0] + 1, hi[..., 1] + 1] - S[lo[..., 0], hi[..., 1] + 1]
                  - S[hi[..., 0] + 1, lo[..., 1]] + S[lo[..., 0], lo[..., 1]])
        ok = (inside == area) & ~abstraction.blocked & ~W[None]
        new = ok.any(axis=0)
        if not new.any():
            break
        first = np.argmax(ok, axis=0)
        choice[new] = first[new]
        level[new] = it
        W |= new
        sizes.append(int(W.sum()))
    return ControllerTable(problem, abstraction.inputs, choice, level, T, infl, it, tuple(sizes))


# -- refinement ---------------------------------------------------------------------

@dataclass
class RefinedRun:
    t: np.ndarray
    X: np.ndarray
    Xhat: np.ndarray
    Uhat: np.ndarray
    deviation: np.ndarray        # |y - Chat xhat| at every recorded time
    position: np.ndarray         # full-order state projected on the ROM plane
    reached: bool
    hit_obstacle: bool
    rom_hit_obstacle: bool


def output_projection(red: Reduction):
    """Rows of the full-order state that track the ROM state, and their scale."""
    rows = red.meta.get("anchor_rows", "")
    rows = tuple(int(r) for r in str(rows).split()) if rows else tuple(range(1, red.nhat + 1))
    scale = float(red.meta.get("anchor_scale", 1.0))
    return np.array(rows) - 1, scale


def _inside_any(P, boxes):
    hit = np.zeros(P.shape[1], dtype=bool)
    for o in boxes:
        hit |= np.all((P > o[:, 0, None]) & (P < o[:, 1, None]), axis=0)
    return hit


def refine_and_run(red: Reduction, controller: ControllerTable, plant: Optional[PlantModel],
                   x0hat, steps: int, x0=None, substeps: int = 10) -> RefinedRun:
    """Drive the ROM with the grid controller and the plant with the refined input.

    ``steps`` counts controller transitions. The ROM input is held over a
    transition; once the ROM is in a target cell the run stops.
    """
    prob = controller.problem
    rows, scale = output_projection(red)

    def policy(j, x, xh):
        if controller.in_target(xh):
            return np.zeros(2)
        return controller.action(xh)

    if red.time_kind == "continuous":
        segs_t, segs_X, segs_Xh, segs_U = [np.array([0.0])], [], [], []
        xh = np.asarray(x0hat, float)
        x = red.R1 @ xh if x0 is None else np.asarray(x0, float)
        segs_X.append(x[:, None])
        segs_Xh.append(xh[:, None])
        t0, reached = 0.0, controller.in_target(xh)
        for j in range(steps):
            if reached:
                break
            uh = policy(j, x, xh)
            h = prob.sample_time / substeps
            t, X, Xh, _ = simulate_pair_ct(red, plant, xh, lambda k, a, b, uh=uh: uh, h, substeps,
                                           substeps=1, x0=x)
            segs_t.append(t0 + t[1:])
            segs_X.append(X[:, 1:])
            segs_Xh.append(Xh[:, 1:])
            segs_U.append(np.repeat(uh[:, None], substeps, axis=1))
            t0 += prob.sample_time
            x, xh = X[:, -1], Xh[:, -1]
            reached = controller.in_target(xh)
        t = np.concatenate(segs_t)
        X, Xh = np.hstack(segs_X), np.hstack(segs_Xh)
        U = np.hstack(segs_U) if segs_U else np.zeros((2, 0))
    else:
        k = prob.steps_per_transition
        xh = np.asarray(x0hat, float)
        x = red.R1 @ xh if x0 is None else np.asarray(x0, float)
        Xs, Xhs, Us = [x[:, None]], [xh[:, None]], []
        reached = controller.in_target(xh)
        for j in range(steps):
            if reached:
                break
            uh = policy(j, x, xh)
            _, X, Xh, U = simulate_pair_dt(red, plant, xh, lambda q, a, b, uh=uh: uh, k, x0=x)
            Xs.append(X[:, 1:])
            Xhs.append(Xh[:, 1:])
            Us.append(U)
            x, xh = X[:, -1], Xh[:, -1]
            reached = controller.in_target(xh)
        X, Xh = np.hstack(Xs), np.hstack(Xhs)
        U = np.hstack(Us) if Us else np.zeros((2, 0))
        t = np.arange(X.shape[1], dtype=float)
    dev = np.linalg.norm(X - red.R1 @ Xh, axis=0)
    pos = X[rows] / scale
    return RefinedRun(t, X, Xh, U, dev, pos, reached,
                      bool(_inside_any(pos, prob.obstacle_boxes).any()),
                      bool(_inside_any(Xh, prob.obstacle_boxes).any()))


def write_run_csv(path, run: RefinedRun) -> None:
    n, k = run.X.shape[0], run.Xhat.shape[0]
    head = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(k)] + ["deviation"]
    with open(path, "w") as fh:
        fh.write(",".join(head) + "\n")
        for c in range(run.X.shape[1]):
            vals = [run.t[c], *run.X[:, c], *run.Xhat[:, c], run.deviation[c]]
            fh.write(",".join(format(float(v), ".17g") for v in vals) + "\n")
