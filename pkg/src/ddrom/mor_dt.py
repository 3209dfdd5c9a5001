"""Discrete-time reduction and the epsilon-approximate simulation relation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import lmi
from .experiment import TrajectoryBatch
from .plant import PlantModel, rhs_batch
from .reduction import (Reduction, ReductionConfig, SFReport, build, check_batches,
                        closed_loop_rhs_data, compute_psi, data_model_rhs, interface,
                        sample_points, sf_tolerance, sf_value, solve_equality)

__all__ = ["reduce_dt", "solve_equality_dt", "compute_psi", "interface", "verify_sf_dt",
           "SimulationRelationCert", "relation_cert", "check_relation_invariance",
           "simulate_pair_dt", "successor"]


def reduce_dt(batch_excited: TrajectoryBatch, batch_zero: TrajectoryBatch, spec,
              config: ReductionConfig) -> Reduction:
    check_batches(batch_excited, batch_zero, spec, "discrete")
    if batch_excited.T != batch_zero.T:
        raise ValueError("both experiments must have the same number of samples")
    if config.kappa is None or not 0 < config.kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {config.kappa}")
    if not config.mu > 0:
        raise ValueError("mu must be positive")
    problem = lmi.assemble_dt(batch_excited, config.kappa, config.mu)
    scalars = {"kappa": config.kappa, "mu": config.mu, "eta": config.eta, "nu": config.nu}
    return build("discrete", batch_excited, batch_zero, spec, config, problem,
                 1.0 + 1.0 / config.mu, scalars)


def solve_equality_dt(Abar1, Abar2, Bdata, mode, fixed, nhat, anchor_rows=None, anchor_scale=1.0):
    return solve_equality(Abar1, Abar2, Bdata, mode, fixed, nhat, anchor_rows, anchor_scale)


def successor(red: Reduction, source, X, Xh, Uh):
    """Full-order one-step successor under the interface."""
    if isinstance(source, PlantModel):
        return rhs_batch(source, X, interface(red, X, Xh, Uh))
    if source is None or source == "data":
        return data_model_rhs(red, X, Xh, Uh)
    return closed_loop_rhs_data(red, source, X, Xh, Uh)


def verify_sf_dt(red: Reduction, plant_or_data=None, sample_count=10_000, rng_seed=0,
                 x_box=(-1.0, 1.0), xhat_box=(-1.0, 1.0), uhat_box=(-1.0, 1.0),
                 rho=None) -> SFReport:
    """Sampled check of alpha |x - R1 xhat|^2 <= S and S(x+, xhat+) <= kappa S + rho |uhat|^2."""
    rho = red.rho if rho is None else rho
    X, Xh, Uh = sample_points(red, sample_count, rng_seed, x_box, xhat_box, uhat_box)
    E = X - red.R1 @ Xh
    S = sf_value(red, X, Xh)
    exc_a = red.alpha * np.sum(E * E, axis=0) - S - sf_tolerance(S)
    Xn = successor(red, plant_or_data, X, Xh, Uh)
    Sn = sf_value(red, Xn, red.Ahat @ Xh + red.Bhat @ Uh)
    rhs = red.kappa * S + rho * np.sum(Uh * Uh, axis=0)
    exc_b = Sn - rhs - sf_tolerance(np.maximum(Sn, rhs))
    source = type(plant_or_data).__name__ if plant_or_data is not None else "data"
    return SFReport("discrete", sample_count, int(np.sum(exc_a > 0)), int(np.sum(exc_b > 0)),
                    float(np.max(exc_a)), float(np.max(exc_b)), source)


@dataclass(frozen=True)
class SimulationRelationCert:
    rho_bar: float
    epsilon: float
    eta: float
    nu: float
    kappa: float
    alpha: float
    nu_inferred: bool = False

    def lines(self):
        tag = " (inferred from the input box, not declared)" if self.nu_inferred else ""
        return [f"eta={self.eta:.6g}", f"nu={self.nu:.6g}{tag}",
                f"rho_bar={self.rho_bar:.6e}", f"epsilon={self.epsilon:.6g}"]


def relation_cert(red_or_params, eta, nu, nu_inferred=False) -> SimulationRelationCert:
    """rho_bar = rho nu / ((1 - kappa) eta), epsilon = sqrt(rho_bar / alpha).

    ``red_or_params`` is a Reduction or a mapping with rho, kappa, alpha.
    """
    if isinstance(red_or_params, Reduction):
        rho, kappa, alpha = red_or_params.rho, red_or_params.kappa, red_or_params.alpha
    else:
        rho, kappa, alpha = (float(red_or_params[k]) for k in ("rho", "kappa", "alpha"))
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")
    if nu < 0 or alpha <= 0:
        raise ValueError("need nu >= 0 and alpha > 0")
    rho_bar = rho * nu / ((1 - kappa) * eta)
    return SimulationRelationCert(rho_bar, math.sqrt(rho_bar / alpha), eta, nu, kappa, alpha,
                                  nu_inferred)


def nu_from_box(uhat_box, mhat) -> float:
    """Largest squared norm over the input box (attained at a corner)."""
    lo, hi = (np.broadcast_to(np.asarray(b, float), (mhat,)) for b in uhat_box)
    return float(np.sum(np.maximum(lo ** 2, hi ** 2)))


@dataclass
class RelationReport:
    samples: int
    violations_invariance: int
    violations_output: int
    max_excess_invariance: float
    max_excess_output: float

    @property
    def passed(self):
        return self.violations_invariance == 0 and self.violations_output == 0

    def lines(self):
        return [f"samples={self.samples}",
                f"invariance violations={self.violations_invariance} max_excess={self.max_excess_invariance:.3e}",
                f"output violations={self.violations_output} max_excess={self.max_excess_output:.3e}",
                f"verdict={'pass' if self.passed else 'FAIL'}"]


def check_relation_invariance(red: Reduction, cert: SimulationRelationCert, sample_count=10_000,
                              rng_seed=0, plant_or_data=None, xhat_box=(-1.0, 1.0),
                              rho_bar=None) -> RelationReport:
    """Pairs with S <= rho_bar and |uhat|^2 <= nu must keep S(x+, xhat+) <= rho_bar.

    Half of the pairs sit on the level set S = rho_bar; a quarter use the
    worst-case alignment of the error with the input channel mismatch.
    """
    rho_bar = cert.rho_bar if rho_bar is None else rho_bar
    rng = np.random.default_rng(rng_seed)
    n, k, mh = red.n, red.nhat, red.Psi.shape[1]
    N = sample_count
    lo, hi = (np.broadcast_to(np.asarray(b, float), (k,)) for b in xhat_box)
    Xh = rng.uniform(lo, hi, size=(N, k)).T
    # inputs in the ball |uhat|^2 <= nu
    du = rng.standard_normal((mh, N))
    du /= np.linalg.norm(du, axis=0)
    ru = np.where(rng.random(N) < 0.5, 1.0, rng.random(N) ** (1.0 / mh))
    Uh = du * ru * math.sqrt(cert.nu)
    # errors with S = level * rho_bar
    level = np.where(rng.random(N) < 0.5, 1.0, rng.random(N))
    dirs = rng.standard_normal((n, N))
    worst = rng.random(N) < 0.25
    if np.any(worst):
        Acl = red.XQ[:, :n]
        M = red.Bdata @ red.Psi - red.R1 @ red.Bhat
        W = red.P @ M @ Uh[:, worst]
        dirs[:, worst] = np.linalg.solve(red.P, Acl.T @ W)
    norm = np.sqrt(np.einsum("ik,ij,jk->k", dirs, red.P, dirs))
    norm[norm == 0] = 1.0
    E = dirs / norm * np.sqrt(level * rho_bar)
    X = red.R1 @ Xh + E
    Xn = successor(red, plant_or_data, X, Xh, Uh)
    Sn = sf_value(red, Xn, red.Ahat @ Xh + red.Bhat @ Uh)
    exc_inv = Sn - rho_bar - sf_tolerance(rho_bar)
    eps = math.sqrt(rho_bar / red.alpha)
    exc_out = np.linalg.norm(E, axis=0) - eps - 1e-9 * (1 + eps)
    return RelationReport(N, int(np.sum(exc_inv > 0)), int(np.sum(exc_out > 0)),
                          float(np.max(exc_inv)), float(np.max(exc_out)))


def simulate_pair_dt(red: Reduction, plant: Optional[PlantModel], x0hat,
                     uhat_signal: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
                     steps: int, x0=None):
    """Returns (k, X, Xhat, Uhat) for the coupled recursion; ``plant=None`` uses data."""
    xhat = np.asarray(x0hat, float)
    x = red.R1 @ xhat if x0 is None else np.asarray(x0, float)
    Xs, Xhs, Uhs = [x.copy()], [xhat.copy()], []
    for j in range(steps):
        uh = np.asarray(uhat_signal(j, x, xhat), float)
        x = successor(red, plant, x[:, None], xhat[:, None], uh[:, None])[:, 0]
        xhat = red.Ahat @ xhat + red.Bhat @ uh
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"coupled recursion diverged at step {j + 1}")
        Xs.append(x.copy())
        Xhs.append(xhat.copy())
        Uhs.append(uh)
    return np.arange(steps + 1), np.array(Xs).T, np.array(Xhs).T, np.array(Uhs).T
