"""Continuous-time reduction: ROM, simulation function and interface from data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import lmi
from .experiment import TrajectoryBatch
from .plant import PlantModel, rhs_batch, rk4_step
from .reduction import (Reduction, ReductionConfig, SFReport, build, check_batches,
                        closed_loop_rhs_data, compute_psi, data_model_rhs, interface,
                        sample_points, sf_tolerance, sf_value, solve_equality)

__all__ = ["reduce_ct", "solve_equality_ct", "compute_psi", "interface", "closed_loop_rhs_data",
           "verify_sf_ct", "bound_ct_paper", "bound_ct_envelope", "envelope_sup",
           "simulate_pair_ct", "ClosenessCertificate", "closeness_certificate"]


def reduce_ct(batch_excited: TrajectoryBatch, batch_zero: TrajectoryBatch, spec,
              config: ReductionConfig) -> Reduction:
    check_batches(batch_excited, batch_zero, spec, "continuous")
    if batch_excited.T != batch_zero.T:
        raise ValueError("both experiments must have the same number of samples")
    if config.kappa_hat is None:
        raise ValueError("kappa_hat is required for continuous-time reduction")
    if not 0 < config.mu < config.kappa_hat:
        raise ValueError(f"need 0 < mu < kappa_hat, got mu={config.mu}, kappa_hat={config.kappa_hat}")
    problem = lmi.assemble_ct(batch_excited, config.kappa_hat)
    scalars = {"kappa": config.kappa_hat - config.mu, "mu": config.mu,
               "kappa_hat": config.kappa_hat}
    return build("continuous", batch_excited, batch_zero, spec, config, problem,
                 1.0 / config.mu, scalars)


def solve_equality_ct(Abar1, Abar2, Bdata, mode, fixed, nhat, anchor_rows=None, anchor_scale=1.0):
    """Matching equality with Abar = Xbar+ Qbar split at column n."""
    return solve_equality(Abar1, Abar2, Bdata, mode, fixed, nhat, anchor_rows, anchor_scale)


def _xdot(red, source, X, Xh, Uh):
    if isinstance(source, PlantModel):
        return rhs_batch(source, X, interface(red, X, Xh, Uh))
    if source is None or source == "data":
        return data_model_rhs(red, X, Xh, Uh)
    return closed_loop_rhs_data(red, source, X, Xh, Uh)


def lie_derivative(red: Reduction, source, X, Xh, Uh):
    E = X - red.R1 @ Xh
    flow = _xdot(red, source, X, Xh, Uh) - red.R1 @ (red.Ahat @ Xh + red.Bhat @ Uh)
    return 2.0 * np.einsum("ik,ij,jk->k", E, red.P, flow)


def verify_sf_ct(red: Reduction, plant_or_data=None, sample_count=10_000, rng_seed=0,
                 x_box=(-1.0, 1.0), xhat_box=(-1.0, 1.0), uhat_box=(-1.0, 1.0),
                 rho=None) -> SFReport:
    """Sampled check of alpha |x - R1 xhat|^2 <= S and L S <= -kappa S + rho |uhat|^2.

    ``plant_or_data``: a PlantModel (true successor), a (excited, zero) batch
    pair, or None for the data products stored in the reduction.
    ``rho`` overrides the certified value (falsification runs).
    """
    rho = red.rho if rho is None else rho
    X, Xh, Uh = sample_points(red, sample_count, rng_seed, x_box, xhat_box, uhat_box)
    E = X - red.R1 @ Xh
    S = sf_value(red, X, Xh)
    lhs_a = red.alpha * np.sum(E * E, axis=0)
    exc_a = lhs_a - S - sf_tolerance(S)
    LS = lie_derivative(red, plant_or_data, X, Xh, Uh)
    supply = rho * np.sum(Uh * Uh, axis=0)
    scale = np.maximum.reduce([np.abs(LS), red.kappa * S, supply])
    exc_b = LS + red.kappa * S - supply - sf_tolerance(scale)
    source = type(plant_or_data).__name__ if plant_or_data is not None else "data"
    return SFReport("continuous", sample_count, int(np.sum(exc_a > 0)), int(np.sum(exc_b > 0)),
                    float(np.max(exc_a)), float(np.max(exc_b)), source)


# -- closeness bounds -------------------------------------------------------------------

def bound_ct_paper(S0, t, alpha, kappa, rho, uhat_inf) -> float:
    """(1/alpha) S0 exp(-kappa t) + rho / (alpha kappa) * uhat_inf, with uhat_inf = sup_t |uhat(t)|."""
    if alpha <= 0 or kappa <= 0 or rho < 0 or S0 < 0 or np.any(np.asarray(t) < 0):
        raise ValueError("need alpha, kappa > 0 and S0, rho, t >= 0")
    return S0 * np.exp(-kappa * np.asarray(t, float)) / alpha + rho / (alpha * kappa) * uhat_inf


def bound_ct_envelope(S0, t, alpha, kappa, rho, uhat_inf):
    """sqrt((e^{-kappa t} S0 + (rho/kappa)(1 - e^{-kappa t}) uhat_inf^2) / alpha).

    Comparison-lemma envelope for |y - yhat|(t) implied by the two
    simulation-function inequalities.
    """
    if alpha <= 0 or kappa <= 0 or rho < 0 or S0 < 0 or np.any(np.asarray(t) < 0):
        raise ValueError("need alpha, kappa > 0 and S0, rho, t >= 0")
    decay = np.exp(-kappa * np.asarray(t, float))
    return np.sqrt((decay * S0 + (rho / kappa) * (1 - decay) * uhat_inf ** 2) / alpha)


def envelope_sup(S0, alpha, kappa, rho, uhat_inf) -> float:
    """Supremum over t >= 0 of the envelope (attained at t = 0 or t -> infinity)."""
    return float(max(bound_ct_envelope(S0, 0.0, alpha, kappa, rho, uhat_inf),
                     math.sqrt(rho * uhat_inf ** 2 / (kappa * alpha))))


@dataclass(frozen=True)
class ClosenessCertificate:
    alpha: float
    kappa: float
    rho: float
    uhat_inf: float
    S0: float = 0.0

    def literal(self, t):
        return bound_ct_paper(self.S0, t, self.alpha, self.kappa, self.rho, self.uhat_inf)

    def envelope(self, t):
        return bound_ct_envelope(self.S0, t, self.alpha, self.kappa, self.rho, self.uhat_inf)

    def envelope_sup(self):
        return envelope_sup(self.S0, self.alpha, self.kappa, self.rho, self.uhat_inf)


def closeness_certificate(red: Reduction, uhat_inf, S0=0.0) -> ClosenessCertificate:
    return ClosenessCertificate(red.alpha, red.kappa, red.rho, float(uhat_inf), float(S0))


# -- coupled simulation -------------------------------------------------------------------

def simulate_pair_ct(red: Reduction, plant: Optional[PlantModel], x0hat,
                     uhat_signal: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
                     sample_time: float, steps: int, substeps: int = 10, x0=None):
    """Full-order plant and ROM driven together through the interface.

    ``uhat_signal(k, x, xhat)`` is sampled at t = k * sample_time and held;
    the interface is re-evaluated inside every RK4 stage. ``plant=None`` uses
    the data-based closed loop. Returns (t, X, Xhat, Uhat).
    """
    n, k = red.n, red.nhat
    xhat = np.asarray(x0hat, float)
    x = red.R1 @ xhat if x0 is None else np.asarray(x0, float)
    h = sample_time / substeps
    ts, Xs, Xhs, Uhs = [0.0], [x.copy()], [xhat.copy()], []
    z = np.concatenate([x, xhat])
    for j in range(steps):
        uh = np.asarray(uhat_signal(j, z[:n], z[n:]), float)

        def f(zz, uh=uh):
            xx, xh = zz[:n], zz[n:]
            if plant is None:
                dx = data_model_rhs(red, xx, xh, uh)
            else:
                dx = rhs_batch(plant, xx[:, None], interface(red, xx, xh, uh)[:, None])[:, 0]
            return np.concatenate([dx, red.Ahat @ xh + red.Bhat @ uh])

        for _ in range(substeps):
            z = rk4_step(f, z, h)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"coupled simulation diverged at sample {j + 1}")
        ts.append((j + 1) * sample_time)
        Xs.append(z[:n].copy())
        Xhs.append(z[n:].copy())
        Uhs.append(uh)
    return np.array(ts), np.array(Xs).T, np.array(Xhs).T, np.array(Uhs).T
