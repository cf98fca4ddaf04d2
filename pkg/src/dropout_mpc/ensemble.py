"""One Dropout MPC control step.

An ensemble of dropout realizations of the learned network each solves the
MPC problem; the first inputs of their horizons are combined by a
cost-weighted vote and blended with the input of the full network.  The
spread of one-step RK4 predictions across realizations gives the
next-state uncertainty.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .net import DropoutMask, ModelParams, NetworkModel, sample_mask
from .plant import step_rk4
from .trajopt import (MpcConfig, OptimizedHorizon, SolverError, TerminalCost, build_problem, solve_mpc,
                      terminal_cost_for)

logger = logging.getLogger(__name__)


@dataclass
class EnsembleConfig:
    M: int = 10
    p: float = 0.2
    kappa: int = 2
    lam: float = 0.7
    xi: float = 0.3
    seed: int = 0
    include_full_in_vote: bool = False
    sigma_halt: float | None = None
    max_workers: int | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ensemble size M must be >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.kappa < 1 or int(self.kappa) != self.kappa:
            raise ValueError("kappa must be a natural number")
        if not self.lam > self.xi:
            raise ValueError("blend weights must satisfy lam > xi")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if abs(self.lam + self.xi - 1.0) > 1e-12:
            warnings.warn(f"lam + xi = {self.lam + self.xi} != 1; the blended input is rescaled", stacklevel=2)


@dataclass
class EnsembleDecision:
    u_nn: np.ndarray
    u_ensemble: np.ndarray
    u_final: np.ndarray
    weights: np.ndarray
    member_horizons: list[OptimizedHorizon | None]
    full_horizon: OptimizedHorizon
    sigma: np.ndarray
    xy_covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    masks: list[DropoutMask] = field(default_factory=list)
    degenerate: bool = False
    n_failed: int = 0


def standardize_costs(costs) -> tuple[np.ndarray, bool]:
    """Zero-mean, unit population-std costs; all zeros (and ``True``) if degenerate."""
    costs = np.asarray(costs, dtype=float)
    if costs.size < 1:
        raise ValueError("need at least one cost")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite")
    std = costs.std()
    if std < 1e-12:
        return np.zeros_like(costs), True
    return (costs - costs.mean()) / std, False


def compute_weights(z, kappa: float) -> np.ndarray:
    """``exp(-z / kappa)`` followed by min-max scaling to [0, 1]."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    raw = np.exp(-np.asarray(z, dtype=float) / kappa)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0.0:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def vote(weights, first_inputs) -> np.ndarray:
    """Weighted mean of member first inputs."""
    w = np.asarray(weights, dtype=float)
    u = np.asarray(first_inputs, dtype=float)
    if u.ndim != 2 or len(w) != len(u):
        raise ValueError("need one weight per member input")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must have a positive sum")
    return w @ u / total


def blend(u_nn, u_ensemble, lam: float, xi: float, u_min=None, u_max=None) -> np.ndarray:
    if not lam > xi:
        raise ValueError("blend weights must satisfy lam > xi")
    u = lam * np.asarray(u_nn, dtype=float) + xi * np.asarray(u_ensemble, dtype=float)
    if u_min is not None or u_max is not None:
        u = np.clip(u, u_min, u_max)
    return u


def next_state_uncertainty(realizations: Sequence, state, u_final, T: float
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension population std of RK4 next states, plus their (x, y) covariance."""
    if len(realizations) < 1:
        raise ValueError("need at least one realization")
    nxt = np.array([step_rk4(f, state, u_final, T, wrap=False) for f in realizations])
    # offsets from the first realization keep identical predictions at exactly zero spread
    rel = nxt - nxt[0]
    centred = rel[:, :2] - rel[:, :2].mean(axis=0)
    return rel.std(axis=0), centred.T @ centred / len(nxt)


def _solve(cfg: MpcConfig, state, x_ref, model, P, warm: OptimizedHorizon | None):
    problem = build_problem(cfg, state, x_ref, model, P)
    if warm is not None:
        warm = warm.shifted(state, model, cfg.T)
    return solve_mpc(problem, warm)


def dropout_mpc_step(state, x_ref, params: ModelParams, mpc_cfg: MpcConfig, ens_cfg: EnsembleConfig,
                     warm_starts: EnsembleDecision | None, rng: np.random.Generator,
                     terminal: TerminalCost | None = None) -> EnsembleDecision:
    """Full-network solve, M masked solves, vote, blend and uncertainty.

    ``warm_starts`` is the previous step's decision; each member is warm
    started from the horizon of the same member index.  One terminal cost,
    computed from the full network, is shared by every solve so that the
    horizon costs being compared use the same objective.
    """
    state = np.asarray(state, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    full_model = NetworkModel(params)
    if terminal is None:
        terminal = terminal_cost_for(full_model, mpc_cfg, x_ref)
    P = terminal.P

    prev_full = warm_starts.full_horizon if warm_starts is not None else None
    full = _solve(mpc_cfg, state, x_ref, full_model, P, prev_full)
    u_nn = full.inputs[0]

    masks = [sample_mask(rng, ens_cfg.p, params.hidden_dim) for _ in range(ens_cfg.M)]
    models = [NetworkModel(params, m) for m in masks]
    prev = warm_starts.member_horizons if warm_starts is not None else None
    prev = prev if prev is not None and len(prev) == ens_cfg.M else [None] * ens_cfg.M

    def member(i):
        try:
            return _solve(mpc_cfg, state, x_ref, models[i], P, prev[i])
        except (SolverError, ValueError, FloatingPointError) as exc:
            logger.warning("ensemble member %d failed: %s", i, exc)
            return None

    if ens_cfg.max_workers and ens_cfg.max_workers > 1:
        with ThreadPoolExecutor(ens_cfg.max_workers) as pool:
            horizons = list(pool.map(member, range(ens_cfg.M)))
    else:
        horizons = [member(i) for i in range(ens_cfg.M)]

    ok = [i for i, h in enumerate(horizons) if h is not None and np.isfinite(h.horizon_cost)]
    n_failed = ens_cfg.M - len(ok)
    weights = np.zeros(ens_cfg.M)
    degenerate = False
    if ok:
        costs = [horizons[i].horizon_cost for i in ok]
        firsts = [horizons[i].inputs[0] for i in ok]
        if ens_cfg.include_full_in_vote:
            costs.append(full.horizon_cost)
            firsts.append(u_nn)
        z, degenerate = standardize_costs(costs)
        w = compute_weights(z, ens_cfg.kappa)
        u_ens = vote(w, firsts)
        weights[ok] = w[: len(ok)]
        u_final = blend(u_nn, u_ens, ens_cfg.lam, ens_cfg.xi, mpc_cfg.u_min, mpc_cfg.u_max)
    else:
        logger.warning("all ensemble members failed; using the full-network input only")
        u_ens = np.full(2, np.nan)
        u_final = np.clip(u_nn, mpc_cfg.u_min, mpc_cfg.u_max)

    sigma, cov = next_state_uncertainty(models, state, u_final, mpc_cfg.T)
    return EnsembleDecision(u_nn=u_nn, u_ensemble=u_ens, u_final=u_final, weights=weights,
                            member_horizons=horizons, full_horizon=full, sigma=sigma, xy_covariance=cov,
                            masks=masks, degenerate=degenerate, n_failed=n_failed)
