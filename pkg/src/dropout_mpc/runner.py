"""Closed-loop experiments: controller + disturbed plant, scenarios, metrics."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import EnsembleConfig, EnsembleDecision, dropout_mpc_step
from .net import ModelParams, NetworkModel
from .plant import DisturbanceModel, Plant, UnicycleModel
from .trajopt import MpcConfig, SolverError, build_problem, solve_mpc, state_error, terminal_cost_for

logger = logging.getLogger(__name__)

CONTROLLERS = ("dropout", "vanilla", "oracle")
RUNLOG_HEADER = ("t", "x", "y", "theta", "v_nn", "omega_nn", "v_ens", "omega_ens", "v_final", "omega_final",
                 "sigma_x", "sigma_y", "sigma_theta", "cost", "solve_ms")


@dataclass(frozen=True)
class Scenario:
    name: str
    initial: tuple[float, float, float]
    x_ref: tuple[float, float, float]
    epsilon: float = 0.05
    max_steps: int = 1500
    disturbance: DisturbanceModel = field(default_factory=lambda: DisturbanceModel(0.02, 0.02))
    pose_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def pose_error(self, state) -> float:
        """Weighted Euclidean pose error with the heading wrapped."""
        e = state_error(state, self.x_ref)
        return float(np.sqrt(np.sum(np.asarray(self.pose_weights) * e**2)))


SCENARIOS = {
    "nav": Scenario("nav", (0.0, 0.0, 0.0), (1.0, 2.0, np.pi / 4)),
    "park": Scenario("park", (0.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; available: {', '.join(sorted(SCENARIOS))}") from None


@dataclass
class StepRecord:
    t: float
    state: np.ndarray
    u_nn: np.ndarray
    u_ensemble: np.ndarray
    u_final: np.ndarray
    weights: np.ndarray
    sigma: np.ndarray
    horizon_cost: float
    solve_time: float  # seconds


@dataclass
class RunLog:
    scenario: str
    controller: str
    T: float
    records: list[StepRecord] = field(default_factory=list)
    final_state: np.ndarray | None = None
    reached: bool = False
    steps_used: int = 0
    halted: bool = False
    failure: str | None = None


def _nan2():
    return np.full(2, np.nan)


def run_closed_loop(scenario: Scenario, controller: str, params: ModelParams | None = None,
                    mpc_cfg: MpcConfig | None = None, ens_cfg: EnsembleConfig | None = None,
                    seed: int = 0) -> RunLog:
    """Drive the disturbed plant with full state feedback until the pose error is within epsilon."""
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}; choose from {', '.join(CONTROLLERS)}")
    if controller != "oracle" and params is None:
        raise ValueError(f"controller {controller!r} needs a trained model")
    mpc_cfg = mpc_cfg or MpcConfig()
    ens_cfg = ens_cfg or EnsembleConfig()
    x_ref = np.asarray(scenario.x_ref, dtype=float)
    plant_seq, mask_seq = np.random.SeedSequence([seed, scenario.disturbance.seed, ens_cfg.seed]).spawn(2)
    d = scenario.disturbance
    plant = Plant(DisturbanceModel(d.sigma_v, d.sigma_omega, int(plant_seq.generate_state(1)[0])), mpc_cfg.T)
    mask_rng = np.random.default_rng(mask_seq)

    model = UnicycleModel() if controller == "oracle" else NetworkModel(params)
    terminal = terminal_cost_for(model, mpc_cfg, x_ref)
    log = RunLog(scenario.name, controller, mpc_cfg.T)
    state = np.asarray(scenario.initial, dtype=float)
    prev: EnsembleDecision | None = None
    horizon = None

    for k in range(scenario.max_steps):
        t = k * mpc_cfg.T
        if scenario.pose_error(state) <= scenario.epsilon:
            log.records.append(StepRecord(t, state.copy(), _nan2(), _nan2(), _nan2(), np.zeros(0),
                                          np.full(3, np.nan), np.nan, 0.0))
            log.reached, log.steps_used, log.final_state = True, k, state.copy()
            return log
        tic = time.perf_counter()
        try:
            if controller == "dropout":
                prev = dropout_mpc_step(state, x_ref, params, mpc_cfg, ens_cfg, prev, mask_rng, terminal)
                u_nn, u_ens, u, w, sigma = prev.u_nn, prev.u_ensemble, prev.u_final, prev.weights, prev.sigma
                cost = prev.full_horizon.horizon_cost
            else:
                problem = build_problem(mpc_cfg, state, x_ref, model, terminal)
                warm = horizon.shifted(state, model, mpc_cfg.T) if horizon is not None else None
                horizon = solve_mpc(problem, warm)
                u_nn = horizon.inputs[0]
                u = np.clip(u_nn, mpc_cfg.u_min, mpc_cfg.u_max)
                u_ens, w, sigma, cost = _nan2(), np.zeros(0), np.full(3, np.nan), horizon.horizon_cost
        except (SolverError, ValueError) as exc:
            logger.error("controller failed at step %d: %s", k, exc)
            log.failure = str(exc)
            log.steps_used, log.final_state = k, state.copy()
            return log
        elapsed = time.perf_counter() - tic
        log.records.append(StepRecord(t, state.copy(), np.array(u_nn), np.array(u_ens), np.array(u),
                                      np.array(w), np.array(sigma), float(cost), elapsed))
        if ens_cfg.sigma_halt is not None and np.nanmax(sigma, initial=0.0) > ens_cfg.sigma_halt:
            logger.warning("next-state uncertainty %.3g exceeds the halt threshold", np.nanmax(sigma))
            log.halted = True
            log.steps_used, log.final_state = k + 1, state.copy()
            return log
        state = plant.step(state, u)

    log.steps_used = scenario.max_steps
    log.final_state = state.copy()
    log.reached = scenario.pose_error(state) <= scenario.epsilon
    return log


def metrics(log: RunLog) -> dict[str, float]:
    if not log.records:
        raise ValueError("empty run log")
    positions = np.array([r.state[:2] for r in log.records])
    if log.final_state is not None:
        positions = np.vstack([positions, log.final_state[:2]])
    path = float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    u = np.array([r.u_final for r in log.records])
    applied = np.all(np.isfinite(u), axis=1)
    effort = float(np.sum(u[applied] ** 2) * log.T)
    sigma = np.array([r.sigma for r in log.records])
    sig_ok = np.all(np.isfinite(sigma), axis=1)
    solve = np.array([r.solve_time for r in log.records])[applied]
    out = {
        "reached": float(log.reached),
        "steps_to_converge": float(log.steps_used) if log.reached else np.nan,
        "path_length": path,
        "control_effort": effort,
        "mean_sigma": float(sigma[sig_ok].mean()) if sig_ok.any() else np.nan,
        "max_sigma": float(sigma[sig_ok].max()) if sig_ok.any() else np.nan,
        "mean_solve_ms": float(solve.mean() * 1e3) if solve.size else 0.0,
    }
    for i, name in enumerate(("x", "y", "theta")):
        out[f"mean_sigma_{name}"] = float(sigma[sig_ok, i].mean()) if sig_ok.any() else np.nan
    return out


def compare(log_a: RunLog, log_b: RunLog) -> list[dict]:
    """Side-by-side metrics of two runs of the same scenario."""
    if log_a.scenario != log_b.scenario:
        raise ValueError(f"scenario mismatch: {log_a.scenario!r} vs {log_b.scenario!r}")
    ma, mb = metrics(log_a), metrics(log_b)
    rows = []
    for name in ma:
        a, b = ma[name], mb[name]
        if np.isnan(a) and np.isnan(b):
            delta = rel = 0.0
        elif np.isnan(a) or np.isnan(b):
            delta = rel = np.nan
        else:
            delta = b - a
            scale = max(abs(a), abs(b))
            rel = abs(delta) / scale if scale > 0 else 0.0
        rows.append({"metric": name, log_a.controller: a, log_b.controller: b, "a": a, "b": b,
                     "delta": delta, "rel_delta": rel})
    return rows


def format_table(rows: list[dict], label_a: str = "a", label_b: str = "b") -> str:
    lines = [f"{'metric':<20} {label_a:>14} {label_b:>14} {'delta':>14}"]
    for r in rows:
        lines.append(f"{r['metric']:<20} {r['a']:>14.6g} {r['b']:>14.6g} {r['delta']:>14.6g}")
    return "\n".join(lines)


def save_runlog(log: RunLog, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUNLOG_HEADER)
        for r in log.records:
            row = [r.t, *r.state, *r.u_nn, *r.u_ensemble, *r.u_final, *r.sigma, r.horizon_cost,
                   r.solve_time * 1e3]
            w.writerow([repr(float(v)) for v in row])
    summary = {
        "scenario": log.scenario, "controller": log.controller, "T": log.T,
        "reached": log.reached, "steps_used": log.steps_used, "halted": log.halted, "failure": log.failure,
        "final_state": None if log.final_state is None else [float(v) for v in log.final_state],
        # NaN (metric undefined for this controller) is written as null
        "metrics": {k: (None if np.isnan(v) else v) for k, v in metrics(log).items()} if log.records else {},
    }
    summary_path(path).write_text(json.dumps(summary, indent=2, allow_nan=False) + "\n")


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.json")


def load_runlog(path) -> np.ndarray:
    """RunLog CSV as a float array with the columns of ``RUNLOG_HEADER``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RUNLOG_HEADER:
            raise ValueError(f"{path}: unexpected run log header")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows).reshape(-1, len(RUNLOG_HEADER))


def scenario_dict(s: Scenario) -> dict:
    return asdict(s)
