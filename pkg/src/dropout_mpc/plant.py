"""Ground-truth disturbed unicycle, integrators and synthetic data generation.

States are ``(x, y, theta)`` arrays in metres/radians, inputs are
``(v, omega)`` arrays in m/s and rad/s.  All functions accept a trailing
axis of size 3 (states) or 2 (inputs) and broadcast over leading axes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STATE_DIM = 3
INPUT_DIM = 2
DATASET_HEADER = ("x", "y", "theta", "v", "omega", "xdot", "ydot", "thetadot")

Derivative = Callable[[np.ndarray, np.ndarray], np.ndarray]


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    # angles already in range pass through untouched (no round-off from the shift)
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


def _wrap_state(state: np.ndarray) -> np.ndarray:
    out = np.array(state, dtype=float, copy=True)
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def true_derivative(state, inputs) -> np.ndarray:
    """Unicycle kinematics ``(v cos theta, v sin theta, omega)``."""
    state = np.asarray(state, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(inputs))):
        raise ValueError("state and input must be finite")
    theta, v, omega = np.broadcast_arrays(state[..., 2], inputs[..., 0], inputs[..., 1])
    return np.stack([v * np.cos(theta), v * np.sin(theta), omega], axis=-1)


def step_euler(f: Derivative, state, inputs, T: float, wrap: bool = True) -> np.ndarray:
    """One forward-Euler step of length ``T`` with the input held constant."""
    if T <= 0:
        raise ValueError("step length must be positive")
    state = np.asarray(state, dtype=float)
    nxt = state + T * np.asarray(f(state, inputs), dtype=float)
    return _wrap_state(nxt) if wrap else nxt


def step_rk4(f: Derivative, state, inputs, T: float, wrap: bool = True) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step with zero-order-hold input."""
    if T <= 0:
        raise ValueError("step length must be positive")
    x = np.asarray(state, dtype=float)
    k1 = np.asarray(f(x, inputs), dtype=float)
    k2 = np.asarray(f(x + 0.5 * T * k1, inputs), dtype=float)
    k3 = np.asarray(f(x + 0.5 * T * k2, inputs), dtype=float)
    k4 = np.asarray(f(x + T * k3, inputs), dtype=float)
    nxt = x + (T / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _wrap_state(nxt) if wrap else nxt


@dataclass(frozen=True)
class DisturbanceModel:
    """Zero-mean Gaussian noise added to the effective ``(v, omega)`` each step."""

    sigma_v: float = 0.0
    sigma_omega: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_v < 0 or self.sigma_omega < 0:
            raise ValueError("disturbance standard deviations must be >= 0")

    @property
    def scale(self) -> np.ndarray:
        return np.array([self.sigma_v, self.sigma_omega])


class Plant:
    """Stateful wrapper around the disturbed unicycle used in closed loop."""

    def __init__(self, disturbance: DisturbanceModel | None = None, T: float = 1.0 / 53.0):
        self.disturbance = disturbance or DisturbanceModel()
        self.T = T
        self._rng = np.random.default_rng(self.disturbance.seed)

    def step(self, state, inputs) -> np.ndarray:
        noise = self._rng.standard_normal(INPUT_DIM) * self.disturbance.scale
        return step_euler(true_derivative, state, np.asarray(inputs, dtype=float) + noise, self.T)


def simulate_plant(initial, inputs, T: float, disturbance: DisturbanceModel | None = None) -> np.ndarray:
    """Roll the disturbed plant forward; returns ``len(inputs) + 1`` states."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.size == 0:
        inputs = inputs.reshape(0, INPUT_DIM)
    plant = Plant(disturbance, T)
    states = np.empty((len(inputs) + 1, STATE_DIM))
    states[0] = _wrap_state(np.asarray(initial, dtype=float))
    for k, u in enumerate(inputs):
        states[k + 1] = plant.step(states[k], u)
    return states


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (K+1, 3)
    inputs: np.ndarray  # (K, 2); input k is applied between state k and k+1


@dataclass
class DataGenConfig:
    sample_rate: float = 53.0
    n_random_walk_runs: int = 20
    n_scripted_runs: int = 21
    run_duration: float = 20.0
    v_bounds: tuple[float, float] = (-0.6, 0.6)
    omega_bounds: tuple[float, float] = (-1.2, 1.2)
    hold_range: tuple[float, float] = (0.5, 2.0)
    rest_fraction: float = 0.25
    disturbance: DisturbanceModel = field(default_factory=lambda: DisturbanceModel(0.02, 0.02))
    seed: int = 0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.run_duration <= 0:
            raise ValueError("run_duration must be positive")
        if self.n_random_walk_runs < 0 or self.n_scripted_runs < 0:
            raise ValueError("run counts must be non-negative")
        for lo, hi in (self.v_bounds, self.omega_bounds):
            if lo > hi:
                raise ValueError("input bounds must satisfy lo <= hi")
        if not 0.0 <= self.rest_fraction <= 1.0:
            raise ValueError("rest_fraction must lie in [0, 1]")
        if not 0 < self.hold_range[0] <= self.hold_range[1]:
            raise ValueError("hold_range must be positive and ordered")

    @property
    def steps_per_run(self) -> int:
        return int(round(self.run_duration * self.sample_rate))

    @property
    def expected_samples(self) -> int:
        return (self.n_random_walk_runs + self.n_scripted_runs) * self.steps_per_run


def _bounds(cfg: DataGenConfig) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([cfg.v_bounds[0], cfg.omega_bounds[0]])
    hi = np.array([cfg.v_bounds[1], cfg.omega_bounds[1]])
    return lo, hi


def _run_disturbance(cfg: DataGenConfig, rng: np.random.Generator) -> DisturbanceModel:
    seed = int(rng.integers(2**63 - 1))
    d = cfg.disturbance
    return DisturbanceModel(d.sigma_v, d.sigma_omega, seed)


def generate_random_walk(cfg: DataGenConfig, rng: np.random.Generator) -> list[Trajectory]:
    """Piecewise-constant uniform random inputs, re-drawn every 0.5-2 s.

    A fraction ``cfg.rest_fraction`` of the holds are stops (zero input),
    as an operator pausing between moves would produce.
    """
    lo, hi = _bounds(cfg)
    T = 1.0 / cfg.sample_rate
    K = cfg.steps_per_run
    runs = []
    for _ in range(cfg.n_random_walk_runs):
        inputs = np.empty((K, INPUT_DIM))
        k = 0
        while k < K:
            hold = max(1, int(round(rng.uniform(*cfg.hold_range) * cfg.sample_rate)))
            u = rng.uniform(lo, hi)
            inputs[k:k + hold] = 0.0 if rng.random() < cfg.rest_fraction else u
            k += hold
        states = simulate_plant(np.zeros(STATE_DIM), inputs, T, _run_disturbance(cfg, rng))
        runs.append(Trajectory(states, inputs))
    return runs


def _scripted_profile(kind: int, t: np.ndarray, rng: np.random.Generator,
                      lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    vmax = np.minimum(np.abs(lo), np.abs(hi))
    # amplitude fractions keep every profile inside the box even when it is asymmetric
    a = rng.uniform(0.3, 1.0, size=2) * vmax
    period = rng.uniform(3.0, 10.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    duration = t[-1] if len(t) else 1.0
    if kind == 0:  # arcs: constant speed, slowly varying turn rate
        v = np.full_like(t, a[0] * rng.choice([-1.0, 1.0]))
        w = a[1] * np.sin(2 * np.pi * t / period[1] + phase[1]) ** 3
    elif kind == 1:  # S-curves
        v = a[0] * (0.5 + 0.5 * np.sin(2 * np.pi * t / period[0] + phase[0]))
        w = a[1] * np.sin(2 * np.pi * t / period[1] + phase[1])
    elif kind == 2:  # reversals through zero
        v = a[0] * np.sin(2 * np.pi * t / period[0] + phase[0])
        w = a[1] * np.cos(2 * np.pi * t / period[1] + phase[1])
    else:  # ramps up and down with an in-place turn segment
        ramp = 1.0 - np.abs(2.0 * t / max(duration, 1e-9) - 1.0)
        v = a[0] * ramp * rng.choice([-1.0, 1.0])
        w = a[1] * np.sign(np.sin(2 * np.pi * t / period[1] + phase[1])) * (1.0 - ramp)
    return np.clip(np.stack([v, w], axis=-1), lo, hi)


def generate_scripted_runs(cfg: DataGenConfig, rng: np.random.Generator,
                           amplitude: float = 1.0) -> list[Trajectory]:
    """Smooth velocity profiles (arcs, S-curves, reversals, ramps) emulating teleoperation."""
    lo, hi = _bounds(cfg)
    T = 1.0 / cfg.sample_rate
    t = np.arange(cfg.steps_per_run) * T
    runs = []
    for i in range(cfg.n_scripted_runs):
        inputs = amplitude * _scripted_profile(i % 4, t, rng, lo, hi)
        states = simulate_plant(np.zeros(STATE_DIM), inputs, T, _run_disturbance(cfg, rng))
        runs.append(Trajectory(states, inputs))
    return runs


class Sample(NamedTuple):
    state: np.ndarray
    input: np.ndarray
    target: np.ndarray


@dataclass
class Dataset:
    """Column-stacked samples: ``states (n,3)``, ``inputs (n,2)``, ``targets (n,3)``."""

    states: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self) -> Iterator[Sample]:
        for s, u, d in zip(self.states, self.inputs, self.targets):
            yield Sample(s, u, d)

    @property
    def features(self) -> np.ndarray:
        return np.hstack([self.states, self.inputs])

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if not samples:
            return cls.empty()
        return cls(np.array([s.state for s in samples], dtype=float),
                   np.array([s.input for s in samples], dtype=float),
                   np.array([s.target for s in samples], dtype=float))

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.empty((0, 3)), np.empty((0, 2)), np.empty((0, 3)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.inputs[idx], self.targets[idx])


def build_dataset(trajectories: Sequence[Trajectory], h: float) -> Dataset:
    """Difference-quotient targets ``(pose[k+1] - pose[k]) * h``; angles unwrapped per run."""
    parts = []
    for traj in trajectories:
        states = np.asarray(traj.states, dtype=float)
        if len(states) < 2:
            raise ValueError("each trajectory needs at least two poses")
        inputs = np.asarray(traj.inputs, dtype=float)[: len(states) - 1]
        unwrapped = states.copy()
        unwrapped[:, 2] = np.unwrap(states[:, 2])
        targets = np.diff(unwrapped, axis=0) * h
        parts.append((states[:-1], inputs, targets))
    if not parts:
        return Dataset.empty()
    return Dataset(*(np.concatenate(p) for p in zip(*parts)))


def generate_dataset(cfg: DataGenConfig) -> Dataset:
    """Full synthetic corpus: random walks followed by scripted runs."""
    rng = np.random.default_rng(cfg.seed)
    runs = generate_random_walk(cfg, rng) + generate_scripted_runs(cfg, rng)
    if not runs:
        logger.warning("no runs configured; dataset is empty")
    return build_dataset(runs, cfg.sample_rate)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_HEADER)
        for row in np.hstack([dataset.states, dataset.inputs, dataset.targets]):
            w.writerow([repr(float(v)) for v in row])


def load_dataset(path) -> Dataset:
    """Read a dataset CSV; malformed rows raise ``ValueError`` naming the line."""
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DATASET_HEADER:
            raise ValueError(f"{path}: line 1: expected header {','.join(DATASET_HEADER)}")
        for row in reader:
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}: line {reader.line_num}: non-numeric field") from None
            if len(values) != len(DATASET_HEADER) or not np.all(np.isfinite(values)):
                raise ValueError(f"{path}: line {reader.line_num}: expected 8 finite values")
            rows.append(values)
    if not rows:
        return Dataset.empty()
    a = np.array(rows)
    return Dataset(a[:, :3], a[:, 3:5], a[:, 5:])


class UnicycleModel:
    """True unicycle kinematics exposing the same interface as a learned model."""

    def __call__(self, state, inputs) -> np.ndarray:
        return true_derivative(state, inputs)

    def value_and_jacobians(self, state, inputs):
        state = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        lead = np.broadcast_shapes(state.shape[:-1], inputs.shape[:-1])
        c = np.broadcast_to(np.cos(state[..., 2]), lead)
        s = np.broadcast_to(np.sin(state[..., 2]), lead)
        v = np.broadcast_to(inputs[..., 0], lead)
        Jx = np.zeros(lead + (3, 3))
        Jx[..., 0, 2] = -v * s
        Jx[..., 1, 2] = v * c
        Ju = np.zeros(lead + (3, 2))
        Ju[..., 0, 0] = c
        Ju[..., 1, 0] = s
        Ju[..., 2, 1] = 1.0
        return true_derivative(state, inputs), Jx, Ju

    def jacobians(self, state, inputs):
        _, Jx, Ju = self.value_and_jacobians(state, inputs)
        return Jx, Ju

    def contracted_hessian(self, state, inputs, weights):
        state = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        weights = np.asarray(weights, dtype=float)
        lead = np.broadcast_shapes(state.shape[:-1], inputs.shape[:-1], weights.shape[:-1])
        c, s = np.cos(state[..., 2]), np.sin(state[..., 2])
        v = inputs[..., 0]
        H = np.zeros(lead + (5, 5))
        H[..., 2, 2] = -v * (weights[..., 0] * c + weights[..., 1] * s)
        H[..., 2, 3] = H[..., 3, 2] = weights[..., 1] * c - weights[..., 0] * s
        return H
