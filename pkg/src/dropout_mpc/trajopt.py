"""Neural MPC by direct multiple shooting.

The optimal control problem over a supplied model realization is
transcribed with forward-Euler shooting defects and solved by SQP with
the exact Lagrangian Hessian where it is positive definite and the
Gauss-Newton approximation elsewhere.  Each QP subproblem is condensed onto the input
increments (the shooting states enter through their linearized defects)
and solved as a box-constrained QP by projected Newton.  Globalization is
an Armijo backtracking search on the exact L1 merit function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .plant import wrap_angle

logger = logging.getLogger(__name__)


class Dynamics(Protocol):
    """Continuous-time model ``xdot = f(x, u)`` evaluated over leading batch axes."""

    def __call__(self, state: np.ndarray, inputs: np.ndarray) -> np.ndarray: ...

    def value_and_jacobians(self, state: np.ndarray, inputs: np.ndarray
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...


class LinearModel:
    """Continuous model whose Euler discretization is exactly ``x+ = A x + B u``."""

    def __init__(self, A, B, T: float):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.T = T
        self._Fx = (self.A - np.eye(len(self.A))) / T
        self._Fu = self.B / T

    def __call__(self, state, inputs):
        return np.asarray(state) @ self._Fx.T + np.asarray(inputs) @ self._Fu.T

    def value_and_jacobians(self, state, inputs):
        f = self(state, inputs)
        lead = f.shape[:-1]
        return (f, np.broadcast_to(self._Fx, lead + self._Fx.shape),
                np.broadcast_to(self._Fu, lead + self._Fu.shape))

    def contracted_hessian(self, state, inputs, weights):
        lead = np.broadcast_shapes(np.shape(state)[:-1], np.shape(inputs)[:-1])
        return np.zeros(lead + (5, 5))


@dataclass
class MpcConfig:
    horizon: int = 20
    T: float = 1.0 / 53.0
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 0.02]))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.01]))
    u_min: np.ndarray = field(default_factory=lambda: np.array([-0.5, -1.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([0.5, 1.0]))
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    terminal: str = "soft"
    beta: float = 10.0
    epsilon: float = 0.05
    tol_kkt: float = 1e-6
    tol_defect: float = 1e-8
    max_iter: int = 10
    state_penalty: float = 1e4

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.x_min is not None:
            self.x_min = np.asarray(self.x_min, dtype=float)
        if self.x_max is not None:
            self.x_max = np.asarray(self.x_max, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.T <= 0:
            raise ValueError("step T must be positive")
        for name, M, n in (("Q", self.Q, 3), ("R", self.R, 2)):
            if M.shape != (n, n) or np.any(M != np.diag(np.diag(M))) or np.any(np.diag(M) <= 0):
                raise ValueError(f"{name} must be a {n}x{n} diagonal matrix with positive entries")
        if self.u_min.shape != (2,) or self.u_max.shape != (2,):
            raise ValueError("input bounds must have two entries")
        if np.any(self.u_min > 0) or np.any(self.u_max < 0):
            raise ValueError("input bounds must contain the zero input")
        if self.terminal not in ("soft", "hard"):
            raise ValueError("terminal must be 'soft' or 'hard'")
        if self.beta <= 0 or self.epsilon <= 0:
            raise ValueError("beta and epsilon must be positive")


@dataclass(frozen=True)
class TerminalCost:
    P: np.ndarray
    source: str  # "dare" or "fallback"
    iterations: int = 0


@dataclass
class OptimizedHorizon:
    states: np.ndarray   # (N+1, 3)
    inputs: np.ndarray   # (N, 2)
    horizon_cost: float
    converged: bool
    iterations: int
    kkt_norm: float = np.nan
    defect_norm: float = np.nan

    def shifted(self, x0, model: Dynamics, T: float) -> "OptimizedHorizon":
        """Previous solution moved one step ahead, last input repeated."""
        inputs = np.vstack([self.inputs[1:], self.inputs[-1:]])
        tail = self.states[-1] + T * np.asarray(model(self.states[-1], self.inputs[-1]))
        states = np.vstack([self.states[1:], tail])
        states[0] = x0
        return OptimizedHorizon(states, inputs, np.nan, False, 0)


def state_error(state, x_ref) -> np.ndarray:
    """``state - x_ref`` with the heading component wrapped."""
    e = np.asarray(state, dtype=float) - np.asarray(x_ref, dtype=float)
    e[..., 2] = wrap_angle(e[..., 2])
    return e


def stage_cost(state, inputs, x_ref, Q, R) -> float:
    e = state_error(state, x_ref)
    u = np.asarray(inputs, dtype=float)
    return float(e @ Q @ e + u @ R @ u)


def horizon_cost(states, inputs, x_ref, Q, R, P) -> float:
    """Sum of stage costs over ``N`` steps plus the terminal quadratic."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if states.ndim != 2 or inputs.ndim != 2 or len(states) != len(inputs) + 1:
        raise ValueError("need N+1 states and N inputs")
    e = state_error(states, x_ref)
    stage = np.einsum("ki,ij,kj->", e[:-1], Q, e[:-1]) + np.einsum("ki,ij,kj->", inputs, R, inputs)
    return float(stage + e[-1] @ P @ e[-1])


def linearize_at(model: Dynamics, x_eq, u_eq, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete linearization of one Euler step: ``A = I + T Jx``, ``B = T Ju``."""
    _, Jx, Ju = model.value_and_jacobians(np.asarray(x_eq, dtype=float), np.asarray(u_eq, dtype=float))
    if not (np.all(np.isfinite(Jx)) and np.all(np.isfinite(Ju))):
        raise ValueError("model Jacobians are not finite at the linearization point")
    return np.eye(3) + T * np.asarray(Jx), T * np.asarray(Ju)


def solve_dare(A, B, Q, R, beta: float = 10.0, tol: float = 1e-10, max_iter: int = 10_000) -> TerminalCost:
    """Riccati fixed-point iteration from ``P = Q``; falls back to ``beta * Q``."""
    A, B, Q, R = (np.asarray(M, dtype=float) for M in (A, B, Q, R))
    P = Q.copy()
    for it in range(1, max_iter + 1):
        S = R + B.T @ P @ B
        try:
            K = np.linalg.solve(S, B.T @ P @ A)
        except np.linalg.LinAlgError:
            logger.warning("singular R + B'PB in DARE iteration; using fallback terminal cost")
            break
        with np.errstate(over="ignore", invalid="ignore"):
            P_new = A.T @ P @ A - A.T @ P @ B @ K + Q
            P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            break
        if np.max(np.abs(P_new - P)) < tol:
            if np.max(np.linalg.eigvalsh(P_new)) > beta * np.max(np.linalg.eigvalsh(Q)):
                # a nearly uncontrollable mode inflates P far beyond the stage weights
                logger.info("DARE solution exceeds beta*Q; terminal cost falls back to beta*Q")
                return TerminalCost(beta * Q, "fallback", it)
            return TerminalCost(P_new, "dare", it)
        P = P_new
    logger.info("DARE iteration did not converge; terminal cost falls back to beta*Q")
    return TerminalCost(beta * Q, "fallback", max_iter)


def lqr_gain(A, B, R, P) -> np.ndarray:
    """``K = (R + B'PB)^-1 B'PA`` for the feedback ``u = -K x``."""
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def dare_residual(A, B, Q, R, P) -> float:
    rhs = A.T @ P @ A - A.T @ P @ B @ lqr_gain(A, B, R, P) + Q
    return float(np.max(np.abs(rhs - P)))


# ----------------------------------------------------------------------
# Box-constrained QP
# ----------------------------------------------------------------------


def box_qp(H, g, lo, hi, x0=None, max_iter: int = 100, tol: float = 1e-13):
    """Minimize ``0.5 x'Hx + g'x`` subject to ``lo <= x <= hi`` by projected Newton.

    Returns ``(x, free)`` where ``free`` marks variables not clamped at the
    solution.
    """
    n = len(g)
    x = np.clip(np.zeros(n) if x0 is None else x0, lo, hi)
    free = np.ones(n, dtype=bool)
    val = 0.5 * x @ H @ x + g @ x
    for _ in range(max_iter):
        grad = g + H @ x
        clamped = ((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0))
        free = ~clamped
        if not free.any():
            break
        gf = grad[free]
        if np.max(np.abs(gf)) <= tol * (1.0 + np.max(np.abs(g))):
            break
        Hf = H[np.ix_(free, free)]
        dx = np.zeros(n)
        try:
            L = np.linalg.cholesky(Hf)
            dx[free] = -np.linalg.solve(L.T, np.linalg.solve(L, gf))
        except np.linalg.LinAlgError:
            dx[free] = -gf / np.maximum(np.diag(Hf), 1e-12)
        slope = grad @ dx
        if slope >= 0:
            break
        step = 1.0
        while True:
            xn = np.clip(x + step * dx, lo, hi)
            vn = 0.5 * xn @ H @ xn + g @ xn
            if vn - val <= 0.1 * step * slope or step < 1e-10:
                break
            step *= 0.5
        improvement = val - vn
        x, val = xn, vn
        if improvement <= 1e-15 * (1.0 + abs(val)):
            break
    return x, free


# ----------------------------------------------------------------------
# Multiple-shooting NLP
# ----------------------------------------------------------------------


@dataclass
class NlpProblem:
    cfg: MpcConfig
    x0: np.ndarray
    x_ref: np.ndarray
    model: Dynamics
    P: np.ndarray

    @property
    def n_inputs(self) -> int:
        return 2 * self.cfg.horizon

    @property
    def n_states(self) -> int:
        return 3 * self.cfg.horizon

    @property
    def n_vars(self) -> int:
        return self.n_inputs + self.n_states

    @property
    def n_defects(self) -> int:
        return 3 * self.cfg.horizon

    def pack(self, states, inputs) -> np.ndarray:
        return np.concatenate([np.ravel(inputs), np.ravel(states[1:])])

    def unpack(self, w) -> tuple[np.ndarray, np.ndarray]:
        N = self.cfg.horizon
        inputs = np.reshape(w[: 2 * N], (N, 2))
        states = np.vstack([self.x0, np.reshape(w[2 * N:], (N, 3))])
        return states, inputs

    def defects(self, states, inputs) -> np.ndarray:
        """``x[k+1] - (x[k] + T f(x[k], u[k]))`` for ``k = 0..N-1``."""
        F = states[:-1] + self.cfg.T * self.model(states[:-1], inputs)
        return states[1:] - F

    def objective(self, states, inputs) -> float:
        cost = horizon_cost(states, inputs, self.x_ref, self.cfg.Q, self.cfg.R, self.P)
        return cost + self._state_box_penalty(states)

    def _state_box_penalty(self, states) -> float:
        viol = self._state_violation(states)
        return 0.0 if viol is None else float(self.cfg.state_penalty * np.sum(viol**2))

    def _state_violation(self, states):
        cfg = self.cfg
        if cfg.x_min is None and cfg.x_max is None:
            return None
        lo = -np.inf if cfg.x_min is None else cfg.x_min
        hi = np.inf if cfg.x_max is None else cfg.x_max
        X = states[1:]
        return X - np.clip(X, lo, hi)

    def rollout(self, inputs) -> np.ndarray:
        """Defect-free states for the given inputs."""
        states = np.empty((len(inputs) + 1, 3))
        states[0] = self.x0
        for k, u in enumerate(inputs):
            states[k + 1] = states[k] + self.cfg.T * np.asarray(self.model(states[k], u))
        return states

    def initial_guess(self) -> tuple[np.ndarray, np.ndarray]:
        inputs = np.zeros((self.cfg.horizon, 2))
        return self.rollout(inputs), inputs


def build_problem(cfg: MpcConfig, x0, x_ref, model: Dynamics, P) -> NlpProblem:
    x0 = np.asarray(x0, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    P = np.asarray(P.P if isinstance(P, TerminalCost) else P, dtype=float)
    if x0.shape != (3,) or x_ref.shape != (3,) or P.shape != (3, 3):
        raise ValueError("x0 and x_ref must be 3-vectors and P a 3x3 matrix")
    if np.any(cfg.u_min > cfg.u_max):
        raise ValueError("infeasible input bounds")
    if cfg.x_min is not None and np.any(x_ref < cfg.x_min):
        raise ValueError("reference lies outside the state box")
    if cfg.x_max is not None and np.any(x_ref > cfg.x_max):
        raise ValueError("reference lies outside the state box")
    if cfg.x_min is not None and cfg.x_max is not None and np.any(cfg.x_min > cfg.x_max):
        raise ValueError("infeasible state bounds")
    return NlpProblem(cfg, x0, x_ref, model, P)


class SolverError(RuntimeError):
    pass


def _sqp(problem: NlpProblem, states, inputs, term_weight, term_linear):
    """SQP on the objective with a modified terminal quadratic ``e'We + q'e``.

    The plain problem uses ``W = P`` and ``q = 0``.  Models exposing
    ``contracted_hessian`` get the exact Lagrangian Hessian when it is
    positive definite; otherwise the step falls back to Gauss-Newton.
    """
    cfg = problem.cfg
    N, T = cfg.horizon, cfg.T
    Q, R = cfg.Q, cfg.R
    lo_u, hi_u = cfg.u_min, cfg.u_max
    model, x_ref = problem.model, problem.x_ref
    exact = hasattr(model, "contracted_hessian")
    Wk = np.concatenate([np.broadcast_to(Q, (N - 1, 3, 3)), term_weight[None]])
    Rdiag = np.tile(np.diag(R), N)
    lo_all = np.tile(lo_u, N)
    hi_all = np.tile(hi_u, N)
    eye = np.eye(3)
    has_box = cfg.x_min is not None or cfg.x_max is not None
    rows = np.arange(N)
    mu = 1.0
    lam = None

    def cost(X, U, e):
        J = (np.einsum("ki,ij,kj->", e[:-1], Q, e[:-1]) + np.einsum("ki,ij,kj->", U, R, U)
             + e[-1] @ term_weight @ e[-1] + term_linear @ e[-1])
        return J + problem._state_box_penalty(X) if has_box else J

    kkt = dnorm = np.inf
    converged = False
    it = 0
    for it in range(cfg.max_iter + 1):
        f, Jx, Ju = model.value_and_jacobians(states[:-1], inputs)
        A = eye + T * Jx
        B = T * Ju
        d = states[1:] - (states[:-1] + T * f)
        e = state_error(states, x_ref)
        J = cost(states, inputs, e)
        if not np.isfinite(J) or not np.all(np.isfinite(d)):
            raise SolverError("non-finite objective or defects during SQP iteration")

        # condensing: dx_k = S_k du + c_k for k = 0..N (x_0 is fixed)
        S = np.zeros((N + 1, 3, 2 * N))
        c = np.zeros((N + 1, 3))
        for k in range(N):
            S[k + 1] = A[k] @ S[k]
            S[k + 1, :, 2 * k:2 * k + 2] += B[k]
            c[k + 1] = A[k] @ c[k] - d[k]
        Sx = S[1:]
        W = Wk
        lin = np.zeros((N, 3))
        lin[-1] = term_linear
        if has_box:
            viol = problem._state_violation(states)
            active = (viol != 0.0) * cfg.state_penalty
            W = Wk + active[:, :, None] * eye
            lin = lin + 2.0 * active * (viol - e[1:])
        WS = np.einsum("kij,kjm->kim", W, Sx)
        H = 2.0 * np.einsum("kim,kin->mn", Sx, WS)
        H[np.diag_indices_from(H)] += 2.0 * Rdiag
        u_flat = inputs.ravel()
        grad_cur = 2.0 * np.einsum("kij,kj->ki", W, e[1:]) + lin
        g = np.einsum("kim,ki->m", Sx, grad_cur + 2.0 * np.einsum("kij,kj->ki", W, c[1:]))
        g += 2.0 * Rdiag * u_flat

        lo = lo_all - u_flat
        hi = hi_all - u_flat
        pg = g.copy()
        pg[(lo >= 0) & (g > 0)] = 0.0
        pg[(hi <= 0) & (g < 0)] = 0.0
        kkt = float(np.max(np.abs(pg)))
        dnorm = float(np.max(np.abs(d)))
        if dnorm <= cfg.tol_defect and kkt <= cfg.tol_kkt * max(1.0, abs(J)):
            converged = True
            break
        if it == cfg.max_iter:
            break

        H_gn, g_gn = H, g
        if exact and lam is not None:
            # Lagrangian curvature of the defect constraints, blocks over (x_k, u_k)
            L = -T * model.contracted_hessian(states[:-1], inputs, lam)
            Z = np.zeros((N, 5, 2 * N))
            Z[:, :3] = S[:-1]
            Z[rows, 3, 2 * rows] = 1.0
            Z[rows, 4, 2 * rows + 1] = 1.0
            LZ = np.einsum("kij,kjm->kim", L, Z)
            H = H + np.einsum("kim,kin->mn", Z, LZ)
            g = g + np.einsum("kim,ki->m", LZ[:, :3], c[:-1])
            w = np.linalg.eigvalsh(H)
            floor = 1e-10 * max(np.max(np.abs(w)), 1.0)
            if w.min() < floor:
                H, g = H_gn, g_gn

        du, _ = box_qp(H, g, lo, hi)
        dx = np.einsum("kim,m->ki", Sx, du) + c[1:]

        # QP costates; they set the merit penalty and the next Lagrangian Hessian
        grad_new = 2.0 * np.einsum("kij,kj->ki", W, e[1:] + dx) + lin
        lam = np.empty((N, 3))
        lam[-1] = -grad_new[-1]
        for k in range(N - 2, -1, -1):
            lam[k] = A[k + 1].T @ lam[k + 1] - grad_new[k]
        lam_max = float(np.max(np.abs(lam)))
        if mu < 1.1 * lam_max:
            mu = 2.0 * lam_max + 1e-3

        dirderiv = float(np.sum(grad_cur * dx) + np.sum(2.0 * Rdiag * u_flat * du) - mu * np.sum(np.abs(d)))
        phi0 = J + mu * np.sum(np.abs(d))
        du = du.reshape(N, 2)
        alpha = 1.0
        while True:
            Xn = states.copy()
            Xn[1:] += alpha * dx
            Un = np.clip(inputs + alpha * du, lo_u, hi_u)
            dn = Xn[1:] - (Xn[:-1] + T * model(Xn[:-1], Un))
            phin = cost(Xn, Un, state_error(Xn, x_ref)) + mu * np.sum(np.abs(dn))
            if np.isfinite(phin) and (phin <= phi0 + 1e-4 * alpha * min(dirderiv, 0.0) or alpha < 1e-6):
                break
            alpha *= 0.5
        states, inputs = Xn, Un
    return states, inputs, converged, it, kkt, dnorm


def solve_mpc(problem: NlpProblem, warm_start: OptimizedHorizon | None = None) -> OptimizedHorizon:
    """Solve the multiple-shooting NLP from a cold or warm start.

    A warm start is used as given; callers shift previous solutions with
    :meth:`OptimizedHorizon.shifted`.  Inputs of the returned horizon
    always satisfy the box bounds.
    """
    cfg = problem.cfg
    if warm_start is None:
        states, inputs = problem.initial_guess()
    else:
        states = np.array(warm_start.states, dtype=float)
        inputs = np.array(warm_start.inputs, dtype=float)
        if states.shape != (cfg.horizon + 1, 3) or inputs.shape != (cfg.horizon, 2):
            raise ValueError("warm start does not match the horizon length")
        states[0] = problem.x0
    inputs = np.clip(inputs, cfg.u_min, cfg.u_max)

    if cfg.terminal == "soft":
        states, inputs, converged, iters, kkt, dnorm = _sqp(problem, states, inputs, problem.P, np.zeros(3))
    else:
        # augmented Lagrangian on x_N = x_ref
        rho, nu = 100.0, np.zeros(3)
        iters = 0
        converged = False
        for _ in range(20):
            W = problem.P + 0.5 * rho * np.eye(3)
            states, inputs, inner_ok, k, kkt, dnorm = _sqp(problem, states, inputs, W, nu)
            iters += k
            r = state_error(states[-1], problem.x_ref)
            if inner_ok and np.max(np.abs(r)) <= max(cfg.tol_defect, 1e-6):
                converged = True
                break
            nu = nu + rho * r
            rho = min(rho * 10.0, 1e8)

    inputs = np.clip(inputs, cfg.u_min, cfg.u_max)
    cost = horizon_cost(states, inputs, problem.x_ref, cfg.Q, cfg.R, problem.P)
    if not np.isfinite(cost):
        raise SolverError("non-finite horizon cost")
    return OptimizedHorizon(states, inputs, cost, converged, iters, kkt, dnorm)


def terminal_cost_for(model: Dynamics, cfg: MpcConfig, x_ref) -> TerminalCost:
    """DARE terminal weight from the linearization at ``(x_ref, 0)``."""
    A, B = linearize_at(model, x_ref, np.zeros(2), cfg.T)
    return solve_dare(A, B, cfg.Q, cfg.R, beta=cfg.beta)

