"""One MPC solve with the true unicycle and with a linear surrogate.

The linear case shows the solver reproducing the LQR feedback law when
the terminal weight is the Riccati solution.
"""

import numpy as np

from dropout_mpc.plant import UnicycleModel
from dropout_mpc.trajopt import (LinearModel, MpcConfig, build_problem, lqr_gain, solve_dare, solve_mpc,
                                 terminal_cost_for)

# Linear surrogate: two integrators and a decaying heading mode.
A = np.diag([1.0, 1.0, 0.5])
B = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
cfg = MpcConfig(horizon=20, T=0.1, Q=np.eye(3), R=np.eye(2), u_min=[-100, -100], u_max=[100, 100])
term = solve_dare(A, B, cfg.Q, cfg.R)
x0 = np.array([1.0, -0.5, 0.3])
sol = solve_mpc(build_problem(cfg, x0, np.zeros(3), LinearModel(A, B, cfg.T), term))
print("P =\n", np.round(term.P, 6))
print("MPC first input:", sol.inputs[0], " LQR:", -lqr_gain(A, B, cfg.R, term.P) @ x0)

# Unicycle towards the navigation target.
cfg = MpcConfig()
x_ref = np.array([1.0, 2.0, np.pi / 4])
model = UnicycleModel()
term = terminal_cost_for(model, cfg, x_ref)
sol = solve_mpc(build_problem(cfg, np.zeros(3), x_ref, model, term))
print(f"terminal weight from {term.source}; converged {sol.converged} in {sol.iterations} iterations")
print("first inputs:", np.round(sol.inputs[:3], 4).tolist())
print("predicted end of horizon:", np.round(sol.states[-1], 4))
