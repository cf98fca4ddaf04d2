"""Inside one Dropout MPC step: member costs, weights, vote, blend and spread.

Needs a model file, e.g. from ``01_data_and_training.py``.
"""

import sys

import numpy as np

from dropout_mpc.ensemble import EnsembleConfig, dropout_mpc_step
from dropout_mpc.net import load_params
from dropout_mpc.trajopt import MpcConfig

params = load_params(sys.argv[1] if len(sys.argv) > 1 else "demo_model.txt")
mpc_cfg, ens_cfg = MpcConfig(), EnsembleConfig()
state, x_ref = np.zeros(3), np.array([1.0, 2.0, np.pi / 4])

d = dropout_mpc_step(state, x_ref, params, mpc_cfg, ens_cfg, None, np.random.default_rng(0))
print("member   cost      weight   first input")
for i, (h, w) in enumerate(zip(d.member_horizons, d.weights)):
    print(f"{i:>6} {h.horizon_cost:9.3f}  {w:7.3f}   {np.round(h.inputs[0], 4)}")
print("full network input:", np.round(d.u_nn, 4))
print("ensemble vote:     ", np.round(d.u_ensemble, 4))
print("applied input:     ", np.round(d.u_final, 4))
print("next-state std:    ", d.sigma)
print("xy covariance:\n", d.xy_covariance)

# With dropout switched off every member is the full network.
d0 = dropout_mpc_step(state, x_ref, params, mpc_cfg, EnsembleConfig(p=0.0), None, np.random.default_rng(0))
print("p=0: applied", d0.u_final, "vs full", d0.u_nn, "sigma", d0.sigma)
