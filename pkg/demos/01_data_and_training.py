"""Generate synthetic driving data and fit the dynamics network.

Run with ``--full`` for the default corpus (about 43k samples, 600 epochs,
roughly a minute); the default here is a quick, smaller run.
"""

import argparse

import numpy as np

from dropout_mpc.net import TrainConfig, forward, save_params, train
from dropout_mpc.plant import DataGenConfig, generate_dataset, true_derivative

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default="demo_model.txt")
args = parser.parse_args()

data_cfg = DataGenConfig() if args.full else DataGenConfig(n_random_walk_runs=6, n_scripted_runs=6)
train_cfg = TrainConfig() if args.full else TrainConfig(epochs=60)

dataset = generate_dataset(data_cfg)
print(f"{len(dataset)} samples; v range [{dataset.inputs[:, 0].min():.2f}, {dataset.inputs[:, 0].max():.2f}]")

params, history = train(dataset, train_cfg)
print(f"normalized MSE after {train_cfg.epochs} epochs: train {history.train_mse[-1]:.4f}, "
      f"test {history.test_mse[-1]:.4f}")

# How close is the learned derivative to the true unicycle on a few probes?
probes = np.array([[0.0, 0.0, 0.0, 0.4, 0.0], [0.5, 0.5, np.pi / 2, 0.3, 0.5], [0.0, 1.0, -1.0, -0.2, -0.8]])
for row in probes:
    learned = forward(params, None, row[:3], row[3:])
    truth = true_derivative(row[:3], row[3:])
    print(f"state {row[:3]}, input {row[3:]}: learned {np.round(learned, 3)}, true {np.round(truth, 3)}")

save_params(params, args.out)
print(f"model written to {args.out}")
