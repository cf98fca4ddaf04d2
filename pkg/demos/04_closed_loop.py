"""Vanilla neural MPC against Dropout MPC on the built-in scenarios.

Needs a model file; with a quick demo model the robot may not reach the
target, the default-trained model reaches both.  Writes plot-ready CSVs.
"""

import sys

from dropout_mpc.runner import SCENARIOS, compare, format_table, run_closed_loop, save_runlog
from dropout_mpc.net import load_params

params = load_params(sys.argv[1] if len(sys.argv) > 1 else "demo_model.txt")
for name in ("nav", "park"):
    logs = {}
    for controller in ("vanilla", "dropout"):
        logs[controller] = run_closed_loop(SCENARIOS[name], controller, params)
        save_runlog(logs[controller], f"demo_{name}_{controller}.csv")
    print(f"\n== {name}: target {SCENARIOS[name].x_ref}")
    print(format_table(compare(logs["vanilla"], logs["dropout"]), "vanilla", "dropout"))
