"""Command-line entry point: gen-data, train, run, compare, inspect.

Settings come from an optional YAML file (``--config`` or the
``DROPOUT_MPC_CONFIG`` environment variable) with the sections ``data``,
``train``, ``mpc``, ``ensemble``, ``scenario``, ``scenarios``, ``paths`` and a
top-level ``seed``.  Command-line flags override the file.

Exit codes: 0 success / target reached, 1 target not reached,
2 usage or configuration error, 3 file or parse error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import net, plant, runner
from .ensemble import EnsembleConfig
from .trajopt import MpcConfig

CONFIG_ENV = "DROPOUT_MPC_CONFIG"
EXIT_OK, EXIT_NOT_REACHED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("dropout_mpc")


class ConfigError(ValueError):
    pass


class FileProblem(Exception):
    pass


DEFAULT_PATHS = {
    "data": "dataset.csv",
    "model": "model.txt",
    "history": "loss_history.csv",
    "runlog": "runlog.csv",
    "compare": "compare.csv",
}


@dataclass
class Config:
    data: plant.DataGenConfig = field(default_factory=plant.DataGenConfig)
    train: net.TrainConfig = field(default_factory=net.TrainConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    scenario_overrides: dict = field(default_factory=dict)
    extra_scenarios: dict = field(default_factory=dict)
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    seed: int = 0

    def scenario(self, name: str) -> runner.Scenario:
        if name in self.extra_scenarios:
            base = self.extra_scenarios[name]
        elif name in runner.SCENARIOS:
            base = runner.SCENARIOS[name]
        else:
            known = sorted(set(runner.SCENARIOS) | set(self.extra_scenarios))
            raise ConfigError(f"unknown scenario {name!r}; available: {', '.join(known)}")
        return _apply_scenario_overrides(base, self.scenario_overrides)


def _section(cls, values, name: str, convert=None):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    values = dict(values)
    if convert:
        values = convert(values)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _data_convert(v: dict) -> dict:
    if "disturbance" in v:
        v["disturbance"] = _disturbance(v["disturbance"], "data.disturbance")
    for key in ("v_bounds", "omega_bounds", "hold_range"):
        if key in v:
            v[key] = tuple(float(x) for x in v[key])
    return v


def _mpc_convert(v: dict) -> dict:
    for key in ("Q", "R"):
        if key in v:
            diag = np.asarray(v[key], dtype=float)
            v[key] = np.diag(diag) if diag.ndim == 1 else diag
    return v


def _disturbance(v, where: str) -> plant.DisturbanceModel:
    if not isinstance(v, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    try:
        return plant.DisturbanceModel(**v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}': {exc}") from exc


_SCENARIO_KEYS = {"epsilon", "max_steps", "sigma_v", "sigma_omega", "disturbance_seed", "pose_weights"}


def _apply_scenario_overrides(base: runner.Scenario, over: dict) -> runner.Scenario:
    if not over:
        return base
    d = base.disturbance
    dist = plant.DisturbanceModel(over.get("sigma_v", d.sigma_v), over.get("sigma_omega", d.sigma_omega),
                                  over.get("disturbance_seed", d.seed))
    kw = {k: over[k] for k in ("epsilon", "max_steps") if k in over}
    if "pose_weights" in over:
        kw["pose_weights"] = tuple(float(w) for w in over["pose_weights"])
    try:
        return replace(base, disturbance=dist, **kw)
    except ValueError as exc:
        raise ConfigError(f"invalid scenario settings: {exc}") from exc


def _parse_scenarios(raw) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("'scenarios' must map names to {initial, x_ref}")
    out = {}
    for name, spec in raw.items():
        try:
            initial = tuple(float(v) for v in spec["initial"])
            x_ref = tuple(float(v) for v in spec["x_ref"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"scenario {name!r} needs 3-element 'initial' and 'x_ref'") from exc
        if len(initial) != 3 or len(x_ref) != 3:
            raise ConfigError(f"scenario {name!r} needs 3-element 'initial' and 'x_ref'")
        out[str(name)] = runner.Scenario(str(name), initial, x_ref)
    return out


def load_config(path: str | os.PathLike | None) -> Config:
    """Read and validate a YAML config; ``None`` gives the defaults."""
    if path is None:
        return Config()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise FileProblem(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    allowed = {"data", "train", "mpc", "ensemble", "scenario", "scenarios", "paths", "seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    scen = raw.get("scenario") or {}
    if not isinstance(scen, dict) or set(scen) - _SCENARIO_KEYS:
        raise ConfigError(f"'scenario' accepts only: {', '.join(sorted(_SCENARIO_KEYS))}")
    paths = dict(DEFAULT_PATHS)
    extra_paths = raw.get("paths") or {}
    if set(extra_paths) - set(DEFAULT_PATHS):
        raise ConfigError(f"'paths' accepts only: {', '.join(DEFAULT_PATHS)}")
    paths.update({k: str(v) for k, v in extra_paths.items()})
    cfg = Config(
        data=_section(plant.DataGenConfig, raw.get("data"), "data", _data_convert),
        train=_section(net.TrainConfig, raw.get("train"), "train"),
        mpc=_section(MpcConfig, raw.get("mpc"), "mpc", _mpc_convert),
        ensemble=_section(EnsembleConfig, raw.get("ensemble"), "ensemble"),
        scenario_overrides=scen,
        extra_scenarios=_parse_scenarios(raw.get("scenarios")),
        paths=paths,
    )
    if "seed" in raw:
        cfg = _with_seed(cfg, int(raw["seed"]))
    return cfg


def _with_seed(cfg: Config, seed: int) -> Config:
    """The global seed drives data generation, training and the closed loop."""
    cfg.seed = seed
    cfg.data = replace(cfg.data, seed=seed)
    cfg.train = replace(cfg.train, seed=seed)
    cfg.ensemble = replace(cfg.ensemble, seed=seed)
    return cfg


def apply_overrides(cfg: Config, args: argparse.Namespace) -> Config:
    try:
        if args.seed is not None:
            cfg = _with_seed(cfg, args.seed)
        ens = {k: v for k, v in (("M", args.M), ("p", args.p), ("kappa", args.kappa),
                                 ("lam", args.lam), ("xi", args.xi)) if v is not None}
        if ens:
            cfg.ensemble = replace(cfg.ensemble, **ens)
        if args.horizon is not None:
            cfg.mpc = replace(cfg.mpc, horizon=args.horizon)
        if args.epochs is not None:
            cfg.train = replace(cfg.train, epochs=args.epochs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for key in DEFAULT_PATHS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.paths[key] = value
    return cfg


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_data(cfg: Config, out_path) -> int:
    dataset = plant.generate_dataset(cfg.data)
    if len(dataset) == 0:
        logger.warning("no runs configured; writing a header-only dataset")
    try:
        plant.save_dataset(dataset, out_path)
    except OSError as exc:
        raise FileProblem(f"cannot write dataset {out_path}: {exc}") from exc
    print(f"wrote {len(dataset)} samples to {out_path}")
    return EXIT_OK


def cmd_train(cfg: Config, dataset_path, model_out, history_out) -> int:
    try:
        dataset = plant.load_dataset(dataset_path)
    except (OSError, ValueError) as exc:
        raise FileProblem(f"cannot read dataset: {exc}") from exc
    params, history = net.train(dataset, cfg.train)
    try:
        net.save_params(params, model_out)
        with open(history_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "test_mse"])
            for i, (a, b) in enumerate(zip(history.train_mse, history.test_mse), start=1):
                w.writerow([i, repr(a), repr(b)])
    except OSError as exc:
        raise FileProblem(f"cannot write training output: {exc}") from exc
    for msg in history.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"final train MSE {history.train_mse[-1]!r}")
    print(f"final test MSE {history.test_mse[-1]!r}")
    print(f"model written to {model_out}; loss history to {history_out}")
    return EXIT_OK


def _load_model(path) -> net.ModelParams:
    try:
        return net.load_params(path)
    except (OSError, net.ModelFileError) as exc:
        raise FileProblem(f"cannot load model: {exc}") from exc


def _run(cfg: Config, params, scenario: str, controller: str) -> runner.RunLog:
    return runner.run_closed_loop(cfg.scenario(scenario), controller, params, cfg.mpc, cfg.ensemble, cfg.seed)


_CONTROLLER_ALIASES = {"dropout-mpc": "dropout", "vanilla-mpc": "vanilla", "oracle-model-mpc": "oracle"}


def _controller(kind: str) -> str:
    kind = _CONTROLLER_ALIASES.get(kind, kind)
    if kind not in runner.CONTROLLERS:
        raise ConfigError(f"unknown controller {kind!r}; choose from {', '.join(runner.CONTROLLERS)}")
    return kind


def cmd_run(cfg: Config, model_path, scenario: str, controller: str, out_path) -> int:
    controller = _controller(controller)
    cfg.scenario(scenario)  # fail on unknown names before loading anything
    params = None if controller == "oracle" else _load_model(model_path)
    log = _run(cfg, params, scenario, controller)
    try:
        runner.save_runlog(log, out_path)
    except OSError as exc:
        raise FileProblem(f"cannot write run log {out_path}: {exc}") from exc
    m = runner.metrics(log)
    status = "reached" if log.reached else "not reached"
    print(f"{scenario}/{controller}: {status} after {log.steps_used} steps; "
          f"path {m['path_length']:.4f} m, effort {m['control_effort']:.4f}, "
          f"mean solve {m['mean_solve_ms']:.1f} ms")
    print(f"run log written to {out_path}")
    return EXIT_OK if log.reached else EXIT_NOT_REACHED


def cmd_compare(cfg: Config, model_path, scenario: str, out_path, first="vanilla", second="dropout") -> int:
    first, second = _controller(first), _controller(second)
    cfg.scenario(scenario)
    params = None if first == second == "oracle" else _load_model(model_path)
    log_a = _run(cfg, params, scenario, first)
    log_b = _run(cfg, params, scenario, second)
    rows = runner.compare(log_a, log_b)
    print(runner.format_table(rows, first, second))
    try:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", first, second, "delta", "rel_delta"])
            for r in rows:
                w.writerow([r["metric"], repr(r["a"]), repr(r["b"]), repr(r["delta"]), repr(r["rel_delta"])])
    except OSError as exc:
        raise FileProblem(f"cannot write comparison {out_path}: {exc}") from exc
    return EXIT_OK if log_a.reached and log_b.reached else EXIT_NOT_REACHED


def inspect_summary(params: net.ModelParams) -> str:
    lines = [
        f"dims: in {net.IN_DIM}, hidden {params.hidden_dim}, out {net.OUT_DIM}",
        f"dropout rate: {params.dropout_rate}",
        "input mean:  " + " ".join(f"{v: .6g}" for v in params.input_mean),
        "input std:   " + " ".join(f"{v: .6g}" for v in params.input_std),
        "target mean: " + " ".join(f"{v: .6g}" for v in params.target_mean),
        "target std:  " + " ".join(f"{v: .6g}" for v in params.target_std),
    ]
    for name in ("W1", "b1", "W2", "b2"):
        arr = getattr(params, name)
        lines.append(f"|{name}|_F = {np.linalg.norm(arr):.6g}  (max |.| {np.max(np.abs(arr)):.6g})")
    return "\n".join(lines)


def cmd_inspect(model_path) -> int:
    print(inspect_summary(_load_model(model_path)))
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int)
    common.add_argument("-M", type=int, dest="M", help="ensemble size")
    common.add_argument("-p", type=float, dest="p", help="dropout rate at inference")
    common.add_argument("--kappa", type=int)
    common.add_argument("--lam", type=float, help="full-network blend weight")
    common.add_argument("--xi", type=float, help="ensemble blend weight")
    common.add_argument("-N", "--horizon", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dropout-mpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset CSV")
    p.add_argument("--out", dest="data")

    p = sub.add_parser("train", parents=[common], help="train the dynamics network")
    p.add_argument("--data")
    p.add_argument("--model", help="model file to write")
    p.add_argument("--history", help="loss-history CSV to write")

    p = sub.add_parser("run", parents=[common], help="closed-loop run of one controller")
    p.add_argument("scenario")
    p.add_argument("controller", help="dropout, vanilla or oracle")
    p.add_argument("--model")
    p.add_argument("--out", dest="runlog")

    p = sub.add_parser("compare", parents=[common], help="run two controllers and tabulate metrics")
    p.add_argument("scenario")
    p.add_argument("--model")
    p.add_argument("--out", dest="compare")
    p.add_argument("--controllers", nargs=2, default=["vanilla", "dropout"], metavar=("A", "B"))

    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("model")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args.model)
        cfg = apply_overrides(load_config(args.config or os.environ.get(CONFIG_ENV)), args)
        paths = cfg.paths
        if args.command == "gen-data":
            return cmd_gen_data(cfg, paths["data"])
        if args.command == "train":
            return cmd_train(cfg, paths["data"], paths["model"], paths["history"])
        if args.command == "run":
            return cmd_run(cfg, paths["model"], args.scenario, args.controller, paths["runlog"])
        if args.command == "compare":
            return cmd_compare(cfg, paths["model"], args.scenario, paths["compare"], *args.controllers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
