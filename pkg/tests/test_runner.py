import json

import numpy as np
import pytest

from dropout_mpc.ensemble import EnsembleConfig
from dropout_mpc.plant import DisturbanceModel
from dropout_mpc.runner import (RUNLOG_HEADER, SCENARIOS, RunLog, Scenario, StepRecord, compare, get_scenario,
                                load_runlog, metrics, run_closed_loop, save_runlog, summary_path)
from dropout_mpc.trajopt import MpcConfig

from conftest import random_params

T = 1 / 53


def record(t, state, u, sigma=(np.nan,) * 3):
    u = np.asarray(u, dtype=float)
    return StepRecord(t, np.asarray(state, dtype=float), u, np.full(2, np.nan), u, np.zeros(0),
                      np.asarray(sigma, dtype=float), 1.0, 0.001)


def straight_log(k, v):
    log = RunLog("line", "vanilla", T)
    for i in range(k):
        log.records.append(record(i * T, [i * v * T, 0, 0], [v, 0]))
    log.final_state = np.array([k * v * T, 0.0, 0.0])
    log.steps_used = k
    return log


class TestScenarios:
    def test_builtins(self):
        assert SCENARIOS["nav"].x_ref == (1.0, 2.0, np.pi / 4)
        assert SCENARIOS["park"].x_ref == (0.0, 1.0, 0.0)
        assert SCENARIOS["nav"].initial == SCENARIOS["park"].initial == (0.0, 0.0, 0.0)

    def test_unknown(self):
        with pytest.raises(KeyError, match="nav, park"):
            get_scenario("moon")

    def test_validation(self):
        with pytest.raises(ValueError):
            Scenario("x", (0, 0, 0), (1, 0, 0), epsilon=0)
        with pytest.raises(ValueError):
            Scenario("x", (0, 0, 0), (1, 0, 0), max_steps=0)

    def test_pose_error_wraps(self):
        s = Scenario("x", (0, 0, 0), (0, 0, np.pi))
        assert s.pose_error([0, 0, -np.pi + 0.01]) == pytest.approx(0.01)


class TestClosedLoop:
    def test_start_at_target(self):
        s = Scenario("here", (1.0, 2.0, 0.5), (1.0, 2.0, 0.5))
        log = run_closed_loop(s, "oracle")
        assert log.reached and log.steps_used == 0 and len(log.records) == 1

    def test_cap(self):
        s = Scenario("far", (0, 0, 0), (5, 5, 0), max_steps=1)
        log = run_closed_loop(s, "oracle")
        assert not log.reached and len(log.records) == 1

    def test_oracle_noise_free_nav(self):
        s = Scenario("nav", (0, 0, 0), (1, 2, np.pi / 4), disturbance=DisturbanceModel(0, 0))
        log = run_closed_loop(s, "oracle")
        assert log.reached
        assert s.pose_error(log.final_state) <= s.epsilon
        t = [r.t for r in log.records]
        assert np.all(np.diff(t) > 0)
        assert len(log.records) <= s.max_steps

    def test_inputs_within_bounds(self):
        cfg = MpcConfig()
        s = Scenario("park", (0, 0, 0), (0, 1, 0), max_steps=60)
        log = run_closed_loop(s, "oracle", mpc_cfg=cfg)
        u = np.array([r.u_final for r in log.records if np.all(np.isfinite(r.u_final))])
        assert np.all(u >= cfg.u_min) and np.all(u <= cfg.u_max)

    def test_neural_requires_model(self):
        with pytest.raises(ValueError):
            run_closed_loop(SCENARIOS["nav"], "vanilla")

    def test_unknown_controller(self):
        with pytest.raises(ValueError):
            run_closed_loop(SCENARIOS["nav"], "pid")

    def test_dropout_short_run_deterministic(self):
        params = random_params(2, spread=0.5)
        s = Scenario("nav", (0, 0, 0), (1, 2, np.pi / 4), max_steps=4)
        cfg = MpcConfig(horizon=6)
        a = run_closed_loop(s, "dropout", params, cfg, EnsembleConfig(M=3), seed=1)
        b = run_closed_loop(s, "dropout", params, cfg, EnsembleConfig(M=3), seed=1)
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.state, rb.state)
            np.testing.assert_array_equal(ra.u_final, rb.u_final)
            np.testing.assert_array_equal(ra.sigma, rb.sigma)

    def test_sigma_halt(self):
        params = random_params(2, spread=2.0)
        s = Scenario("nav", (0, 0, 0), (1, 2, np.pi / 4), max_steps=5)
        log = run_closed_loop(s, "dropout", params, MpcConfig(horizon=4), EnsembleConfig(M=3, sigma_halt=1e-12))
        assert log.halted and not log.reached and len(log.records) == 1

    def test_controller_failure_terminates(self, monkeypatch):
        import dropout_mpc.runner as runner_mod

        def boom(*a, **k):
            raise runner_mod.SolverError("diverged")

        monkeypatch.setattr(runner_mod, "solve_mpc", boom)
        log = run_closed_loop(Scenario("nav", (0, 0, 0), (1, 2, 0)), "oracle")
        assert not log.reached and log.failure == "diverged"


class TestMetrics:
    def test_single_record_at_target(self):
        log = RunLog("here", "oracle", T, [record(0.0, [1, 2, 0], [np.nan, np.nan])], np.array([1.0, 2, 0]),
                     True, 0)
        m = metrics(log)
        assert m["steps_to_converge"] == 0 and m["path_length"] == 0 and m["control_effort"] == 0

    def test_straight_line(self):
        k, v = 40, 0.3
        assert metrics(straight_log(k, v))["path_length"] == pytest.approx(k * v * T, rel=1e-12)

    def test_effort_additive(self):
        a, b = straight_log(10, 0.3), straight_log(7, 0.2)
        joined = RunLog("line", "vanilla", T, a.records + b.records, b.final_state)
        assert metrics(joined)["control_effort"] == pytest.approx(
            metrics(a)["control_effort"] + metrics(b)["control_effort"], rel=1e-12)
        assert metrics(a)["control_effort"] == pytest.approx(10 * 0.09 * T, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics(RunLog("x", "oracle", T))

    def test_sigma_stats(self):
        log = straight_log(2, 0.1)
        log.records[0].sigma = np.array([1.0, 2.0, 3.0])
        log.records[1].sigma = np.array([3.0, 4.0, 5.0])
        m = metrics(log)
        assert m["mean_sigma"] == 3.0 and m["max_sigma"] == 5.0 and m["mean_sigma_y"] == 3.0


class TestCompare:
    def test_identical(self):
        log = straight_log(5, 0.2)
        rows = compare(log, log)
        assert all(r["delta"] == 0 for r in rows)
        assert len(rows) == len(metrics(log))

    def test_mismatch(self):
        a, b = straight_log(3, 0.1), straight_log(3, 0.1)
        b.scenario = "other"
        with pytest.raises(ValueError):
            compare(a, b)

    def test_nan_on_one_side(self):
        a, b = straight_log(3, 0.1), straight_log(3, 0.1)
        for r in b.records:
            r.sigma = np.ones(3)
        row = {r["metric"]: r for r in compare(a, b)}["mean_sigma"]
        assert np.isnan(row["delta"])


class TestRunlogFile:
    def test_schema_and_roundtrip(self, tmp_path):
        s = Scenario("nav", (0, 0, 0), (1, 2, np.pi / 4), max_steps=5)
        log = run_closed_loop(s, "oracle")
        path = tmp_path / "run.csv"
        save_runlog(log, path)
        header = path.read_text().splitlines()[0]
        assert header == "t,x,y,theta,v_nn,omega_nn,v_ens,omega_ens,v_final,omega_final,sigma_x,sigma_y,sigma_theta,cost,solve_ms"
        data = load_runlog(path)
        assert data.shape == (len(log.records), len(RUNLOG_HEADER))
        np.testing.assert_array_equal(data[:, 1:4], [r.state for r in log.records])
        summary = json.loads(summary_path(path).read_text())
        assert summary["reached"] is False and summary["steps_used"] == 5
