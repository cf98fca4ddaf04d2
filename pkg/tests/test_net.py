import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropout_mpc.net import (DropoutMask, ModelFileError, ModelParams, NetworkModel, TrainConfig, forward,
                             jacobians, load_params, mc_predict, normalized_mse, sample_mask, save_params,
                             split_indices, train)
from dropout_mpc.plant import Dataset

from conftest import random_params


def zero_params(b2=(0.1, 0.2, 0.3), hidden=30, p=0.2):
    return ModelParams(np.zeros((hidden, 5)), np.zeros(hidden), np.zeros((3, hidden)), np.array(b2),
                       np.zeros(5), np.ones(5), np.zeros(3), np.ones(3), p)


def oracle_forward(params, keep, x, u):
    """Straight-line scalar loops, written independently of the vectorized code."""
    z = [(v - m) / s for v, m, s in zip(list(x) + list(u), params.input_mean, params.input_std)]
    H = params.W1.shape[0]
    hidden = []
    for j in range(H):
        a = params.b1[j] + sum(params.W1[j, i] * z[i] for i in range(5))
        h = 1.0 / (1.0 + np.exp(-a))
        if keep is not None:
            h = h * keep[j] / (1.0 - params.dropout_rate)
        hidden.append(h)
    out = []
    for o in range(3):
        y = params.b2[o] + sum(params.W2[o, j] * hidden[j] for j in range(H))
        out.append(y * params.target_std[o] + params.target_mean[o])
    return np.array(out)


def fd_jacobian(fn, x, u, h=1e-5):
    Jx, Ju = np.zeros((3, 3)), np.zeros((3, 2))
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        Jx[:, i] = (fn(x + d, u) - fn(x - d, u)) / (2 * h)
    for i in range(2):
        d = np.zeros(2)
        d[i] = h
        Ju[:, i] = (fn(x, u + d) - fn(x, u - d)) / (2 * h)
    return Jx, Ju


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


class TestParams:
    def test_dimension_check(self):
        p = random_params()
        with pytest.raises(ValueError):
            p.replace(b1=np.zeros(7))

    def test_std_positive(self):
        with pytest.raises(ValueError):
            random_params().replace(input_std=np.zeros(5))

    def test_rate_below_one(self):
        with pytest.raises(ValueError):
            random_params(p=1.0)

    def test_read_only(self):
        with pytest.raises(ValueError):
            random_params().W1[0, 0] = 1.0


class TestForward:
    def test_zero_network_emits_bias(self):
        out = forward(zero_params(), None, [1.0, -2.0, 0.5], [0.3, 0.1])
        np.testing.assert_array_equal(out, [0.1, 0.2, 0.3])

    def test_all_keep_mask_p0(self, params):
        p0 = params.replace(dropout_rate=0.0)
        mask = DropoutMask(np.ones(30, bool), 0.0)
        x, u = [0.1, 0.2, 0.3], [0.4, 0.5]
        np.testing.assert_array_equal(forward(p0, mask, x, u), forward(p0, None, x, u))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = random_params(seed % 7)
        x, u = rng.normal(size=3), rng.normal(size=2)
        keep = rng.random(30) > 0.2
        np.testing.assert_allclose(forward(params, None, x, u), oracle_forward(params, None, x, u), rtol=0, atol=1e-12)
        mask = DropoutMask(keep, params.dropout_rate)
        np.testing.assert_allclose(forward(params, mask, x, u), oracle_forward(params, keep, x, u), rtol=0,
                                   atol=1e-12)

    def test_network_model_matches_forward(self, params):
        rng = np.random.default_rng(1)
        x, u = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        mask = sample_mask(rng, 0.2)
        np.testing.assert_allclose(NetworkModel(params, mask)(x, u), forward(params, mask, x, u), atol=1e-12)

    def test_dimension_mismatch(self, params):
        with pytest.raises(ValueError):
            forward(params, None, [0, 0], [0, 0])
        with pytest.raises(ValueError):
            forward(params, DropoutMask(np.ones(4, bool), 0.2), [0, 0, 0], [0, 0])

    def test_nonfinite(self, params):
        with pytest.raises(ValueError):
            forward(params, None, [0, np.inf, 0], [0, 0])


class TestJacobians:
    def test_zero_network(self):
        Jx, Ju = jacobians(zero_params(), None, [1, 2, 3], [0.1, 0.2])
        np.testing.assert_array_equal(Jx, 0.0)
        np.testing.assert_array_equal(Ju, 0.0)

    def test_all_dropped(self, params):
        Jx, Ju = jacobians(params, DropoutMask(np.zeros(30, bool), 0.2), [1, 2, 3], [0.1, 0.2])
        np.testing.assert_array_equal(Jx, 0.0)
        np.testing.assert_array_equal(Ju, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.booleans())
    def test_match_fd(self, seed, masked):
        rng = np.random.default_rng(seed)
        params = random_params(seed % 5, spread=0.7)
        mask = sample_mask(rng, 0.2) if masked else None
        x, u = rng.normal(size=3), rng.normal(size=2)
        Jx, Ju = jacobians(params, mask, x, u)
        fx, fu = fd_jacobian(lambda a, b: forward(params, mask, a, b), x, u)
        assert rel_err(Jx, fx) < 1e-5
        assert rel_err(Ju, fu) < 1e-5

    def test_network_model_agrees(self, params):
        rng = np.random.default_rng(3)
        mask = sample_mask(rng, 0.2)
        x, u = rng.normal(size=3), rng.normal(size=2)
        _, Jx, Ju = NetworkModel(params, mask).value_and_jacobians(x, u)
        ref = jacobians(params, mask, x, u)
        np.testing.assert_allclose(Jx, ref[0], atol=1e-12)
        np.testing.assert_allclose(Ju, ref[1], atol=1e-12)

    def test_contracted_hessian_fd(self, params):
        rng = np.random.default_rng(4)
        model = NetworkModel(params, sample_mask(rng, 0.2))
        x, u, lam = rng.normal(size=3), rng.normal(size=2), rng.normal(size=3)
        H = model.contracted_hessian(x, u, lam)
        np.testing.assert_allclose(H, H.T, atol=1e-12)
        h = 1e-5
        z = np.concatenate([x, u])

        def grad(zz):
            _, Jx, Ju = model.value_and_jacobians(zz[:3], zz[3:])
            return lam @ np.hstack([Jx, Ju])

        for i in range(5):
            d = np.zeros(5)
            d[i] = h
            fd = (grad(z + d) - grad(z - d)) / (2 * h)
            assert rel_err(H[:, i], fd) < 1e-5


class TestMasks:
    def test_p0_all_keep(self):
        assert sample_mask(np.random.default_rng(0), 0.0).keep.all()

    def test_frequency(self):
        rng = np.random.default_rng(0)
        keep = np.array([sample_mask(rng, 0.2).keep for _ in range(100_000)])
        freq = keep.mean(axis=0)
        assert np.all(np.abs(freq - 0.8) < 0.01)

    def test_reproducible(self):
        a = sample_mask(np.random.default_rng(5), 0.2)
        b = sample_mask(np.random.default_rng(5), 0.2)
        np.testing.assert_array_equal(a.keep, b.keep)

    def test_rejects_one(self):
        with pytest.raises(ValueError):
            sample_mask(np.random.default_rng(0), 1.0)

    def test_immutable(self):
        m = sample_mask(np.random.default_rng(0), 0.2)
        with pytest.raises(ValueError):
            m.keep[0] = False


class TestMcPredict:
    def test_p0(self, params):
        mean, std = mc_predict(params, [0.1, 0.2, 0.3], [0.4, 0.5], 20, np.random.default_rng(0), p=0.0)
        np.testing.assert_array_equal(std, 0.0)
        np.testing.assert_allclose(mean, forward(params, None, [0.1, 0.2, 0.3], [0.4, 0.5]), atol=1e-12)

    def test_single_sample(self, params):
        _, std = mc_predict(params, [0.1, 0.2, 0.3], [0.4, 0.5], 1, np.random.default_rng(0))
        np.testing.assert_array_equal(std, 0.0)

    def test_zero_samples(self, params):
        with pytest.raises(ValueError):
            mc_predict(params, [0, 0, 0], [0, 0], 0, np.random.default_rng(0))

    def test_expectation(self, params):
        M = 10_000
        x, u = [0.1, 0.2, 0.3], [0.4, 0.5]
        mean, std = mc_predict(params, x, u, M, np.random.default_rng(0))
        full = forward(params, None, x, u)
        assert np.all(np.abs(mean - full) < 3 * std / np.sqrt(M))


def linear_dataset(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 5))
    A = rng.normal(size=(3, 5))
    return Dataset(X[:, :3], X[:, 3:], X @ A.T)


class TestTrain:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(train_fraction=1.0)

    def test_split(self):
        tr, te = split_indices(100, TrainConfig())
        assert len(tr) == 80 and len(te) == 20
        assert set(tr).isdisjoint(te)

    def test_too_small(self):
        with pytest.raises(ValueError):
            train(Dataset.empty(), TrainConfig(epochs=1))

    def test_identical_rows(self):
        row = np.array([[0.5, -0.2, 0.1]])
        ds = Dataset(np.repeat(row, 50, 0), np.repeat([[0.3, 0.1]], 50, 0), np.repeat([[1.0, 2.0, 3.0]], 50, 0))
        params, hist = train(ds, TrainConfig(epochs=3, dropout_rate=0.0))
        assert hist.warnings
        np.testing.assert_array_equal(params.input_std, 1.0)
        assert hist.train_mse[-1] < 1e-6 or np.allclose(forward(params, None, ds.states, ds.inputs),
                                                        forward(params, None, ds.states[:1], ds.inputs[:1]))
        # constant predictor regardless of input
        a = forward(params, None, [0, 0, 0], [0, 0])
        b = forward(params, None, [5, 5, 5], [1, 1])
        assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))

    def test_learns_linear_map(self):
        ds = linear_dataset()
        params, hist = train(ds, TrainConfig(epochs=600, batch_size=128))
        # normalized MSE is the error relative to target variance
        assert hist.test_mse[-1] < 0.05
        assert len(hist.test_mse) == 600

    def test_deterministic(self):
        ds = linear_dataset(500)
        _, h1 = train(ds, TrainConfig(epochs=5))
        _, h2 = train(ds, TrainConfig(epochs=5))
        assert h1.train_mse == h2.train_mse and h1.test_mse == h2.test_mse

    def test_normalization_from_train_split(self):
        ds = linear_dataset(500)
        cfg = TrainConfig(epochs=1)
        params, _ = train(ds, cfg)
        tr, _ = split_indices(len(ds), cfg)
        np.testing.assert_array_equal(params.input_mean, ds.features[tr].mean(axis=0))


class TestModelFile:
    def test_roundtrip(self, tmp_path, params):
        path = tmp_path / "m.txt"
        save_params(params, path)
        back = load_params(path)
        for name in ("W1", "b1", "W2", "b2", "input_mean", "input_std", "target_mean", "target_std"):
            np.testing.assert_array_equal(getattr(back, name), getattr(params, name))
        assert back.dropout_rate == params.dropout_rate
        assert path.read_text().splitlines()[0] == "dropout-mpc-model 1"

    def test_mse_roundtrip(self, tmp_path):
        ds = linear_dataset(300)
        params, hist = train(ds, TrainConfig(epochs=2))
        save_params(params, tmp_path / "m.txt")
        _, te = split_indices(len(ds), TrainConfig(epochs=2))
        assert abs(normalized_mse(load_params(tmp_path / "m.txt"), ds.subset(te)) - hist.test_mse[-1]) <= 1e-12

    def test_hidden_dim_preserved(self, tmp_path):
        p = random_params(hidden=7)
        save_params(p, tmp_path / "m.txt")
        assert load_params(tmp_path / "m.txt").hidden_dim == 7

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.txt").write_text("hello 1\n")
        with pytest.raises(ModelFileError, match="header"):
            load_params(tmp_path / "m.txt")

    def test_bad_version(self, tmp_path, params):
        save_params(params, tmp_path / "m.txt")
        text = (tmp_path / "m.txt").read_text().replace("dropout-mpc-model 1", "dropout-mpc-model 9")
        (tmp_path / "m.txt").write_text(text)
        with pytest.raises(ModelFileError, match="version"):
            load_params(tmp_path / "m.txt")

    def test_bad_dims(self, tmp_path, params):
        save_params(params, tmp_path / "m.txt")
        text = (tmp_path / "m.txt").read_text().replace("dims 5 30 3", "dims 5 31 3")
        (tmp_path / "m.txt").write_text(text)
        with pytest.raises(ModelFileError):
            load_params(tmp_path / "m.txt")
