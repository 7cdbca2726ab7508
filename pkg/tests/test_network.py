import numpy as np
import pytest

from safeswitch.network import (
    CbvfNetwork,
    Normalization,
    WeightFileTruncatedError,
    WeightShapeError,
    WeightVersionError,
    forward,
    forward_with_input_grads,
    init_weights,
    load_weights,
    loss_param_grad,
    save_weights,
)


def reference_forward(net, x, t):
    """Straight-line matrix arithmetic twin of the forward pass."""
    inp = np.concatenate([np.atleast_1d(x), [t]])
    a = net.normalization.in_scale * inp + net.normalization.in_offset
    for k in range(len(net.weights) - 1):
        a = np.sin(net.omega0 * (net.weights[k] @ a + net.biases[k]))
    raw = net.weights[-1] @ a + net.biases[-1]
    return net.normalization.out_scale * float(raw[0])


def small_net(seed, sizes=(3, 12, 12, 1), out_scale=1.0):
    norm = Normalization.from_box([-1.0, 2.0], [3.0, 5.0], 4.0, out_scale=out_scale)
    return init_weights(sizes, omega0=30.0, seed=seed, normalization=norm)


class TestForward:
    def test_constant_head(self):
        net = small_net(0)
        zero_w = tuple(w if k < 2 else np.zeros_like(w) for k, w in enumerate(net.weights))
        beta = 1.25
        biases = tuple(b if k < 2 else np.array([beta]) for k, b in enumerate(net.biases))
        net2 = CbvfNetwork(net.layer_sizes, zero_w, biases, net.omega0, net.normalization)
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.uniform(-1, 3, 2)
            assert forward(net2, x, rng.uniform(0, 4)) == beta

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            net = small_net(seed, out_scale=float(rng.uniform(0.5, 4.0)))
            for _ in range(20):
                x = rng.uniform(-1, 3, 2)
                t = float(rng.uniform(0, 4))
                got = forward(net, x, t)
                want = reference_forward(net, x, t)
                assert got == pytest.approx(want, rel=1e-12, abs=1e-14)

    def test_batched_matches_single(self):
        net = small_net(3)
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 3, size=(17, 2))
        T = rng.uniform(0, 4, size=17)
        batch = forward(net, X, T)
        singles = np.array([forward(net, X[i], T[i]) for i in range(17)])
        np.testing.assert_allclose(batch, singles, rtol=1e-12)

    def test_determinism(self):
        net = small_net(4)
        x = np.array([0.5, 3.0])
        assert forward(net, x, 1.0) == forward(net, x, 1.0)

    def test_shape_mismatch_rejected(self):
        net = small_net(5)
        with pytest.raises(ValueError):
            forward(net, np.zeros(5), 0.0)


class TestInputGrads:
    def test_value_identical_to_forward(self):
        net = small_net(6)
        rng = np.random.default_rng(6)
        X = rng.uniform(-1, 3, size=(64, 2))
        T = rng.uniform(0, 4, size=64)
        bundle = forward_with_input_grads(net, X, T)
        np.testing.assert_array_equal(bundle.value, forward(net, X, T))

    def test_matches_central_differences(self):
        rng = np.random.default_rng(7)
        eps = 1e-4
        for seed in range(10):
            net = small_net(seed + 100, out_scale=2.0)
            x = rng.uniform(-0.5, 2.5, 2)
            t = float(rng.uniform(0.5, 3.5))
            bundle = forward_with_input_grads(net, x, t)
            for j in range(2):
                d = np.zeros(2)
                d[j] = eps
                fd = (forward(net, x + d, t) - forward(net, x - d, t)) / (2 * eps)
                assert bundle.grad_x[j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            fd_t = (forward(net, x, t + eps) - forward(net, x, t - eps)) / (2 * eps)
            assert bundle.grad_t == pytest.approx(fd_t, rel=1e-5, abs=1e-9)

    def test_constant_network_zero_gradient(self):
        net = small_net(8)
        zero_w = tuple(np.zeros_like(w) for w in net.weights)
        net2 = CbvfNetwork(net.layer_sizes, zero_w, net.biases, net.omega0, net.normalization)
        bundle = forward_with_input_grads(net2, np.array([1.0, 3.0]), 2.0)
        np.testing.assert_array_equal(bundle.grad_x, np.zeros(2))
        assert bundle.grad_t == 0.0


class TestParamGrads:
    @staticmethod
    def _fd_param_grad(net, X, T, loss_fn, param_idx, entry, h=1e-6):
        params = net.parameters()
        orig = params[param_idx][entry]
        params[param_idx][entry] = orig + h
        b = forward_with_input_grads(net.with_parameters(params), X, T)
        lp = loss_fn(b.value, b.grad_x, b.grad_t)[0]
        params[param_idx][entry] = orig - h
        b = forward_with_input_grads(net.with_parameters(params), X, T)
        lm = loss_fn(b.value, b.grad_x, b.grad_t)[0]
        params[param_idx][entry] = orig
        return (lp - lm) / (2 * h)

    def test_value_loss_gradient(self):
        net = small_net(20)
        rng = np.random.default_rng(20)
        X = rng.uniform(-1, 3, size=(8, 2))
        T = rng.uniform(0, 4, 8)

        def loss_fn(v, gx, gt):
            B = v.shape[0]
            return float(np.mean(v**2)), 2 * v / B, np.zeros_like(gx), np.zeros_like(gt)

        _, grads = loss_param_grad(net, X, T, loss_fn)
        flat = grads.flat()
        for pi, entry in ((0, (0, 0)), (2, (3, 5)), (3, (4,)), (4, (0, 7))):
            fd = self._fd_param_grad(net, X, T, loss_fn, pi, entry)
            assert flat[pi][entry] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_gradient_loss_gradient(self):
        # loss touching only the input gradients exercises the nested pass
        net = small_net(21)
        rng = np.random.default_rng(21)
        X = rng.uniform(-1, 3, size=(6, 2))
        T = rng.uniform(0.2, 3.8, 6)

        def loss_fn(v, gx, gt):
            B = v.shape[0]
            loss = float(np.mean(np.abs(gt)) + np.mean(gx[:, 0] ** 2))
            dgt = np.sign(gt) / B
            dgx = np.zeros_like(gx)
            dgx[:, 0] = 2 * gx[:, 0] / B
            return loss, np.zeros_like(v), dgx, dgt

        _, grads = loss_param_grad(net, X, T, loss_fn)
        flat = grads.flat()
        for pi, entry in ((0, (2, 1)), (2, (0, 0)), (4, (0, 3)), (1, (4,)), (5, (0,))):
            fd = self._fd_param_grad(net, X, T, loss_fn, pi, entry)
            assert flat[pi][entry] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_empty_batch_zero_gradient(self):
        net = small_net(22)

        def loss_fn(v, gx, gt):
            return 0.0, np.zeros_like(v), np.zeros_like(gx), np.zeros_like(gt)

        loss, grads = loss_param_grad(net, np.zeros((0, 2)), np.zeros(0), loss_fn)
        assert loss == 0.0
        for g in grads.flat():
            assert not np.any(g)


class TestInit:
    def test_same_seed_bitwise_equal(self):
        a = init_weights([4, 16, 16, 1], seed=11)
        b = init_weights([4, 16, 16, 1], seed=11)
        for wa, wb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(wa, wb)

    def test_different_seeds_differ(self):
        a = init_weights([4, 16, 1], seed=1)
        b = init_weights([4, 16, 1], seed=2)
        assert any(
            not np.array_equal(wa, wb) for wa, wb in zip(a.parameters(), b.parameters())
        )

    def test_weight_bounds(self):
        omega0 = 30.0
        net = init_weights([4, 128, 128, 1], omega0=omega0, seed=3)
        assert np.all(np.abs(net.weights[0]) <= 1.0 / 4)
        for k in range(1, len(net.weights)):
            fan_in = net.layer_sizes[k]
            bound = np.sqrt(6.0 / fan_in) / omega0
            assert np.all(np.abs(net.weights[k]) <= bound)
        total = sum(w.size for w in net.weights)
        assert total > 10_000  # the bound check covers a large sample


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        net = small_net(30, out_scale=3.5)
        path = tmp_path / "w.json"
        save_weights(net, path)
        loaded = load_weights(path)
        rng = np.random.default_rng(30)
        for _ in range(100):
            x = rng.uniform(-2, 4, 2)
            t = float(rng.uniform(0, 4))
            assert forward(net, x, t) == forward(loaded, x, t)

    def test_version_mismatch(self, tmp_path):
        import json

        net = small_net(31)
        path = tmp_path / "w.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["schema_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightVersionError, match="version mismatch"):
            load_weights(path)

    def test_truncated_payload(self, tmp_path):
        import json

        net = small_net(32)
        path = tmp_path / "w.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["weights"][0] = doc["weights"][0][:-16]
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightFileTruncatedError, match="truncated"):
            load_weights(path)

    def test_shape_inconsistency(self, tmp_path):
        import json

        net = small_net(33)
        path = tmp_path / "w.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["weights"] = doc["weights"][:-1]
        doc["biases"] = doc["biases"][:-1]
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightShapeError, match="shape"):
            load_weights(path)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "w.json"
        path.write_text("{not json")
        with pytest.raises(WeightFileTruncatedError):
            load_weights(path)
