import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotsbench import nn
from lotsbench.nn import Conv2D, Dense, Network, Pool2D, ReLU

from helpers import central_differences, max_rel_err, small_net


class TestLayers:
    def test_identity_dense(self):
        net = Network([Dense(4, 4, weight=np.eye(4))], 4, (2, 2, 1), pixel_scale=1.0)
        x = np.arange(4.0).reshape(2, 2, 1)
        np.testing.assert_array_equal(net.logits(x), [0, 1, 2, 3])

    def test_hand_computed_two_layer(self):
        w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
        w2 = np.array([[1.0, 0.0, 2.0], [3.0, -1.0, 1.0]])
        net = Network([Dense(2, 2, w1, np.array([0.0, -1.0])), ReLU(), Dense(2, 3, w2, np.array([0.5, 0, 0]))],
                      3, (1, 2, 1), pixel_scale=1.0)
        x = np.array([1.0, 2.0]).reshape(1, 2, 1)
        # hidden = relu([1 + 4, -1 + 1 - 1]) = [5, 0]
        np.testing.assert_allclose(net.logits(x), [5.5, 0.0, 10.0])
        # d(logits[2])/dx = w1[:, 0] * w2[0, 2] since unit 2 is inactive
        g = nn.input_gradient(net, x, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(g.ravel(), [2.0, 4.0])

    def test_conv_matches_direct_loop(self, rng):
        conv = Conv2D(2, 3, 3, "same", weight=rng.normal(size=(3, 3, 2, 3)), bias=rng.normal(size=3))
        x = rng.normal(size=(1, 5, 4, 2))
        out, _ = conv.forward(x)
        padded = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((5, 4, 3))
        for i in range(5):
            for j in range(4):
                patch = padded[i:i + 3, j:j + 3, :]
                ref[i, j] = np.tensordot(patch, conv.weight, axes=3) + conv.bias
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_valid_conv_shape(self):
        conv = Conv2D(1, 2, 3, "valid")
        assert conv.output_shape((6, 5, 1)) == (4, 3, 2)

    @pytest.mark.parametrize("mode", ["max", "avg"])
    def test_pool_forward(self, mode):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        out, _ = Pool2D(2, mode).forward(x)
        expected = [[5, 7], [13, 15]] if mode == "max" else [[2.5, 4.5], [10.5, 12.5]]
        np.testing.assert_array_equal(out[0, ..., 0], expected)

    def test_last_layer_must_be_dense(self):
        with pytest.raises(ValueError, match="last layer"):
            Network([Dense(4, 2), ReLU()], 2, (2, 2, 1))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="layer 0"):
            Network([Dense(5, 2)], 2, (2, 2, 1))

    def test_wrong_image_shape(self):
        net = small_net()
        with pytest.raises(ValueError, match="does not match"):
            net.logits(np.zeros((9, 9, 1)))


class TestGradients:
    @pytest.mark.parametrize("pooling", ["avg", "max"])
    def test_input_gradient_matches_finite_differences(self, pooling):
        r = np.random.default_rng(5)
        net = small_net(seed=3, pooling=pooling)
        image = r.integers(0, 256, size=(8, 8, 1)).astype(float)
        g = r.normal(size=4)
        analytic = nn.input_gradient(net, image, g)
        numeric, smooth = central_differences(net, image, lambda z: g @ z)
        assert smooth.sum() >= 16
        assert max_rel_err(analytic, numeric, smooth) < 1e-4

    def test_fine_step_agrees_everywhere(self):
        # a step far below any kink distance checks every pixel, kinks included
        r = np.random.default_rng(5)
        net = small_net(seed=3)
        image = r.integers(0, 256, size=(8, 8, 1)).astype(float)
        g = r.normal(size=4)
        numeric, _ = central_differences(net, image, lambda z: g @ z, h=1e-5)
        assert max_rel_err(nn.input_gradient(net, image, g), numeric) < 1e-4

    def test_batched_equals_single(self, rng):
        net = small_net()
        batch = rng.integers(0, 256, size=(3, 8, 8, 1))
        np.testing.assert_allclose(net.logits(batch), np.stack([net.logits(b) for b in batch]), atol=1e-12)

    def test_param_gradient_matches_finite_differences(self, rng):
        net = small_net(seed=2)
        x = rng.integers(0, 256, size=(2, 8, 8, 1))
        g = rng.normal(size=(2, 4))
        fp = net.forward(x)
        _, pgrads = net.backward(fp, g, with_params=True)
        layer = net.layers[0]
        w = layer.weight
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 0, 1), (2, 1, 0, 0)]:
            w[idx] += h
            fp_ = np.sum(g * net.logits(x))
            w[idx] -= 2 * h
            fm_ = np.sum(g * net.logits(x))
            w[idx] += h
            np.testing.assert_allclose(pgrads[0]["weight"][idx], (fp_ - fm_) / (2 * h), rtol=1e-5, atol=1e-8)


class TestSoftmax:
    def test_stable_for_large_logits(self):
        p = nn.softmax_probs(np.array([1000.0, 0.0, -1000.0]))
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            nn.softmax_probs(np.array([np.nan, 1.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=12))
    def test_sums_to_one(self, z):
        p = nn.softmax_probs(np.array(z))
        assert abs(p.sum() - 1) < 1e-12
        assert np.all(p >= 0)


def blobs(rng, n=400):
    centers = np.array([[40, 40], [200, 60], [120, 210]])
    labels = rng.integers(0, 3, n)
    pts = centers[labels] + rng.normal(0, 12, size=(n, 2))
    return np.clip(pts, 0, 255).reshape(n, 1, 2, 1), labels


class TestTraining:
    def test_separable_blobs(self, rng):
        x, y = blobs(rng)
        net = Network([Dense(2, 8, weight=rng.normal(0, 1, (2, 8))), ReLU(), Dense(8, 3, weight=rng.normal(0, 0.3, (8, 3)))],
                      3, (1, 2, 1))
        trained = nn.train(net, x, y, nn.TrainConfig(epochs=60, batch_size=32, learning_rate=0.05, seed=0))
        xt, yt = blobs(np.random.default_rng(99), 300)
        assert nn.accuracy(trained, xt, yt) >= 0.99

    def test_zero_epochs_returns_copy(self, rng):
        net = small_net()
        x = rng.integers(0, 256, size=(4, 8, 8, 1))
        out = nn.train(net, x, np.array([0, 1, 2, 3]), nn.TrainConfig(epochs=0))
        assert out is not net
        np.testing.assert_array_equal(out.logits(x), net.logits(x))

    def test_bad_labels(self):
        with pytest.raises(ValueError, match="labels"):
            nn.train(small_net(), np.zeros((2, 8, 8, 1)), np.array([0, 7]))

    def test_deterministic(self, rng):
        x = rng.integers(0, 256, size=(32, 8, 8, 1))
        y = rng.integers(0, 4, 32)
        cfg = nn.TrainConfig(epochs=2, batch_size=8, seed=4)
        a = nn.train(small_net(), x, y, cfg)
        b = nn.train(small_net(), x, y, cfg)
        np.testing.assert_array_equal(a.logits(x), b.logits(x))


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        net = small_net(seed=7, pooling="max")
        net.meta["note"] = "x"
        path = tmp_path / "m.bin"
        nn.save_model(net, path)
        back = nn.load_model(path)
        x = rng.integers(0, 256, size=(3, 8, 8, 1))
        np.testing.assert_array_equal(back.logits(x), net.logits(x))
        assert back.meta == {"note": "x"}
        assert [l.describe() for l in back.layers] == [l.describe() for l in net.layers]

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.bin"
        nn.save_model(small_net(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-20])
        with pytest.raises(nn.ModelFormatError):
            nn.load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOTAMODEL" + bytes(40))
        with pytest.raises(nn.ModelFormatError, match="magic"):
            nn.load_model(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "m.bin"
        nn.save_model(small_net(), path)
        raw = bytearray(path.read_bytes())
        raw[8] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(nn.ModelFormatError, match="version"):
            nn.load_model(path)
