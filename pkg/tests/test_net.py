import math

import numpy as np
import pytest

from nesyevo.net import (
    AdamState,
    DecoderNet,
    EncoderArch,
    EncoderNet,
    TrainingDiverged,
    adam_step,
    encode_sequence,
    gumbel_softmax,
    gumbel_softmax_backward,
    gumbel_softmax_forward,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    xavier_init,
)

SMALL = EncoderArch(conv_channels=(2, 3), fc_dims=(12, 8))


class TestXavier:
    def test_same_seed_same_parameters(self):
        a = EncoderNet(SMALL, seed=5)
        b = EncoderNet(SMALL, seed=5)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_different_seeds_differ(self):
        a = EncoderNet(SMALL, seed=5)
        b = EncoderNet(SMALL, seed=6)
        assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)

    def test_dense_bound(self):
        # 400 -> 120 layer of the reference arch: b = sqrt(6/520).
        params = xavier_init(EncoderArch().param_shapes(), seed=0)
        bound = math.sqrt(6.0 / (400 + 120))
        assert bound == pytest.approx(0.10742, abs=5e-5)
        w = params["fc1_w"]
        assert w.min() >= -bound and w.max() <= bound
        assert np.abs(w).max() > 0.9 * bound  # actually spans the range

    def test_biases_zero(self):
        params = xavier_init(SMALL.param_shapes(), seed=1)
        for name, p in params.items():
            if name.endswith("_b"):
                assert np.all(p == 0.0)

    def test_parameter_count_fixed_across_inits(self):
        counts = {EncoderNet(SMALL, seed=s).n_params for s in range(5)}
        assert len(counts) == 1

    def test_reference_arch_dimensions(self):
        arch = EncoderArch()
        assert arch.flat_dim == 400
        assert arch.param_shapes()["fc1_w"] == (400, 120)
        assert arch.param_shapes()["fc2_w"] == (120, 84)
        assert arch.param_shapes()["out_w"] == (84, 2)


class TestForward:
    def test_output_is_probability_pair(self, rng):
        net = EncoderNet(SMALL, seed=0)
        probs, _ = net.forward(rng.random((7, 28, 28)))
        assert probs.shape == (7, 2)
        assert np.all(probs > 0) and np.all(probs < 1)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_duplicate_images_share_output(self, rng):
        net = EncoderNet(SMALL, seed=0)
        image = rng.random((28, 28))
        p = encode_sequence(net, np.stack([image, image, image]))
        assert p[0] == p[1] == p[2]

    def test_fresh_nets_center_near_half(self, rng):
        # Sampling oracle: mean of p over fresh nets and random inputs.
        values = []
        for seed in range(20):
            net = EncoderNet(SMALL, seed=seed)
            values.extend(net.prob_positive(rng.random((50, 28, 28))))
        assert 0.3 <= float(np.mean(values)) <= 0.7

    def test_deterministic(self, rng):
        net = EncoderNet(SMALL, seed=3)
        images = rng.random((4, 28, 28))
        a, _ = net.forward(images)
        b, _ = net.forward(images)
        assert np.array_equal(a, b)


class TestBackward:
    def test_zero_upstream_zero_gradients(self, rng):
        net = EncoderNet(SMALL, seed=0)
        _, cache = net.forward(rng.random((3, 28, 28)))
        grads = net.backward(cache, np.zeros((3, 2)))
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_gradients_match_finite_differences(self, rng):
        # Scalar loss sum(probs[:, 0]); h = 1e-4, rel err <= 1e-3.
        net = EncoderNet(SMALL, seed=1)
        images = rng.random((2, 28, 28))
        probs, cache = net.forward(images)
        upstream = np.zeros_like(probs)
        upstream[:, 0] = 1.0
        grads = net.backward(cache, upstream)
        h = 1e-4
        checked = 0
        rng2 = np.random.default_rng(7)
        names = list(net.params)
        while checked < 20:
            name = names[rng2.integers(len(names))]
            flat_index = int(rng2.integers(net.params[name].size))
            idx = np.unravel_index(flat_index, net.params[name].shape)
            original = net.params[name][idx]
            net.params[name][idx] = original + h
            up = net.prob_positive(images).sum()
            net.params[name][idx] = original - h
            down = net.prob_positive(images).sum()
            net.params[name][idx] = original
            fd = (up - down) / (2 * h)
            got = grads[name][idx]
            scale = max(abs(fd), abs(got), 1e-6)
            assert abs(fd - got) / scale <= 1e-3, (name, idx)
            checked += 1

    def test_accumulation_is_linear(self, rng):
        net = EncoderNet(SMALL, seed=2)
        image = rng.random((28, 28))
        images = np.stack([image, image])
        _, cache = net.forward(images)
        up = np.array([[0.7, 0.0], [0.4, 0.0]])
        combined = net.backward(cache, up)
        _, cache1 = net.forward(images[:1])
        g1 = net.backward(cache1, up[:1])
        _, cache2 = net.forward(images[1:])
        g2 = net.backward(cache2, up[1:])
        for name in combined:
            assert np.allclose(combined[name], g1[name] + g2[name])


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        net = EncoderNet(SMALL, seed=0)
        before = {k: v.copy() for k, v in net.params.items()}
        state = AdamState()
        grads = {k: np.zeros_like(v) for k, v in net.params.items()}
        for _ in range(3):
            adam_step(net.params, grads, state)
        for name in before:
            assert np.array_equal(net.params[name], before[name])
        assert state.step == 3

    def test_first_step_magnitude(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.array([0.3, -5.0])}, state)
        moved = params["w"] - np.array([1.0, -2.0])
        # First bias-corrected step is about -lr * sign(g).
        assert np.all(np.sign(moved) == np.array([-1.0, 1.0]))
        assert np.all(np.abs(moved) <= state.lr * 1.001)
        assert np.all(np.abs(moved) >= state.lr * 0.99)

    def test_constant_gradient_moves_monotonically(self):
        # Scalar simulation oracle: the iterate should descend steadily.
        params = {"w": np.array([0.5])}
        state = AdamState()
        previous = params["w"][0]
        for _ in range(50):
            adam_step(params, {"w": np.array([2.0])}, state)
            assert params["w"][0] < previous
            previous = params["w"][0]

    def test_nonfinite_gradient_raises(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(TrainingDiverged):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState())


class TestGumbel:
    def test_high_temperature_flattens(self):
        logits = np.zeros((200, 2))
        out = gumbel_softmax(logits, temperature=1e4, seed=0)
        assert np.allclose(out, 0.5, atol=0.05)

    def test_deterministic_for_seed(self):
        logits = np.array([[0.3, -0.1]])
        assert np.array_equal(
            gumbel_softmax(logits, 1.0, seed=9), gumbel_softmax(logits, 1.0, seed=9)
        )

    def test_argmax_frequency_matches_probabilities(self):
        # Gumbel-max oracle: argmax of log p + g has distribution p.
        logits = np.log(np.array([0.8, 0.2]))
        samples = gumbel_softmax(np.tile(logits, (10000, 1)), 0.1, seed=11)
        frequency = float((samples[:, 0] > samples[:, 1]).mean())
        assert abs(frequency - 0.8) <= 0.02

    def test_rows_sum_to_one(self):
        out = gumbel_softmax(np.array([[1.0, 2.0], [0.0, 0.0]]), 0.7, seed=3)
        assert np.allclose(out.sum(axis=1), 1.0)

    def test_backward_matches_finite_differences(self):
        logits = np.array([[0.4, -0.3]])
        rng_fixed = np.random.default_rng(5)
        u = rng_fixed.random((1, 2))

        class FrozenRng:
            def random(self, shape):
                return u

        y, cache = gumbel_softmax_forward(logits, 0.8, FrozenRng())
        dy = np.array([[1.0, -0.5]])
        grad = gumbel_softmax_backward(cache, dy)
        h = 1e-6
        for j in range(2):
            bumped = logits.copy()
            bumped[0, j] += h
            y_up, _ = gumbel_softmax_forward(bumped, 0.8, FrozenRng())
            bumped[0, j] -= 2 * h
            y_down, _ = gumbel_softmax_forward(bumped, 0.8, FrozenRng())
            fd = ((y_up - y_down) / (2 * h) * dy).sum()
            assert grad[0, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestDecoder:
    def test_output_shape(self, rng):
        decoder = DecoderNet(SMALL, seed=0)
        recon, _ = decoder.forward(rng.random((3, 2)))
        assert recon.shape == (3, 28, 28)
        assert np.all((recon > 0) & (recon < 1))

    def test_perfect_reconstruction_zero_loss(self, rng):
        images = rng.random((2, 28, 28))
        loss, drecon = reconstruction_loss(images.copy(), images)
        assert np.allclose(loss, 0.0)
        assert np.allclose(drecon, 0.0)

    def test_all_zero_reconstruction_mse(self, rng):
        images = rng.random((2, 28, 28))
        loss, _ = reconstruction_loss(np.zeros_like(images), images)
        assert np.allclose(loss, (images**2).mean(axis=(1, 2)))

    def test_gradients_match_finite_differences(self, rng):
        decoder = DecoderNet(SMALL, seed=4)
        code = rng.random((2, 2))
        images = rng.random((2, 28, 28))

        def total_loss():
            recon, _ = decoder.forward(code)
            return reconstruction_loss(recon, images)[0].sum()

        recon, cache = decoder.forward(code)
        _, drecon = reconstruction_loss(recon, images)
        dcode, grads = decoder.backward(cache, drecon)
        h = 1e-5
        rng2 = np.random.default_rng(3)
        names = list(decoder.params)
        for _ in range(12):
            name = names[rng2.integers(len(names))]
            idx = np.unravel_index(
                int(rng2.integers(decoder.params[name].size)),
                decoder.params[name].shape,
            )
            original = decoder.params[name][idx]
            decoder.params[name][idx] = original + h
            up = total_loss()
            decoder.params[name][idx] = original - h
            down = total_loss()
            decoder.params[name][idx] = original
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(grads[name][idx]), 1e-8)
            assert abs(fd - grads[name][idx]) / scale <= 1e-3, name
        # Gradient w.r.t. the code feeds the encoder chain.
        for j in range(2):
            bumped = code.copy()
            bumped[0, j] += h
            recon_up, _ = decoder.forward(bumped)
            up = reconstruction_loss(recon_up, images)[0].sum()
            bumped[0, j] -= 2 * h
            recon_down, _ = decoder.forward(bumped)
            down = reconstruction_loss(recon_down, images)[0].sum()
            fd = (up - down) / (2 * h)
            assert dcode[0, j] == pytest.approx(fd, rel=1e-3, abs=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = EncoderNet(SMALL, seed=8)
        path = tmp_path / "net.bin"
        save_checkpoint(path, net.params, net.arch.describe())
        loaded = load_checkpoint(path, SMALL.param_shapes(), SMALL.describe())
        for name in net.params:
            assert np.allclose(loaded[name], net.params[name], atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.bin"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path, SMALL.param_shapes(), SMALL.describe())

    def test_architecture_mismatch_rejected(self, tmp_path):
        net = EncoderNet(SMALL, seed=8)
        path = tmp_path / "net.bin"
        save_checkpoint(path, net.params, net.arch.describe())
        other = EncoderArch(conv_channels=(4, 6), fc_dims=(12, 8))
        with pytest.raises(ValueError, match="architecture"):
            load_checkpoint(path, other.param_shapes(), other.describe())
