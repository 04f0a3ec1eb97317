import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a3dfdg.errors import FormatError
from a3dfdg.segmodel import (
    HIDDEN,
    SegModel,
    _conv,
    _logits,
    dice_ce_loss,
    forward,
    init_model,
    load_model,
    loss_and_grad,
    model_from_bytes,
    model_size_bytes,
    model_to_bytes,
    n_params,
    predict,
    save_model,
    sgd_step,
    zeros_model,
)

from oracles import central_difference

C = 6


def direct_conv(x, w):
    """Zero-padded 3x3x3 correlation written as an explicit sum over taps."""
    B, H, W, D, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, D, w.shape[-1]))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                patch = xp[:, i:i + H, j:j + W, k:k + D, :]
                out += np.einsum("bhwdc,co->bhwdo", patch, w[i, j, k])
    return out


def random_batch(rng, shape=(2, 6, 6, 6), n_classes=C):
    x = rng.uniform(-300, 400, size=shape)
    labels = rng.integers(0, n_classes, size=shape)
    return x, labels


def relu_pattern(m, x):
    _, cache = _logits(m, x)
    return cache.z1 > 0, cache.z2 > 0


def fd_relative_errors(m64, x, labels, rng, n=50, h=1e-3):
    """Relative error of analytic vs central-difference gradient at ``n`` random coordinates.

    A coordinate whose +-h perturbation flips any ReLU is redrawn: the loss is
    not differentiable across that kink, so the difference quotient there
    does not estimate the gradient.
    """
    _, grad = loss_and_grad(m64, x, labels)
    base = relu_pattern(m64, x)

    def loss_at(params):
        return loss_and_grad(SegModel(params, m64.n_classes), x, labels)[0].total

    out = []
    for idx in rng.permutation(m64.params.size):
        crossed = False
        for sign in (1, -1):
            p = m64.params.copy()
            p[idx] += sign * h
            pattern = relu_pattern(SegModel(p, m64.n_classes), x)
            crossed |= any(not np.array_equal(a, b) for a, b in zip(pattern, base))
        if crossed:
            continue
        fd = central_difference(loss_at, m64.params, idx, h)
        out.append(abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8))
        if len(out) == n:
            break
    return out


class TestArchitecture:
    def test_param_count(self):
        assert n_params(6) == 2014
        for c in range(2, 10):
            assert n_params(c) == 1960 + 9 * c

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            SegModel(np.zeros(10, dtype=np.float32), 6)
        with pytest.raises(ValueError):
            zeros_model(1)

    def test_init_is_seeded_he(self):
        a, b = init_model(C, 3), init_model(C, 3)
        np.testing.assert_array_equal(a.params, b.params)
        assert not np.array_equal(a.params, init_model(C, 4).params)
        p = init_model(C, 0).unpack()
        assert np.all(p["b1"] == 0) and np.all(p["b2"] == 0) and np.all(p["b3"] == 0)
        assert p["w2"].std() == pytest.approx(math.sqrt(2 / (27 * HIDDEN)), rel=0.1)


class TestForward:
    def test_zero_params_uniform(self, rng):
        probs = forward(zeros_model(C), rng.normal(size=(1, 5, 5, 5)))
        np.testing.assert_allclose(probs, 1.0 / C)

    def test_shape_and_normalisation(self, rng):
        probs = forward(init_model(C, 1), rng.normal(0, 200, size=(2, 7, 6, 5)))
        assert probs.shape == (2, C, 7, 6, 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            forward(zeros_model(C), np.zeros((4, 4, 4)))

    def test_fast_conv_matches_direct_sum(self, rng):
        for cin in (1, HIDDEN):
            x = rng.normal(size=(2, 9, 7, 8, cin))
            w = rng.normal(size=(3, 3, 3, cin, HIDDEN))
            np.testing.assert_allclose(_conv(x, w), direct_conv(x, w), atol=1e-9)

    def test_translation_equivariance(self, rng):
        m = init_model(C, 2)
        x = rng.normal(0, 200, size=(1, 12, 12, 12))
        shifted = np.roll(x, 1, axis=1)
        a = forward(m, x)[0]
        b = forward(m, shifted)[0]
        # two 3x3x3 layers see two voxels in each direction
        np.testing.assert_allclose(b[:, 3:-3, 2:-2, 2:-2], a[:, 2:-4, 2:-2, 2:-2], atol=1e-5)

    def test_predict_ties_go_to_lowest_class(self):
        assert np.all(predict(zeros_model(C), np.zeros((1, 3, 3, 3))) == 0)


class TestLoss:
    def test_perfect_prediction_dice_zero(self, rng):
        labels = rng.integers(0, C, size=(2, 4, 4, 4))
        labels.flat[:C] = np.arange(C)
        onehot = np.eye(C)[labels]
        dice, _, _ = dice_ce_loss(onehot, labels, C)
        assert dice == pytest.approx(0.0, abs=1e-3)

    def test_uniform_two_class_ce_is_ln2(self):
        labels = np.zeros((1, 4, 4, 4), dtype=int)
        labels[..., :2] = 1
        loss, _ = loss_and_grad(zeros_model(2), np.zeros(labels.shape), labels)
        assert loss.ce_term == pytest.approx(math.log(2), abs=1e-4)
        assert loss.total == pytest.approx(loss.dice_term + loss.ce_term)

    def test_all_background_is_finite(self):
        labels = np.zeros((1, 4, 4, 4), dtype=int)
        loss, grad = loss_and_grad(zeros_model(C), np.zeros(labels.shape), labels)
        assert np.isfinite([loss.total, loss.dice_term, loss.ce_term]).all()
        assert np.isfinite(grad).all()

    def test_label_validation(self):
        with pytest.raises(ValueError):
            loss_and_grad(zeros_model(C), np.zeros((1, 3, 3, 3)), np.full((1, 3, 3, 3), C))
        with pytest.raises(ValueError):
            loss_and_grad(zeros_model(C), np.zeros((1, 3, 3, 3)), np.zeros((1, 3, 3, 2), dtype=int))

    def test_gradient_matches_finite_differences(self, rng):
        m = init_model(C, 11).astype(np.float64)
        x, labels = random_batch(rng)
        errors = fd_relative_errors(m, x, labels, rng)
        assert len(errors) == 50
        assert max(errors) <= 1e-2

    def test_gradient_dtype_follows_params(self, rng):
        x, labels = random_batch(rng)
        _, g32 = loss_and_grad(init_model(C, 0), x, labels)
        _, g64 = loss_and_grad(init_model(C, 0).astype(np.float64), x, labels)
        assert g32.dtype == np.float32 and g64.dtype == np.float64
        np.testing.assert_allclose(g32, g64, rtol=1e-3, atol=1e-5)

    def test_small_step_decreases_loss(self, rng):
        failures = 0
        for trial in range(20):
            m = init_model(C, trial).astype(np.float64)
            x, labels = random_batch(rng, shape=(1, 8, 8, 8))
            loss, grad = loss_and_grad(m, x, labels)
            decreased = False
            for lr in (1e-4, 1e-5, 1e-6):
                if loss_and_grad(sgd_step(m, grad, lr), x, labels)[0].total < loss.total:
                    decreased = True
                    break
            failures += not decreased
        assert failures <= 1


class TestSGD:
    def test_arithmetic(self):
        m = SegModel(np.ones(n_params(2), dtype=np.float32), 2)
        g = np.zeros_like(m.params)
        g[:2] = [2.0, -2.0]
        out = sgd_step(m, g, 0.5)
        np.testing.assert_array_equal(out.params[:2], [0.0, 2.0])
        np.testing.assert_array_equal(out.params[2:], 1.0)

    def test_noop_cases(self, rng):
        m = init_model(C, 0)
        np.testing.assert_array_equal(sgd_step(m, rng.normal(size=m.params.size), 0.0).params, m.params)
        np.testing.assert_array_equal(sgd_step(m, np.zeros(m.params.size), 0.1).params, m.params)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(zeros_model(C), np.zeros(3), 0.1)

    def test_training_is_deterministic(self, rng):
        x, labels = random_batch(rng)

        def train():
            m = init_model(C, 5)
            for _ in range(3):
                m = sgd_step(m, loss_and_grad(m, x, labels)[1], 0.1)
            return m.params

        np.testing.assert_array_equal(train(), train())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(C, 9)
        save_model(tmp_path / "m.a3dm", m)
        back = load_model(tmp_path / "m.a3dm")
        np.testing.assert_array_equal(back.params, m.params)
        assert back.n_classes == C
        assert model_size_bytes(m) == (tmp_path / "m.a3dm").stat().st_size == 20 + 4 * 2014

    def test_header(self):
        buf = model_to_bytes(zeros_model(C))
        assert buf[:4] == b"A3DM"
        assert int.from_bytes(buf[8:12], "little") == C
        assert int.from_bytes(buf[12:20], "little") == 2014

    @pytest.mark.parametrize("mutate", [
        lambda b: b[:12],
        lambda b: b[:-4],
        lambda b: b"A3DX" + b[4:],
        lambda b: b[:8] + (7).to_bytes(4, "little") + b[12:],
    ])
    def test_corrupt(self, mutate):
        with pytest.raises(FormatError):
            model_from_bytes(mutate(model_to_bytes(zeros_model(C))))

    @settings(max_examples=20)
    @given(st.integers(2, 9), st.integers(0, 1000))
    def test_round_trip_any_class_count(self, c, seed):
        m = init_model(c, seed)
        back = model_from_bytes(model_to_bytes(m))
        np.testing.assert_array_equal(back.params, m.params)
