import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avtrait import optim as O
from oracles import adam_scalar_reference


class TestMaeLoss:
    def test_perfect_prediction(self):
        p = np.array([[0.1, 0.9]], dtype=np.float32)
        loss, grad = O.mae_loss(p, p.copy())
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(p))

    def test_hand_computed_value(self):
        pred = np.full((1, 5), 0.5, dtype=np.float64)
        target = np.array([[0.2, 0.4, 0.6, 0.8, 1.0]])
        loss, grad = O.mae_loss(pred, target)
        # |diffs| = .3 .1 .1 .3 .5 -> mean 0.26
        assert loss == pytest.approx(0.26, abs=1e-12)
        np.testing.assert_allclose(grad, np.array([[1, 1, -1, -1, -1]]) / 5.0)

    def test_symmetry(self):
        rng = np.random.Generator(np.random.PCG64(0))
        a = rng.random((3, 5))
        b = rng.random((3, 5))
        assert O.mae_loss(a, b)[0] == O.mae_loss(b, a)[0]

    def test_sign_zero_convention(self):
        pred = np.array([[0.5, 0.7]])
        target = np.array([[0.5, 0.2]])
        _, grad = O.mae_loss(pred, target)
        assert grad[0, 0] == 0.0 and grad[0, 1] == pytest.approx(0.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(O.ShapeMismatchError):
            O.mae_loss(np.zeros((2, 5)), np.zeros((2, 4)))

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            O.mae_loss(np.array([[np.nan]]), np.array([[0.0]]))

    def test_gradient_is_exact_subgradient(self):
        rng = np.random.Generator(np.random.PCG64(1))
        pred = rng.random((4, 5))
        target = rng.random((4, 5))
        _, grad = O.mae_loss(pred, target)
        np.testing.assert_array_equal(grad, np.sign(pred - target) / pred.size)


class TestLrSchedule:
    def test_paper_constants(self):
        s = O.LrSchedule()
        assert s.alpha_for_epoch(0) == pytest.approx(2e-4)
        assert s.alpha_for_epoch(300) == pytest.approx(2e-5)
        assert s.alpha_for_epoch(600) == pytest.approx(2e-6)
        assert s.alpha_for_epoch(899) == pytest.approx(2e-6)

    def test_constant_within_period(self):
        s = O.LrSchedule()
        for k in range(3):
            vals = {s.alpha_for_epoch(e) for e in (300 * k, 300 * k + 150, 300 * k + 299)}
            assert len(vals) == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 5000), st.integers(0, 5000))
    def test_non_increasing(self, e1, e2):
        s = O.LrSchedule()
        lo, hi = sorted((e1, e2))
        assert s.alpha_for_epoch(hi) <= s.alpha_for_epoch(lo)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            O.LrSchedule().alpha_for_epoch(-1)


def one_param(value, dtype=np.float64):
    return {"w": np.array(value, dtype=dtype)}


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = one_param([1.0, -2.0])
        state = O.init_adam(params, ["w"])
        O.adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_moves_by_signed_alpha(self):
        params = one_param([1.0, 1.0, 1.0])
        state = O.init_adam(params, ["w"], alpha=2e-4)
        g = np.array([0.3, -0.7, 2.0])
        O.adam_step(params, {"w": g}, state)
        # at t=1 the update is alpha * g / (|g| + eps') = alpha * sign(g)
        np.testing.assert_allclose(params["w"], 1.0 - 2e-4 * np.sign(g), rtol=1e-6)

    def test_100_steps_match_scalar_oracle(self):
        # quadratic f(theta) = theta^2, gradient 2 theta
        params = one_param([1.0])
        state = O.init_adam(params, ["w"], alpha=2e-4, beta1=0.5, beta2=0.999, epsilon=1e-8)
        trace = []
        for _ in range(100):
            g = 2.0 * params["w"]
            O.adam_step(params, {"w": g}, state)
            trace.append(float(params["w"][0]))
        _, ref_trace = adam_scalar_reference(lambda th: 2.0 * th, 1.0, 100, 2e-4, 0.5, 0.999, 1e-8)
        np.testing.assert_allclose(trace, ref_trace, atol=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.Generator(np.random.PCG64(2))
        w = rng.standard_normal(16)
        g = rng.standard_normal(16)
        perm = rng.permutation(16)

        p1 = one_param(w.copy())
        s1 = O.init_adam(p1, ["w"])
        O.adam_step(p1, {"w": g}, s1)

        p2 = one_param(w[perm].copy())
        s2 = O.init_adam(p2, ["w"])
        O.adam_step(p2, {"w": g[perm]}, s2)
        np.testing.assert_array_equal(p1["w"][perm], p2["w"])

    def test_update_magnitude_bounded(self):
        rng = np.random.Generator(np.random.PCG64(3))
        params = one_param(rng.standard_normal(32))
        state = O.init_adam(params, ["w"], alpha=1e-3)
        bound = O.update_bound(state) * (1 + 1e-9)
        prev = params["w"].copy()
        for step in range(200):
            g = rng.standard_normal(32) * 10.0 ** rng.integers(-6, 3)
            O.adam_step(params, {"w": g}, state)
            assert float(np.max(np.abs(params["w"] - prev))) <= bound
            prev = params["w"].copy()

    def test_non_finite_gradient_names_parameter(self):
        params = one_param([1.0])
        state = O.init_adam(params, ["w"])
        with pytest.raises(O.NonFiniteGradientError, match="'w'"):
            O.adam_step(params, {"w": np.array([np.inf])}, state)

    def test_missing_gradient_rejected(self):
        params = {"w": np.ones(2), "b": np.ones(1)}
        state = O.init_adam(params, ["w", "b"])
        with pytest.raises(KeyError, match="'b'"):
            O.adam_step(params, {"w": np.zeros(2)}, state)

    def test_deterministic(self):
        def run():
            params = one_param([0.5, -0.5])
            state = O.init_adam(params, ["w"], alpha=1e-3)
            for t in range(10):
                O.adam_step(params, {"w": np.array([0.1 * t, -0.2])}, state)
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_moments_mirror_parameter_shapes(self):
        params = {"a": np.zeros((3, 4)), "b": np.zeros(7)}
        state = O.init_adam(params, ["a", "b"])
        assert state.m["a"].shape == (3, 4) and state.v["b"].shape == (7,)
        assert state.t == 0


class TestUpdateBound:
    def test_paper_betas_value(self):
        state = O.AdamState(alpha=2e-4, beta1=0.5, beta2=0.999)
        assert O.update_bound(state) == pytest.approx(2e-4 * math.sqrt(500.0))
