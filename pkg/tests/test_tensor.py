import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from avtrait import tensor as T
from oracles import matmul_loops


class TestElementwise:
    def test_add(self):
        out = T.add(T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out, [4.0, 6.0])

    def test_max0_is_relu(self):
        out = T.max0(T.tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_tanh_at_origin(self):
        assert T.tanh(T.tensor([0.0]))[0] == 0.0

    def test_dispatch_matches_named(self):
        a = T.tensor([1.0, -2.0, 3.0])
        b = T.tensor([0.5, 0.5, -1.0])
        np.testing.assert_array_equal(T.elementwise("sub", a, b), T.sub(a, b))
        np.testing.assert_array_equal(T.elementwise("mul", a, b), T.mul(a, b))
        np.testing.assert_array_equal(T.elementwise("max0", a), T.max0(a))

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            T.elementwise("div", T.tensor([1.0]), T.tensor([1.0]))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(T.ShapeMismatchError) as exc:
            T.add(T.tensor([[1.0, 2.0]]), T.tensor([1.0, 2.0, 3.0]))
        assert "(1, 2)" in str(exc.value) and "(3,)" in str(exc.value)

    def test_no_implicit_broadcasting(self):
        with pytest.raises(T.ShapeMismatchError):
            T.mul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((3,))))

    def test_scalar_broadcast_allowed(self):
        out = T.mul(T.tensor([1.0, 2.0]), 2.0)
        np.testing.assert_array_equal(out, [2.0, 4.0])

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=5), elements=st.floats(-100, 100, width=32)))
    def test_add_commutes_and_sub_self_is_zero(self, a):
        b = np.full_like(a, 3.0)
        np.testing.assert_array_equal(T.add(a, b), T.add(b, a))
        np.testing.assert_array_equal(T.sub(a, a), np.zeros_like(a))


class TestReduceMean:
    def test_row_means(self):
        out = T.reduce_mean(T.tensor([[1.0, 3.0], [5.0, 7.0]]), {1})
        np.testing.assert_array_equal(out, [2.0, 6.0])

    def test_constant_mean_is_constant(self):
        c = T.tensor(np.full((3, 4), 2.5))
        np.testing.assert_allclose(T.reduce_mean(c, {0, 1}), 2.5)

    def test_ramp_mean(self):
        # 4x4 ramp 0..15 sums to 120, so the mean over everything is 7.5
        ramp = T.tensor(np.arange(16, dtype=np.float32).reshape(4, 4))
        assert T.reduce_mean(ramp, {0, 1}) == pytest.approx(7.5)

    def test_empty_axes_is_identity_copy(self):
        a = T.tensor([[1.0, 2.0]])
        out = T.reduce_mean(a, set())
        np.testing.assert_array_equal(out, a)
        assert out is not a

    def test_bad_axis_rejected(self):
        with pytest.raises(ValueError, match="axis"):
            T.reduce_mean(T.tensor([1.0, 2.0]), {3})

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(-50, 50),
        hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
    )
    def test_constant_tensor_mean_within_accumulation_error(self, c, shape):
        a = np.full(shape, c, dtype=np.float32)
        out = T.reduce_mean(a, set(range(len(shape))))
        ulp = np.spacing(np.float32(abs(c))) if c != 0 else np.float32(1e-30)
        bound = float(ulp) * max(1.0, np.log2(a.size + 1))
        assert abs(float(out) - np.float32(c)) <= bound


class TestMatmul:
    def test_identity(self):
        m = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(T.tensor(np.eye(2)), m), m)

    def test_dot_product(self):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_random_matches_triple_loop_oracle(self):
        rng = np.random.Generator(np.random.PCG64(5))
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        np.testing.assert_allclose(T.matmul(a, b), matmul_loops(a, b), rtol=1e-6)

    def test_large_shapes_match_oracle_in_f32(self):
        # matrix-scaled residual: per-element comparison is meaningless
        # where f32 cancellation leaves a tiny result
        rng = np.random.Generator(np.random.PCG64(6))
        a = rng.standard_normal((64, 64)).astype(np.float32)
        b = rng.standard_normal((64, 64)).astype(np.float32)
        ref = matmul_loops(a, b)
        got = T.matmul(a, b).astype(np.float64)
        assert float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))) <= 1e-6

    def test_inner_mismatch_rejected(self):
        with pytest.raises(T.ShapeMismatchError):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_rank_rejected(self):
        with pytest.raises(T.ShapeMismatchError):
            T.matmul(T.tensor(np.ones(3)), T.tensor(np.ones((3, 1))))


class TestReshape:
    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=3, max_side=5), elements=st.floats(-10, 10, width=32)))
    def test_reshape_roundtrip_is_identity(self, a):
        flat = T.reshape(a, (a.size,))
        back = T.reshape(flat, a.shape)
        np.testing.assert_array_equal(back, a)

    def test_element_count_must_match(self):
        with pytest.raises(T.ShapeMismatchError):
            T.reshape(T.tensor(np.ones((2, 3))), (7,))

    def test_extents_must_be_positive(self):
        with pytest.raises(ValueError):
            T.reshape(T.tensor(np.ones(4)), (4, 0))


class TestTensorConstruction:
    def test_row_major_f32(self):
        a = T.tensor([[1, 2], [3, 4]])
        assert a.dtype == np.float32 and a.flags["C_CONTIGUOUS"]

    def test_f64_mode(self):
        assert T.tensor([1.0], dtype=T.F64).dtype == np.float64

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            T.tensor(np.ones((0, 2)))
