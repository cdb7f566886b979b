import numpy as np
import pytest

from cmalign import autodiff as ad
from cmalign.autodiff import NumericError, ShapeError, Tensor


def fd_gradient(fn, x, step=1e-5):
    """Independent central-difference oracle for scalar fn of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x).ravel()
    flat = x.ravel()
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        fp = fn(probe.reshape(x.shape))
        probe[i] -= 2 * step
        fm = fn(probe.reshape(x.shape))
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(x.shape)


def rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return np.abs(a - b) / denom


class TestAffine:
    def test_identity(self):
        x = Tensor(np.eye(2))
        w = Tensor(np.eye(2))
        b = Tensor(np.zeros(2))
        out = ad.affine(x, w, b)
        np.testing.assert_array_equal(out.value, np.eye(2))

    def test_hand_arithmetic(self):
        # 1*3 + 2*4 + 5 = 16
        out = ad.affine(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]), Tensor([5.0]))
        np.testing.assert_array_equal(out.value, [[16.0]])

    def test_zero_input_rows_equal_bias(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)))
        b_arr = rng.normal(size=3)
        out = ad.affine(Tensor(np.zeros((5, 4))), w, Tensor(b_arr))
        for row in out.value:
            np.testing.assert_array_equal(row, b_arr)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))

    def test_backward_input_jacobian_is_weight_transpose_exactly(self):
        # linear-only tape: d(out[0, k]) / d(input[0, :]) must be w[:, k] bitwise
        rng = np.random.default_rng(1)
        w_arr = rng.normal(size=(4, 3))
        for k in range(3):
            x = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
            w = Tensor(w_arr)
            out = ad.affine(x, w, Tensor(np.zeros(3)))
            pick = np.zeros((1, 3))
            pick[0, k] = 1.0
            scalar = ad.mul(out, Tensor(pick)).sum()
            scalar.backward()
            np.testing.assert_array_equal(x.grad[0], w_arr[:, k])


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(ad.l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)

    def test_zero_vector_guard(self):
        np.testing.assert_array_equal(ad.l2_normalize([0.0, 0.0]), [0.0, 0.0])

    def test_axis_case(self):
        np.testing.assert_array_equal(ad.l2_normalize([5.0, 0.0]), [1.0, 0.0])

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ad.l2_normalize([1.0], eps=0.0)

    def test_unit_norm_when_above_eps(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 8)) * 10
            if np.linalg.norm(v) >= 1e-12:
                assert abs(np.linalg.norm(ad.l2_normalize(v)) - 1.0) <= 1e-12

    def test_rows_variant_matches_vector_helper(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 4))
        out = ad.l2_normalize_rows(Tensor(x)).value
        for i in range(6):
            np.testing.assert_allclose(out[i], ad.l2_normalize(x[i]), atol=1e-15)

    def test_subeps_row_gradient_is_plain_scaling(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        out = ad.l2_normalize_rows(x, eps=1e-6)
        out.sum().backward()
        np.testing.assert_allclose(x.grad, np.full((1, 3), 1e6), rtol=1e-12)


class TestPrimitiveGradients:
    """Every primitive's reverse-mode gradient vs central differences
    (rel err <= 1e-6 on random inputs of magnitude <= 10)."""

    TOL = 1e-6

    def check(self, build, x0):
        def value(arr):
            return build(Tensor(arr)).item()

        leaf = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
        build(leaf).backward()
        numeric = fd_gradient(value, x0)
        assert rel_err(leaf.grad, numeric).max() <= self.TOL

    def test_relu(self):
        rng = np.random.default_rng(10)
        self.check(lambda t: ad.relu(t).sum(), rng.uniform(-10, 10, size=(5, 4)))

    def test_l2_normalize_rows(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(5, 4))
        self.check(lambda t: ad.mul(ad.l2_normalize_rows(t), Tensor(w)).sum(),
                   rng.uniform(-10, 10, size=(5, 4)))

    def test_affine_all_args(self):
        rng = np.random.default_rng(12)
        x0 = rng.uniform(-10, 10, size=(3, 4))
        w0 = rng.uniform(-2, 2, size=(4, 2))
        b0 = rng.uniform(-2, 2, size=2)

        def build_x(t):
            return ad.relu(ad.affine(t, Tensor(w0), Tensor(b0))).sum()

        self.check(build_x, x0)

        def build_w(t):
            return ad.relu(ad.affine(Tensor(x0), t, Tensor(b0))).sum()

        self.check(build_w, w0)

    def test_scaled_dot(self):
        rng = np.random.default_rng(13)
        b0 = rng.uniform(-2, 2, size=(4, 3))
        w = rng.normal(size=(5, 4))
        self.check(lambda t: ad.mul(ad.scaled_dot(t, Tensor(b0), 0.37), Tensor(w)).sum(),
                   rng.uniform(-10, 10, size=(5, 3)))

    def test_scaled_dot_self_similarity(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(4, 4))
        self.check(lambda t: ad.mul(ad.scaled_dot(t, t, 0.5), Tensor(w)).sum(),
                   rng.uniform(-3, 3, size=(4, 3)))

    def test_softmax_rows(self):
        rng = np.random.default_rng(15)
        w = rng.normal(size=(4, 5))
        self.check(lambda t: ad.mul(ad.softmax_rows(t), Tensor(w)).sum(),
                   rng.uniform(-10, 10, size=(4, 5)))

    def test_logsumexp_rows_masked(self):
        rng = np.random.default_rng(16)
        mask = rng.random((4, 6)) < 0.5
        mask[:, 0] = True  # keep every row populated
        self.check(lambda t: ad.logsumexp_rows(t, mask).sum(),
                   rng.uniform(-10, 10, size=(4, 6)))

    def test_log_and_clip(self):
        rng = np.random.default_rng(17)
        self.check(lambda t: ad.log(ad.clip_min(t, 1e-12)).sum(),
                   rng.uniform(0.5, 10, size=(3, 3)))

    def test_concat_take_slice_reshape(self):
        rng = np.random.default_rng(18)
        idx = np.array([0, 2, 2, 4])
        x0 = rng.uniform(-10, 10, size=20)

        def build(t):
            mat = ad.reshape(t, (5, 4))
            cat = ad.concat_rows([mat, ad.take_rows(mat, idx)])
            return ad.mul(cat, Tensor(rng2)).sum()

        rng2 = np.random.default_rng(19).normal(size=(9, 4))
        self.check(build, x0)

    def test_sum_axes(self):
        rng = np.random.default_rng(20)
        w0 = rng.normal(size=3)
        w1 = rng.normal(size=4)
        self.check(lambda t: ad.mul(t.sum(axis=0), Tensor(w0)).sum(),
                   rng.uniform(-10, 10, size=(4, 3)))
        self.check(lambda t: ad.mul(t.sum(axis=1), Tensor(w1)).sum(),
                   rng.uniform(-10, 10, size=(4, 3)))


class TestGraphMechanics:
    def test_adjoints_zeroed_between_backward_passes(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        out = ad.mul(x, x).sum()
        out.backward()
        first = x.grad.copy()
        out.backward()
        np.testing.assert_array_equal(x.grad, first)  # not doubled

    def test_shared_subgraph_accumulates(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        y = ad.mul(x, x)        # x^2
        out = ad.add(y, y).sum()  # 2 x^2 -> d/dx = 4x
        out.backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.relu(x).backward()

    def test_constants_get_no_gradient(self):
        c = Tensor(np.ones(3))
        x = Tensor(np.ones(3), requires_grad=True)
        ad.mul(x, c).sum().backward()
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_softmax_uniform_and_extreme(self):
        uniform = ad.softmax_rows(Tensor(np.zeros((2, 4)))).value
        np.testing.assert_allclose(uniform, 0.25, atol=1e-15)
        probs = ad.softmax_rows(Tensor([[10.0, -10.0]])).value
        assert abs(probs[0, 0] - 1.0) <= 1e-8 and abs(probs[0, 1]) <= 1e-8

    def test_logsumexp_empty_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError):
            ad.logsumexp_rows(Tensor(np.zeros((2, 2))), mask)

    def test_ensure_finite_reports_index(self):
        arr = np.array([1.0, np.nan, 2.0])
        with pytest.raises(NumericError, match="flat index 1"):
            ad.ensure_finite(arr, "test")

    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(21)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=4)
        flat = ad.pack_arrays([a, b])
        leaf = Tensor(flat, requires_grad=True)
        parts = ad.unpack_tensor(leaf, [("a", (2, 3)), ("b", (4,))])
        np.testing.assert_array_equal(parts["a"].value, a)
        np.testing.assert_array_equal(parts["b"].value, b)
        parts["a"].sum().backward()
        np.testing.assert_array_equal(leaf.grad[:6], np.ones(6))
        np.testing.assert_array_equal(leaf.grad[6:], np.zeros(4))
