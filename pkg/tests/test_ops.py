"""Numeric oracles for the tensor ops.

Forward results are checked against independent nested-loop implementations,
adjoints against central finite differences.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solidtex import ops
from solidtex.autodiff import Tape, TapeConsumedError, Var, backward, grad_value


def loop_conv3d(x, w, b):
    cout = w.shape[0]
    k = w.shape[2:]
    dims = tuple(x.shape[1 + i] - k[i] + 1 for i in range(3))
    y = np.zeros((cout,) + dims, dtype=np.float64)
    for co in range(cout):
        for i in range(dims[0]):
            for j in range(dims[1]):
                for l in range(dims[2]):
                    y[co, i, j, l] = (
                        w[co].astype(np.float64)
                        * x[:, i:i + k[0], j:j + k[1], l:l + k[2]]
                    ).sum() + b[co]
    return y


def loop_conv2d_same(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return loop_conv3d(xp, w.reshape(w.shape[:4] + (1,)), b)


def fd_check(make_loss, variables, atol=0.0, rtol=1e-4, eps=1e-3, probes=6):
    """Compare tape gradients against central differences at sampled entries."""
    tape = Tape()
    loss = make_loss(tape)
    backward(tape, loss)
    grads = {id(v): grad_value(v).copy() for v in variables}
    rng = np.random.default_rng(99)
    for v in variables:
        flat = v.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(make_loss(None).data)
            flat[i] = orig - eps
            dn = float(make_loss(None).data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            an = grads[id(v)].reshape(-1)[i]
            assert an == pytest.approx(fd, rel=rtol, abs=max(atol, 1e-9)), (
                f"entry {i}: analytic {an}, finite-difference {fd}")


class TestConv3d:
    def test_forward_matches_loop(self, rng):
        x = rng.standard_normal((4, 6, 5, 7))
        w = rng.standard_normal((3, 4, 3, 3, 3))
        b = rng.standard_normal(3)
        y = ops.conv3d_valid(Var(x), Var(w), Var(b))
        ref = loop_conv3d(x, w, b)
        assert np.abs(y.data - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_pointwise_forward_matches_loop(self, rng):
        x = rng.standard_normal((5, 4, 4, 4))
        w = rng.standard_normal((2, 5, 1, 1, 1))
        b = rng.standard_normal(2)
        y = ops.conv3d_valid(Var(x), Var(w), Var(b))
        ref = loop_conv3d(x, w, b)
        assert np.abs(y.data - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_adjoints_match_finite_differences(self, rng):
        x = Var(rng.standard_normal((3, 5, 5, 5)))
        w = Var(rng.standard_normal((2, 3, 3, 3, 3)) * 0.2)
        b = Var(rng.standard_normal(2) * 0.2)
        fd_check(lambda t: ops.sum_squares(
            ops.conv3d_valid(x, w, b, t), t), [x, w, b])

    def test_rejects_channel_mismatch(self, rng):
        x = Var(rng.standard_normal((3, 5, 5, 5)))
        w = Var(rng.standard_normal((2, 4, 3, 3, 3)))
        with pytest.raises(ops.ShapeError, match="channel"):
            ops.conv3d_valid(x, w, Var(np.zeros(2)))

    def test_rejects_undersized_input(self, rng):
        x = Var(rng.standard_normal((3, 5, 2, 5)))
        w = Var(rng.standard_normal((2, 3, 3, 3, 3)))
        with pytest.raises(ops.ShapeError, match="d2"):
            ops.conv3d_valid(x, w, Var(np.zeros(2)))


class TestConv2dSame:
    def test_forward_matches_loop(self, rng):
        x = rng.standard_normal((3, 7, 6, 1))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y = ops.conv2d_same(Var(x), Var(w), Var(b))
        ref = loop_conv2d_same(x, w, b)
        assert y.data.shape == (4, 7, 6, 1)
        assert np.abs(y.data - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_adjoints_match_finite_differences(self, rng):
        x = Var(rng.standard_normal((2, 6, 5, 1)))
        w = Var(rng.standard_normal((3, 2, 3, 3)) * 0.2)
        b = Var(rng.standard_normal(3) * 0.2)
        fd_check(lambda t: ops.sum_squares(
            ops.conv2d_same(x, w, b, t), t), [x, w, b])

    def test_rejects_volume_input(self, rng):
        x = Var(rng.standard_normal((2, 6, 5, 3)))
        with pytest.raises(ops.ShapeError, match="d3"):
            ops.conv2d_same(x, Var(np.zeros((3, 2, 3, 3))), Var(np.zeros(3)))


class TestResampling:
    def test_upsample_places_blocks(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
        y = ops.upsample_nn2(Var(x)).data
        assert y.shape == (1, 4, 4, 4)
        for i in range(4):
            for j in range(4):
                for l in range(4):
                    assert y[0, i, j, l] == x[0, i // 2, j // 2, l // 2]

    def test_upsample_adjoint(self, rng):
        x = Var(rng.standard_normal((2, 3, 2, 2)))
        fd_check(lambda t: ops.sum_squares(ops.upsample_nn2(x, t), t), [x])

    def test_avgpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        y = ops.avgpool2(Var(x)).data
        assert y.shape == (1, 2, 2, 1)
        assert y[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
        assert y[0, 1, 1, 0] == pytest.approx((10 + 11 + 14 + 15) / 4)

    def test_avgpool_truncates_odd_input(self, rng):
        x = rng.standard_normal((2, 5, 7, 1))
        y = ops.avgpool2(Var(x)).data
        assert y.shape == (2, 2, 3, 1)

    def test_avgpool_adjoint(self, rng):
        x = Var(rng.standard_normal((2, 5, 4, 1)))
        fd_check(lambda t: ops.sum_squares(ops.avgpool2(x, t), t), [x])


class TestBatchNorm:
    def _params(self, c):
        return (Var(np.full(c, 1.5)), Var(np.full(c, -0.25)),
                Var(np.zeros(c)), Var(np.ones(c)))

    def test_train_mode_normalizes_sample(self, rng):
        x = rng.standard_normal((3, 4, 4, 2)) * 3 + 1
        w, b, m, v = self._params(3)
        y = ops.batch_norm(Var(x), w, b, m, v, "train").data
        mu = x.mean(axis=(1, 2, 3))
        sd = np.sqrt(x.var(axis=(1, 2, 3)) + ops.BN_EPS)
        ref = 1.5 * (x - mu[:, None, None, None]) / sd[:, None, None, None] - 0.25
        assert np.abs(y - ref).max() < 1e-10

    def test_train_mode_updates_running_buffers(self, rng):
        x = rng.standard_normal((2, 4, 4, 1)) + 5
        w, b, m, v = self._params(2)
        ops.batch_norm(Var(x), w, b, m, v, "train")
        mu = x.mean(axis=(1, 2, 3))
        assert m.data == pytest.approx(ops.BN_MOMENTUM * mu)
        assert v.data == pytest.approx(
            (1 - ops.BN_MOMENTUM) + ops.BN_MOMENTUM * x.var(axis=(1, 2, 3)))

    def test_infer_mode_uses_running_buffers(self, rng):
        x = rng.standard_normal((2, 3, 3, 3))
        w, b, _, _ = self._params(2)
        m = Var(np.array([1.0, -2.0]))
        v = Var(np.array([4.0, 0.25]))
        y = ops.batch_norm(Var(x), w, b, m, v, "infer").data
        ref = (1.5 * (x - m.data[:, None, None, None])
               / np.sqrt(v.data + ops.BN_EPS)[:, None, None, None] - 0.25)
        assert np.abs(y - ref).max() < 1e-10

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_adjoints_match_finite_differences(self, rng, mode):
        x = Var(rng.standard_normal((2, 4, 3, 2)))
        w = Var(rng.standard_normal(2))
        b = Var(rng.standard_normal(2))

        def make(tape):
            m, v = Var(np.array([0.3, -0.1])), Var(np.array([1.2, 0.8]))
            return ops.sum_squares(
                ops.batch_norm(x, w, b, m, v, mode, tape=tape), tape)

        fd_check(make, [x, w, b])

    def test_rejects_unknown_mode(self, rng):
        x = Var(rng.standard_normal((1, 2, 2, 1)))
        w, b, m, v = self._params(1)
        with pytest.raises(ValueError, match="mode"):
            ops.batch_norm(x, w, b, m, v, "test")


class TestActivations:
    def test_leaky_relu_values(self):
        x = Var(np.array([[-2.0, 0.0, 3.0]]).reshape(1, 3, 1, 1))
        y = ops.leaky_relu(x, 0.01).data.reshape(-1)
        assert list(y) == [-0.02, 0.0, 3.0]

    def test_leaky_relu_adjoint(self, rng):
        x = Var(rng.standard_normal((2, 4, 4, 2)) + 0.05)
        fd_check(lambda t: ops.sum_squares(ops.leaky_relu(x, 0.01, t), t), [x])

    def test_relu_zeroes_negatives(self, rng):
        x = rng.standard_normal((2, 5, 5, 1))
        y = ops.relu(Var(x)).data
        assert (y[x < 0] == 0).all()
        assert (y[x >= 0] == x[x >= 0]).all()

    def test_slope_bounds(self):
        with pytest.raises(ValueError):
            ops.leaky_relu(Var(np.zeros((1, 1, 1, 1))), slope=1.5)


class TestShapePlumbing:
    def test_crop_window(self, rng):
        x = rng.standard_normal((2, 6, 5, 4))
        y = ops.crop(Var(x), (1, 0, 2), (4, 5, 3)).data
        assert (y == x[:, 1:4, :, 2:3]).all()

    def test_crop_adjoint_scatters(self, rng):
        x = Var(rng.standard_normal((1, 4, 4, 4)))
        tape = Tape()
        y = ops.crop(x, (1, 1, 1), (3, 3, 3), tape)
        s = ops.sum_squares(y, tape)
        backward(tape, s)
        g = grad_value(x)
        assert (g[:, 0] == 0).all() and (g[:, 3] == 0).all()
        assert np.allclose(g[:, 1:3, 1:3, 1:3], 2 * x.data[:, 1:3, 1:3, 1:3])

    def test_crop_center_odd_margin_favors_low_side(self, rng):
        x = rng.standard_normal((1, 5, 5, 5))
        y = ops.crop_center(Var(x), (2, 2, 2)).data
        assert (y == x[:, 1:3, 1:3, 1:3]).all()

    def test_concat_order_and_adjoint(self, rng):
        a = Var(rng.standard_normal((2, 3, 3, 1)))
        b = Var(rng.standard_normal((4, 3, 3, 1)))
        y = ops.concat_channels(a, b)
        assert (y.data[:2] == a.data).all() and (y.data[2:] == b.data).all()
        fd_check(lambda t: ops.sum_squares(
            ops.concat_channels(a, b, t), t), [a, b])

    def test_concat_rejects_spatial_mismatch(self, rng):
        a = Var(rng.standard_normal((2, 3, 3, 1)))
        b = Var(rng.standard_normal((2, 3, 4, 1)))
        with pytest.raises(ops.ShapeError, match="d2"):
            ops.concat_channels(a, b)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_slice_to_image(self, rng, axis):
        shape = [3, 4, 5, 6]
        shape[1 + axis] = 1
        x = rng.standard_normal(shape)
        y = ops.slice_to_image(Var(x), axis).data
        assert y.shape[3] == 1 and y.shape[0] == 3
        assert (y.reshape(-1) == x.reshape(-1)).all()

    def test_flip_channels(self, rng):
        x = rng.standard_normal((3, 2, 2, 1))
        assert (ops.flip_channels(Var(x)).data == x[::-1]).all()


class TestGram:
    def test_hand_case(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
        g = ops.gram(Var(f)).data
        assert g == pytest.approx(np.array([[2.5, 5.5], [5.5, 12.5]]))

    def test_adjoint(self, rng):
        x = Var(rng.standard_normal((3, 4, 4, 1)))
        target = rng.standard_normal((3, 3))
        target = target + target.T

        def make(tape):
            g = ops.gram(x, tape)
            return ops.gram_frobenius_term(g, target, 3, tape)

        fd_check(make, [x])

    def test_frobenius_term_zero_at_target(self, rng):
        x = Var(rng.standard_normal((3, 5, 5, 1)))
        g = ops.gram(x)
        term = ops.gram_frobenius_term(g, g.data, 3)
        assert float(term.data) == 0.0

    def test_frobenius_scaling(self):
        g = Var(np.eye(4))
        term = ops.gram_frobenius_term(g, np.zeros((4, 4)), 4)
        assert float(term.data) == pytest.approx(4.0 / 16.0)


class TestScalars:
    def test_add_scalars_and_adjoint(self, rng):
        x = Var(rng.standard_normal((2, 3, 3, 1)))

        def make(tape):
            a = ops.sum_squares(x, tape)
            b = ops.tensor_sum(x, tape)
            return ops.add_scalars([a, b], tape)

        fd_check(make, [x])

    def test_tensor_sum_value(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        assert float(ops.tensor_sum(Var(x)).data) == pytest.approx(x.sum())


class TestTape:
    def test_consumed_tape_raises(self, rng):
        x = Var(rng.standard_normal((1, 2, 2, 1)))
        tape = Tape()
        s = ops.sum_squares(x, tape)
        backward(tape, s)
        with pytest.raises(TapeConsumedError):
            backward(tape, s)

    def test_unreached_variable_has_zero_gradient(self, rng):
        x = Var(rng.standard_normal((1, 2, 2, 1)))
        y = Var(rng.standard_normal((1, 2, 2, 1)))
        tape = Tape()
        s = ops.sum_squares(x, tape)
        backward(tape, s)
        assert y.grad is None
        assert (grad_value(y) == 0).all()

    def test_gradient_accumulates_across_uses(self, rng):
        x = Var(rng.standard_normal((1, 2, 2, 1)))
        tape = Tape()
        a = ops.tensor_sum(x, tape)
        b = ops.tensor_sum(x, tape)
        s = ops.add_scalars([a, b], tape)
        backward(tape, s)
        assert np.allclose(grad_value(x), 2.0)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(2, 8), w=st.integers(2, 8), c=st.integers(1, 4),
       seed=st.integers(0, 2 ** 16))
def test_conv2d_same_matches_loop_property(h, w, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w, 1))
    kw = rng.standard_normal((2, c, 3, 3))
    b = rng.standard_normal(2)
    y = ops.conv2d_same(Var(x), Var(kw), Var(b)).data
    ref = loop_conv2d_same(x, kw, b)
    assert np.abs(y - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1.0)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 5), seed=st.integers(0, 2 ** 16))
def test_upsample_then_crop_recovers_alignment(d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, d, d, d))
    y = ops.upsample_nn2(Var(x)).data
    assert (y[:, ::2, ::2, ::2] == x).all()
    assert (y[:, 1::2, 1::2, 1::2] == x).all()
