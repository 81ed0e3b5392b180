import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesr.autodiff import (
    SGD,
    Conv2d,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv3x3,
    finite_diff_check,
    masked_sq_loss,
    mul,
    one_minus,
    relu,
    scale,
    sigmoid,
    sub,
    sum_sq,
)


def conv_reference(x, w, b):
    """Six-loop cross-correlation oracle, zero pad 1."""
    bs, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((bs, cout, h, wd))
    xp = np.zeros((bs, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    for n in range(bs):
        for o in range(cout):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for dy in range(3):
                            for dx in range(3):
                                acc += w[o, c, dy, dx] * xp[n, c, y + dy, xx + dx]
                    out[n, o, y, xx] = acc
    return out


class TestConvForward:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(1, 4, rng)
        layer.bias.data[:] = rng.normal(size=4)
        out = layer(Tensor(np.zeros((1, 1, 3, 3))))
        assert np.array_equal(out.data, np.broadcast_to(
            layer.bias.data[None, :, None, None], (1, 4, 3, 3)))

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv3x3(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv3x3(Tensor(x), Tensor(w), Tensor(b))
        assert np.max(np.abs(out.data - conv_reference(x, w, b))) < 1e-12

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv3x3(Tensor(np.zeros((1, 2, 4, 4))),
                    Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))

    def test_spatial_extent_preserved(self):
        rng = np.random.default_rng(3)
        layer = Conv2d(3, 7, rng)
        out = layer(Tensor(rng.normal(size=(2, 3, 9, 13))))
        assert out.shape == (2, 7, 9, 13)

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 6, 6))
        y = rng.normal(size=(1, 2, 6, 6))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        a, c = 1.7, -0.4
        lhs = conv3x3(Tensor(a * x + c * y), w, b).data
        rhs = a * conv3x3(Tensor(x), w, b).data + c * conv3x3(Tensor(y), w, b).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10


class TestRelu:
    def test_definition(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        out = relu(Tensor(-np.abs(np.random.default_rng(5).normal(size=(2, 3)))))
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_matches_elementwise_oracle(self):
        x = np.random.default_rng(6).normal(size=(3, 4, 5))
        out = relu(Tensor(x))
        assert np.array_equal(out.data, np.maximum(x, 0.0))

    def test_grad_zero_at_strictly_negative(self):
        x = Tensor(np.array([-2.0, -0.5, 1.0]), requires_grad=True)
        sum_sq(relu(x)).backward()
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0 and x.grad[2] != 0.0


class TestMaskedSqLoss:
    def test_zero_when_pred_equals_target(self):
        rng = np.random.default_rng(7)
        t = rng.normal(size=(1, 1, 4, 4))
        m = rng.random(size=(1, 3, 4, 4))
        assert masked_sq_loss(Tensor(t), t, m).item() == 0.0

    def test_zero_mask_kills_residual(self):
        rng = np.random.default_rng(8)
        pred = Tensor(rng.normal(size=(1, 1, 4, 4)))
        target = rng.normal(size=(1, 1, 4, 4))
        assert masked_sq_loss(pred, target, np.zeros((1, 2, 4, 4))).item() == 0.0

    def test_hand_sum(self):
        # residual [[1,0],[0,2]], mask [[1,1],[0,0]] -> 1.0
        pred = Tensor(np.zeros((1, 1, 2, 2)))
        target = np.array([[1.0, 0.0], [0.0, 2.0]]).reshape(1, 1, 2, 2)
        mask = np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
        assert masked_sq_loss(pred, target, mask).item() == 1.0

    def test_all_ones_mask_is_frobenius(self):
        rng = np.random.default_rng(9)
        pred = Tensor(rng.normal(size=(2, 1, 5, 5)))
        target = rng.normal(size=(2, 1, 5, 5))
        loss = masked_sq_loss(pred, target, np.ones((2, 1, 5, 5))).item()
        assert abs(loss - np.sum((target - pred.data) ** 2)) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            masked_sq_loss(Tensor(np.zeros((1, 1, 3, 3))),
                           np.zeros((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))


class TestBackward:
    def test_sum_sq_gradient(self):
        x = Tensor(np.random.default_rng(10).normal(size=(3, 4)), requires_grad=True)
        sum_sq(x).backward()
        assert np.max(np.abs(x.grad - 2.0 * x.data)) < 1e-14

    def test_backward_before_forward_raises(self):
        with pytest.raises(RuntimeError):
            Tensor(np.array(1.0)).backward()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = relu(x)
        with pytest.raises(RuntimeError):
            y.backward()

    @pytest.mark.parametrize("seed", range(3))
    def test_deep_network_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        layers = [Conv2d(2, 3, rng), Conv2d(3, 3, rng), Conv2d(3, 1, rng)]
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        target = rng.normal(size=(1, 1, 4, 4))

        def loss_fn():
            h = x
            for layer in layers[:-1]:
                h = relu(layer(h))
            return masked_sq_loss(layers[-1](h), target, np.ones((1, 1, 4, 4)))

        params = [p for l in layers for p in l.parameters()] + [x]
        assert finite_diff_check(loss_fn, params, max_entries=20, rng=rng) < 1e-4

    def test_gate_fusion_path_finite_difference(self):
        rng = np.random.default_rng(11)
        ga = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        gb = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        pre = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        target = rng.normal(size=(1, 1, 3, 3))

        def loss_fn():
            lam = sigmoid(pre)
            fused = add(mul(one_minus(lam), ga), mul(lam, gb))
            return masked_sq_loss(fused, target, np.ones((1, 1, 3, 3)))

        assert finite_diff_check(loss_fn, [ga, gb, pre]) < 1e-4

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(21)
            layer = Conv2d(2, 2, rng)
            x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
            loss = sum_sq(relu(layer(x)))
            loss.backward()
            return loss.item(), layer.weight.grad.copy(), x.grad.copy()

        l1, w1, x1 = run()
        l2, w2, x2 = run()
        assert l1 == l2
        assert np.array_equal(w1, w2)
        assert np.array_equal(x1, x2)


class TestSGD:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.ones(4), requires_grad=True)
        p.grad = np.zeros(4)
        opt = SGD([p], base_lr=0.5)
        opt.step()
        assert np.array_equal(p.data, np.ones(4))

    def test_plain_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        SGD([p], base_lr=0.1, momentum=0.0).step()
        assert abs(p.data[0] - 0.9) < 1e-15

    def test_momentum_matches_hand_unroll(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], base_lr=0.1, momentum=0.9)
        p.grad = np.array([2.0])
        opt.step()
        # buf = 2.0; p = 1 - 0.1*2.0 = 0.8
        assert abs(p.data[0] - 0.8) < 1e-15
        p.grad = np.array([1.0])
        opt.step()
        # buf = 0.9*2.0 + 1.0 = 2.8; p = 0.8 - 0.28 = 0.52
        assert abs(p.data[0] - 0.52) < 1e-15
        assert opt.step_count == 2

    def test_lr_scale_zero_freezes(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([5.0])
        SGD([p], base_lr=0.1, lr_scales=[0.0]).step()
        assert p.data[0] == 3.0


class TestElementwise:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_concat_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(1, 1, 3, 3))
        out = concat_channels([Tensor(a), Tensor(b)])
        assert np.array_equal(out.data[:, :2], a)
        assert np.array_equal(out.data[:, 2:], b)

    def test_add_sub_mul_scale(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([3.0, 5.0]))
        assert np.array_equal(add(a, b).data, [4.0, 7.0])
        assert np.array_equal(sub(a, b).data, [-2.0, -3.0])
        assert np.array_equal(mul(a, b).data, [3.0, 10.0])
        assert np.array_equal(scale(a, 2.0).data, [2.0, 4.0])
        assert np.array_equal(one_minus(a).data, [0.0, -1.0])

    def test_sigmoid_range(self):
        x = np.random.default_rng(13).normal(scale=10.0, size=100)
        y = sigmoid(Tensor(x)).data
        assert np.all(y >= 0.0) and np.all(y <= 1.0)
