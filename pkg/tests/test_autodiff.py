import numpy as np
import pytest

from emgse.autodiff import (
    Tensor, ops, nn, AdamW, no_grad, check_gradients, using_dtype,
)
from emgse.errors import ContractError, DomainError, ShapeError


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestForwardOracles:
    def test_conv1d_correlation(self):
        x = t([[[1.0, 2.0, 3.0, 4.0]]])
        w = t([[[1.0, -1.0]]])
        y = ops.conv1d(x, w)
        np.testing.assert_allclose(y.numpy(), [[[-1.0, -1.0, -1.0]]])

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(t([0.0])).numpy()[0] == 0.5

    def test_softmax_uniform(self):
        y = ops.softmax(t([[2.0, 2.0, 2.0]]))
        np.testing.assert_allclose(y.numpy(), [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_matmul_small(self):
        y = ops.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
        np.testing.assert_allclose(y.numpy(), [[3.0], [7.0]])

    def test_anti_wrap_periodicity(self):
        two_pi = 2.0 * np.pi
        x = t([0.1, -0.1, 0.1 + two_pi, 0.1 - 3 * two_pi, np.pi])
        y = ops.anti_wrap(x)
        np.testing.assert_allclose(y.numpy(), [0.1, 0.1, 0.1, 0.1, np.pi], atol=1e-12)

    def test_layer_norm_standardizes(self):
        x = t(np.random.default_rng(0).normal(size=(4, 8)) * 3.0 + 5.0)
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        y = ops.layer_norm(x, g, b).numpy()
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_overlap_add_forward(self):
        frames = t([[1.0, 1.0], [1.0, 1.0]])
        y = ops.overlap_add(frames, hop=1, length=3)
        np.testing.assert_allclose(y.numpy(), [1.0, 2.0, 1.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ops.log(t([0.0]))
        with pytest.raises(DomainError):
            ops.log(t([-1.0]))

    def test_sqrt_domain(self):
        with pytest.raises(DomainError):
            ops.sqrt(t([-1e-9]))

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            ops.matmul(t([1.0, 2.0]), t([[1.0], [1.0]]))
        with pytest.raises(ShapeError):
            ops.matmul(t([[1.0, 2.0]]), t([[1.0]]))

    def test_conv2d_matches_scipy(self):
        from scipy.signal import correlate2d

        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        y = ops.conv2d(t(x), t(w)).numpy()
        for o in range(3):
            ref = sum(correlate2d(x[0, i], w[o, i], mode="valid") for i in range(2))
            np.testing.assert_allclose(y[0, o], ref, atol=1e-12)

    def test_conv_transpose_is_adjoint(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 7, 9))
        w = rng.normal(size=(4, 3, 1, 3))  # [Co, Ci, Kt, Kf] for the forward
        u_shape = ops.conv2d(t(x), t(w), stride=(1, 2)).shape
        u = rng.normal(size=u_shape)
        lhs = np.vdot(ops.conv2d(t(x), t(w), stride=(1, 2)).numpy(), u)
        rhs = np.vdot(x, ops.conv_transpose2d(t(u), t(w), stride=(1, 2)).numpy())
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestBackwardBasics:
    def test_diamond_accumulation(self):
        x = t([3.0])
        y = x * x + x
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_unreduces(self):
        a = t(np.ones((2, 3)))
        b = t(np.ones(3))
        (a * b).backward(np.ones((2, 3)))
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(a.grad, np.ones((2, 3)))

    def test_no_grad_blocks_tape(self):
        x = t([1.0])
        with no_grad():
            y = x * x
        assert y.node is None and not y.requires_grad

    def test_backward_needs_scalar(self):
        x = t([1.0, 2.0])
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_repeated_backward_accumulates(self):
        x = t([2.0])
        for _ in range(2):
            (x * x).backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_float32_mode(self):
        with using_dtype(np.float32):
            x = Tensor([1.0], requires_grad=True)
            y = ops.exp(x)
            assert y.dtype == np.float32
            y.backward(np.ones(1, dtype=np.float32))
            assert x.grad.dtype == np.float32


def _scalarize(fn):
    """Wrap an op so gradcheck sees a scalar: weighted sum with fixed weights."""

    def wrapped(*tensors):
        y = fn(*tensors)
        w = Tensor(np.cos(np.arange(y.size, dtype=np.float64)).reshape(y.shape))
        return ops.sum_(y * w)

    return wrapped


class TestGradcheckPrimitives:
    def setup_method(self):
        self.rng = np.random.default_rng(2024)

    def rand(self, *shape, positive=False, grad=True):
        a = self.rng.normal(size=shape)
        if positive:
            a = np.abs(a) + 0.5
        return Tensor(a, requires_grad=grad)

    def test_elementwise_unary(self):
        cases = [
            (ops.exp, {}), (ops.tanh, {}), (ops.sigmoid, {}), (ops.silu, {}),
            (ops.softplus, {}), (ops.sin, {}), (ops.cos, {}), (ops.neg, {}),
        ]
        for fn, _ in cases:
            check_gradients(_scalarize(fn), [self.rand(3, 4)])

    def test_positive_domain_unary(self):
        check_gradients(_scalarize(ops.log), [self.rand(3, 4, positive=True)])
        check_gradients(_scalarize(ops.sqrt), [self.rand(3, 4, positive=True)])
        check_gradients(_scalarize(lambda x: ops.power(x, 0.3)),
                        [self.rand(3, 4, positive=True)])

    def test_abs_and_relu_off_kink(self):
        x = Tensor(self.rng.normal(size=(3, 4)) + np.sign(self.rng.normal(size=(3, 4))) * 0.5,
                   requires_grad=True)
        check_gradients(_scalarize(ops.absolute), [x])
        check_gradients(_scalarize(ops.relu), [x])

    def test_binary_broadcast(self):
        for fn in (ops.add, ops.sub, ops.mul):
            check_gradients(_scalarize(fn), [self.rand(2, 3), self.rand(3)])
        check_gradients(_scalarize(ops.div), [self.rand(2, 3), self.rand(3, positive=True)])

    def test_atan2(self):
        y = self.rand(3, 3)
        x = self.rand(3, 3, positive=True)
        check_gradients(_scalarize(ops.atan2), [y, x])

    def test_anti_wrap_off_kink(self):
        x = Tensor(self.rng.uniform(0.3, 2.8, size=(8,)), requires_grad=True)
        check_gradients(_scalarize(ops.anti_wrap), [x])

    def test_reductions(self):
        check_gradients(lambda x: ops.sum_(x), [self.rand(3, 4)])
        check_gradients(lambda x: ops.mean(x), [self.rand(3, 4)])
        check_gradients(_scalarize(lambda x: ops.sum_(x, axis=1)), [self.rand(3, 4)])
        check_gradients(_scalarize(lambda x: ops.mean(x, axis=(0, 2), keepdims=True)),
                        [self.rand(2, 3, 4)])

    def test_matmul_batched(self):
        check_gradients(_scalarize(ops.matmul), [self.rand(2, 3, 4), self.rand(2, 4, 2)])
        check_gradients(_scalarize(ops.matmul), [self.rand(2, 3, 4), self.rand(4, 2)])

    def test_softmax_and_log_softmax(self):
        check_gradients(_scalarize(lambda x: ops.softmax(x, axis=-1)), [self.rand(3, 5)])
        check_gradients(_scalarize(lambda x: ops.log_softmax(x, axis=-1)), [self.rand(3, 5)])

    def test_layer_norm(self):
        x = self.rand(2, 3, 6)
        gamma = Tensor(self.rng.normal(size=6), requires_grad=True)
        beta = Tensor(self.rng.normal(size=6), requires_grad=True)
        check_gradients(_scalarize(ops.layer_norm), [x, gamma, beta])

    def test_shape_ops(self):
        check_gradients(_scalarize(lambda x: ops.reshape(x, (4, 3))), [self.rand(2, 6)])
        check_gradients(_scalarize(lambda x: ops.transpose(x, (2, 0, 1))), [self.rand(2, 3, 4)])
        check_gradients(_scalarize(lambda x: ops.flip(x, axis=1)), [self.rand(2, 5)])
        check_gradients(_scalarize(lambda x: ops.narrow(x, 1, 1, 3)), [self.rand(2, 5)])
        check_gradients(
            _scalarize(lambda a, b: ops.concat([a, b], axis=1)),
            [self.rand(2, 3), self.rand(2, 2)],
        )

    def test_conv1d_variants(self):
        x = self.rand(2, 3, 10)
        w = self.rand(4, 3, 3)
        check_gradients(_scalarize(lambda a, b: ops.conv1d(a, b, stride=2, padding=2)), [x, w])
        check_gradients(_scalarize(lambda a, b: ops.conv1d(a, b, dilation=2)), [x, w])
        wd = self.rand(3, 1, 4)
        check_gradients(
            _scalarize(lambda a, b: ops.conv1d(a, b, padding=3, groups=3)), [x, wd]
        )

    def test_conv2d_and_transpose(self):
        x = self.rand(1, 2, 5, 6)
        w = self.rand(3, 2, 3, 3)
        check_gradients(
            _scalarize(lambda a, b: ops.conv2d(a, b, dilation=(2, 1), padding=(2, 1))), [x, w]
        )
        xt = self.rand(1, 2, 3, 4)
        wt = self.rand(2, 3, 1, 3)
        check_gradients(
            _scalarize(lambda a, b: ops.conv_transpose2d(a, b, stride=(1, 2))), [xt, wt]
        )

    def test_overlap_add(self):
        frames = self.rand(2, 4, 6)
        check_gradients(_scalarize(lambda f: ops.overlap_add(f, hop=3, length=15)), [frames])

    def test_composite_modules(self):
        rng = np.random.default_rng(7)
        lin = nn.Linear(5, 3, rng)
        x = self.rand(2, 5)
        params = [x, lin.weight, lin.bias]
        check_gradients(lambda *ps: ops.sum_(ops.silu(lin(ps[0]))), params)

        cell = nn.LstmCell(4, 3, rng)
        xs, h0, c0 = self.rand(2, 4), self.rand(2, 3), self.rand(2, 3)

        def lstm_loss(*ps):
            h, c = cell(ps[0], ps[1], ps[2])
            return ops.sum_(h * h) + ops.sum_(c)

        check_gradients(lstm_loss, [xs, h0, c0, cell.w_ih, cell.w_hh, cell.bias])


class TestModules:
    def test_named_parameters_deterministic(self):
        def build():
            rng = np.random.default_rng(0)
            m = nn.Module()
            m.lin = nn.Linear(3, 2, rng)
            m.stack = [nn.LayerNorm(2), nn.Linear(2, 2, rng)]
            return m

        names1 = [n for n, _ in build().named_parameters()]
        names2 = [n for n, _ in build().named_parameters()]
        assert names1 == names2
        assert names1 == [
            "lin.weight", "lin.bias",
            "stack.0.gamma", "stack.0.beta",
            "stack.1.weight", "stack.1.bias",
        ]

    def test_channel_layer_norm_axis(self):
        rng = np.random.default_rng(1)
        m = nn.ChannelLayerNorm(4)
        x = Tensor(rng.normal(size=(2, 4, 3, 5)), requires_grad=True)
        y = m(x).numpy()
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)

    def test_num_parameters(self):
        rng = np.random.default_rng(0)
        lin = nn.Linear(7, 5, rng)
        assert lin.num_parameters() == 7 * 5 + 5


class TestAdamW:
    def test_single_step_matches_hand_calc(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        # Bias-corrected first step moves by almost exactly -lr.
        np.testing.assert_allclose(p.numpy(), [0.9], atol=1e-7)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        p.grad = np.zeros(1)
        opt.step()
        np.testing.assert_allclose(p.numpy(), [2.0 * (1.0 - 0.1 * 0.01)], rtol=1e-12)

    def test_descends_quadratic(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        opt = AdamW([p], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            loss = ops.sum_(p * p)
            loss.backward()
            opt.step()
        assert abs(float(p.numpy()[0])) < 1e-2


class TestFaultInjection:
    def test_tanh_fault_breaks_gradcheck(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3,)), requires_grad=True)
        check_gradients(lambda v: ops.sum_(ops.tanh(v)), [x])
        ops.fault_hooks["tanh_backward"] = 1.02
        with pytest.raises(AssertionError):
            check_gradients(lambda v: ops.sum_(ops.tanh(v)), [x])
