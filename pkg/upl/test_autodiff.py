import numpy as np
from django.test import SimpleTestCase

from upl.utils import autodiff as ad
from upl.utils import losses


def numeric_grad(loss_fn, param, h=1e-3):
    """Central differences of a scalar function with respect to param.data (in place)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = float(loss_fn().data)
        flat[i] = saved - h
        down = float(loss_fn().data)
        flat[i] = saved
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        tape.backward(loss_fn())
    return [p.grad.copy() for p in params]


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)


def conv_oracle(x, w, b):
    batch, cin, h, width = x.shape
    cout, _, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((batch, cout, h, width))
    for n in range(batch):
        for o in range(cout):
            for i in range(h):
                for j in range(width):
                    total = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                total += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = total
    return out


class GradientCheckMixin:
    def assertGradientsMatch(self, loss_fn, params, worst=1e-2, typical=1e-3, h=1e-3):
        for param, analytic in zip(params, analytic_grads(loss_fn, params)):
            err = relative_error(analytic, numeric_grad(loss_fn, param, h))
            self.assertLessEqual(err.max(), worst)
            self.assertGreaterEqual(np.mean(err <= typical), 0.99)


class tape(SimpleTestCase):

    def test_square_sum(self):
        x = ad.Parameter([1.0, 2.0, 3.0])
        with ad.Tape() as t:
            y = (x * x).sum()
            t.backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_identity_gradient_is_one(self):
        x = ad.Parameter([5.0])
        with ad.Tape() as t:
            t.backward(x)
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_backward_needs_scalar(self):
        x = ad.Parameter([1.0, 2.0])
        with ad.Tape() as t:
            y = x * 2.0
            with self.assertRaises(ad.ShapeError):
                t.backward(y)

    def test_reuse_accumulates_once_per_use(self):
        x = ad.Parameter([3.0])
        with ad.Tape() as t:
            y = (x * x + x).sum()
            t.backward(y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_tape_records_nothing(self):
        x = ad.Parameter([1.0, 2.0])
        y = x * x
        self.assertIsNone(y._backward)
        self.assertFalse(y.requires_grad)

    def test_cleared_tape_leaves_no_nodes(self):
        x = ad.Parameter([1.0, 2.0])
        with ad.Tape() as t:
            y = (x * x).sum()
            t.backward(y)
            nodes = list(t.nodes)
        self.assertEqual(t.nodes, [])
        self.assertTrue(all(n._backward is None and n._parents == () for n in nodes))
        self.assertIsNone(ad.active_tape())

    def test_dtype_is_preserved(self):
        x = ad.Tensor(np.ones((2, 2), dtype=np.float64))
        self.assertEqual((x * 3.0 + 1.0).dtype, np.float64)
        self.assertEqual(ad.Tensor([1, 2]).dtype, np.float32)


class conv(GradientCheckMixin, SimpleTestCase):

    def test_constant_field(self):
        x = ad.Tensor(np.ones((1, 1, 3, 3)))
        w = ad.Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, ad.Tensor(np.zeros(1)), 1).data[0, 0]
        self.assertEqual(out[1, 1], 9.0)
        self.assertEqual(out[0, 0], 4.0)
        self.assertEqual(out[2, 2], 4.0)
        self.assertEqual(out[0, 1], 6.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 5, 5)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), None, 1)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=(1, 2, 5, 5))
        w = rng.uniform(-2, 2, size=(3, 2, 3, 3))
        b = rng.uniform(-2, 2, size=3)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), 1)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b), atol=1e-5)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x = ad.Parameter(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)
        w = ad.Parameter(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
        b = ad.Parameter(rng.normal(size=3), dtype=np.float64)
        target = rng.normal(size=(1, 3, 5, 5))
        self.assertGradientsMatch(lambda: (ad.conv2d(x, w, b, 1) * target).sum(), [x, w, b])

    def test_channel_mismatch(self):
        with self.assertRaises(ad.ShapeError):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))), None, 1)

    def test_padding_must_keep_size(self):
        with self.assertRaises(ad.ShapeError):
            ad.conv2d(ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.zeros((1, 1, 3, 3))), None, 0)


class batchnorm(GradientCheckMixin, SimpleTestCase):

    def test_constant_channel_gives_beta(self):
        state = ad.BNState(2)
        state.beta.data[:] = [0.5, -1.0]
        out = ad.batchnorm2d(ad.Tensor(np.full((2, 2, 3, 3), 7.0)), state, 'train')
        np.testing.assert_allclose(out.data[:, 0], 0.5, atol=1e-6)
        np.testing.assert_allclose(out.data[:, 1], -1.0, atol=1e-6)

    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(3)
        x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
        out = ad.batchnorm2d(ad.Tensor(x), ad.BNState(3, np.float64), 'train').data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_streaming_oracle(self):
        rng = np.random.default_rng(4)
        state = ad.BNState(2, np.float64)
        mean, var = np.zeros(2), np.ones(2)
        for _ in range(2):
            x = rng.normal(1.0, 3.0, size=(3, 2, 4, 4))
            ad.batchnorm2d(ad.Tensor(x), state, 'train')
            mean = 0.9 * mean + 0.1 * x.mean(axis=(0, 2, 3))
            var = 0.9 * var + 0.1 * x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(state.running_mean, mean, atol=1e-6)
        np.testing.assert_allclose(state.running_var, var, atol=1e-6)
        self.assertEqual(state.tracked, 2)

    def test_eval_before_statistics(self):
        with self.assertRaises(ValueError):
            ad.batchnorm2d(ad.Tensor(np.zeros((1, 1, 2, 2))), ad.BNState(1), 'eval')

    def test_train_needs_two_values(self):
        with self.assertRaises(ad.ShapeError):
            ad.batchnorm2d(ad.Tensor(np.zeros((1, 1, 1, 1))), ad.BNState(1), 'train')

    def test_gradients_both_modes(self):
        rng = np.random.default_rng(5)
        x = ad.Parameter(rng.normal(size=(2, 2, 3, 3)), dtype=np.float64)
        state = ad.BNState(2, np.float64)
        state.gamma.data[:] = [1.5, 0.7]
        state.beta.data[:] = [0.1, -0.2]
        target = rng.normal(size=(2, 2, 3, 3))
        for mode in ('train', 'eval'):
            self.assertGradientsMatch(
                lambda: (ad.batchnorm2d(x, state, mode) * target).sum(), [x, state.gamma, state.beta])


class softmax(GradientCheckMixin, SimpleTestCase):

    def test_zero_logits(self):
        out = ad.softmax_channel(ad.Tensor(np.zeros((1, 2, 2, 2)))).data
        np.testing.assert_allclose(out, 0.5)

    def test_closed_form(self):
        logits = np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1)
        out = ad.softmax_channel(ad.Tensor(logits, dtype=np.float64)).data
        np.testing.assert_allclose(out[0, :, 0, 0], [0.25, 0.75])

    def test_sums_to_one(self):
        rng = np.random.default_rng(6)
        out = ad.softmax_channel(ad.Tensor(rng.normal(scale=5.0, size=(2, 4, 6, 6)))).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        self.assertTrue(np.all((out > 0) & (out < 1)))

    def test_needs_two_channels(self):
        with self.assertRaises(ad.ShapeError):
            ad.softmax_channel(ad.Tensor(np.zeros((1, 1, 2, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = ad.Parameter(rng.normal(size=(1, 3, 3, 3)), dtype=np.float64)
        target = rng.normal(size=(1, 3, 3, 3))
        self.assertGradientsMatch(lambda: (ad.softmax_channel(x) * target).sum(), [x])


class dropout(SimpleTestCase):

    def test_rate_zero_and_eval_are_identity(self):
        x = ad.Tensor(np.arange(6.0))
        self.assertIs(ad.dropout(x, 0.0, None, 'train'), x)
        self.assertIs(ad.dropout(x, 0.5, None, 'eval'), x)

    def test_rate_out_of_range(self):
        x = ad.Tensor(np.ones(3))
        for rate in (-0.1, 1.0):
            with self.assertRaises(ValueError):
                ad.dropout(x, rate, np.random.default_rng(0), 'train')

    def test_drop_fraction_and_scale(self):
        x = ad.Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.5, np.random.default_rng(8), 'train').data
        self.assertAlmostEqual(float(np.mean(out == 0)), 0.5, delta=0.01)
        self.assertAlmostEqual(float(out.mean()), 1.0, delta=0.02)
        self.assertTrue(np.all((out == 0) | (out == 2.0)))

    def test_same_seed_same_mask(self):
        x = ad.Tensor(np.ones((4, 4)))
        a = ad.dropout(x, 0.3, np.random.default_rng(9), 'train').data
        b = ad.dropout(x, 0.3, np.random.default_rng(9), 'train').data
        np.testing.assert_array_equal(a, b)


class primitives(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(10)

    def param(self, *shape, low=-2.0, high=2.0):
        return ad.Parameter(self.rng.uniform(low, high, size=shape), dtype=np.float64)

    def test_leaky_relu(self):
        values = self.rng.uniform(0.2, 2.0, size=(2, 3)) * self.rng.choice([-1, 1], size=(2, 3))
        x = ad.Parameter(values, dtype=np.float64)
        out = ad.leaky_relu(x, 0.01).data
        np.testing.assert_allclose(out, np.where(values > 0, values, 0.01 * values))
        w = self.rng.normal(size=(2, 3))
        self.assertGradientsMatch(lambda: (ad.leaky_relu(x, 0.01) * w).sum(), [x])
        self.assertGradientsMatch(lambda: (ad.relu(x) * w).sum(), [x])

    def test_maxpool(self):
        values = self.rng.permutation(32).reshape(1, 2, 4, 4) * 0.1
        x = ad.Parameter(values, dtype=np.float64)
        out = ad.maxpool2d(x).data
        oracle = values.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(out, oracle)
        w = self.rng.normal(size=(1, 2, 2, 2))
        self.assertGradientsMatch(lambda: (ad.maxpool2d(x) * w).sum(), [x])

    def test_maxpool_needs_even_size(self):
        with self.assertRaises(ad.ShapeError):
            ad.maxpool2d(ad.Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample(self):
        x = self.param(1, 2, 2, 3)
        out = ad.upsample2x(x).data
        self.assertEqual(out.shape, (1, 2, 4, 6))
        np.testing.assert_array_equal(out[:, :, 1::2, 1::2], x.data)
        w = self.rng.normal(size=(1, 2, 4, 6))
        self.assertGradientsMatch(lambda: (ad.upsample2x(x) * w).sum(), [x])

    def test_elementwise_and_reductions(self):
        a = self.param(2, 3)
        b = self.param(2, 3, low=1.0, high=2.0)
        c = self.param(3)
        self.assertGradientsMatch(lambda: ((a * b + c) / b - a).mean(), [a, b, c])
        self.assertGradientsMatch(lambda: ad.log(b).sum(axis=1).sum(), [b])
        self.assertGradientsMatch(lambda: (a.sum(axis=0, keepdims=True) * c).sum(), [a, c])

    def test_concat_and_slicing(self):
        a = self.param(1, 2, 3, 3)
        b = self.param(1, 1, 3, 3)
        w = self.rng.normal(size=(1, 3, 3, 3))
        self.assertGradientsMatch(lambda: (ad.concat([a, b], axis=1) * w).sum(), [a, b])
        self.assertGradientsMatch(lambda: (a[:, 1] * a[:, 0]).sum(), [a])

    def test_flip_and_rotation(self):
        a = self.param(1, 2, 3, 3)
        w = self.rng.normal(size=(1, 2, 3, 3))
        self.assertGradientsMatch(lambda: (ad.flip(a, -1) * w).sum(), [a])
        self.assertGradientsMatch(lambda: (ad.rot90(a, 1) * w).sum(), [a])
        np.testing.assert_array_equal(ad.rot90(ad.rot90(a, 1), 3).data, a.data)

    def test_clip_min(self):
        x = ad.Parameter([0.5, -1.0, 2.0], dtype=np.float64)
        with ad.Tape() as t:
            t.backward(ad.clip_min(x, 0.0).sum())
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])


class composite(GradientCheckMixin, SimpleTestCase):

    def test_conv_bn_relu_softmax_dice(self):
        rng = np.random.default_rng(11)
        x = ad.Tensor(rng.normal(size=(1, 2, 8, 8)), dtype=np.float64)
        w = ad.Parameter(rng.normal(scale=0.5, size=(3, 2, 3, 3)), dtype=np.float64)
        b = ad.Parameter(rng.normal(size=3), dtype=np.float64)
        state = ad.BNState(3, np.float64)
        labels = rng.integers(0, 3, size=(1, 8, 8))
        y = np.moveaxis(np.eye(3)[labels], -1, 1)
        M = (rng.random((1, 8, 8)) > 0.3).astype(np.float64)

        def loss():
            h = ad.leaky_relu(ad.batchnorm2d(ad.conv2d(x, w, b, 1), state, 'train'), 0.01)
            return losses.weighted_dice(ad.softmax_channel(h), y, M).value

        # small step keeps the leaky-ReLU kinks out of the difference quotient
        self.assertGradientsMatch(loss, [w, b, state.gamma, state.beta], h=1e-5)


class optimizer(SimpleTestCase):

    def test_zero_gradient_leaves_parameters(self):
        p = ad.Parameter(np.arange(4.0))
        before = p.data.copy()
        opt = ad.Adam({'p': p}, lr=0.1)
        p.grad = np.zeros(4, dtype=np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_lr(self):
        p = ad.Parameter([1.0, -1.0], dtype=np.float64)
        opt = ad.Adam({'p': p}, lr=0.01)
        p.grad = np.array([0.3, -2.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-7)

    def test_missing_gradient_is_skipped(self):
        p = ad.Parameter([1.0])
        opt = ad.Adam({'p': p}, lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0])

    def test_state_round_trip(self):
        p = ad.Parameter([1.0, 2.0])
        opt = ad.Adam({'p': p}, lr=0.1)
        p.grad = np.array([0.5, 0.5], dtype=np.float32)
        opt.step()
        other = ad.Adam({'p': ad.Parameter([1.0, 2.0])}, lr=1.0)
        other.load_state_dict(opt.state_dict())
        self.assertEqual(other.step_count, 1)
        self.assertEqual(other.lr, 0.1)
        np.testing.assert_array_equal(other.m['p'], opt.m['p'])

    def test_step_decay(self):
        schedule = ad.StepDecay(0.01, 0.9, 4)
        self.assertEqual([schedule.lr_at(e) for e in range(4)], [0.01] * 4)
        for epoch in range(4, 8):
            self.assertAlmostEqual(schedule.lr_at(epoch), 0.009)
