import numpy as np
from django.test import SimpleTestCase

from upl.utils import autodiff as ad
from upl.utils.model import (
    MAX_HEADS, ArchConfig, CheckpointError, SegModel, checkpoint_load, checkpoint_save, grow,
    parameter_count, parameter_groups,
)

ARCH = ArchConfig(levels=2, base_channels=4, kernel=3, dropout_rate=0.5)


def build(class_count=3, seed=0, arch=ARCH):
    return SegModel.build(arch, class_count, np.random.default_rng(seed))


def warmed(model, seed=1):
    """Model whose BN layers have running statistics from one train-mode pass."""
    x = np.random.default_rng(seed).normal(size=(2, 1, 8, 8)).astype(np.float32)
    for k in range(model.K):
        model.forward_head(x, k, 'train', None, dropout=False)
    return model


def sample_input(seed=2):
    return np.random.default_rng(seed).normal(size=(2, 1, 8, 8)).astype(np.float32)


class forward(SimpleTestCase):

    def test_output_is_probability_map(self):
        p = warmed(build()).forward_head(sample_input(), 0, 'eval', None).data
        self.assertEqual(p.shape, (2, 3, 8, 8))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_eval_forward_is_pure(self):
        model = warmed(build())
        x = sample_input()
        a = model.forward_head(x, 0, 'eval', None).data
        b = model.forward_head(x, 0, 'eval', None).data
        np.testing.assert_array_equal(a, b)

    def test_spatial_size_must_divide(self):
        with self.assertRaises(ad.ShapeError):
            build().forward_head(np.zeros((1, 1, 6, 6), dtype=np.float32), 0, 'train', None)

    def test_head_index_range(self):
        with self.assertRaises(IndexError):
            build().forward_head(sample_input(), 1, 'train', None)

    def test_fresh_model_has_no_dropout(self):
        model = build()
        x = sample_input()
        a = model.clone().forward_head(x, 0, 'train', np.random.default_rng(0)).data
        b = model.clone().forward_head(x, 0, 'train', np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)


class growing(SimpleTestCase):

    def test_grow_one_is_structurally_identical(self):
        model = build()
        grown = grow(model, 1)
        self.assertEqual(grown.K, 1)
        self.assertEqual(set(grown.parameters()), set(model.parameters()))

    def test_grown_heads_are_bitwise_equal(self):
        grown = grow(build(), 4)
        self.assertEqual(grown.K, 4)
        params = grown.parameters()
        for name, p in params.items():
            if name.startswith('head.0.'):
                for k in range(1, 4):
                    np.testing.assert_array_equal(p.data, params[name.replace('head.0.', f'head.{k}.', 1)].data)

    def test_grown_heads_agree_in_eval(self):
        grown = warmed(grow(warmed(build()), 3))
        x = sample_input()
        outputs = [grown.forward_head(x, k, 'eval', None).data for k in range(3)]
        for out in outputs[1:]:
            np.testing.assert_array_equal(out, outputs[0])

    def test_grown_average_equals_single_head(self):
        single = warmed(build())
        grown = grow(single, 4)
        x = sample_input()
        expected = single.forward_head(x, 0, 'eval', None).data
        mean = np.mean([grown.forward_head(x, k, 'eval', None).data for k in range(4)], axis=0)
        np.testing.assert_allclose(mean, expected, atol=1e-7)

    def test_dropout_diversifies_heads_in_train_mode(self):
        grown = grow(build(), 2)
        x = sample_input()
        a = grown.forward_head(x, 0, 'train', np.random.default_rng(10)).data
        b = grown.forward_head(x, 1, 'train', np.random.default_rng(11)).data
        self.assertGreater(np.abs(a - b).max(), 0.0)

    def test_parameter_count(self):
        model = build()
        encoder = parameter_count({n: p for n, p in model.parameters().items() if n.startswith('encoder.')})
        head = parameter_count({n: p for n, p in model.parameters().items() if n.startswith('head.0.')})
        self.assertEqual(parameter_count(grow(model, 4).parameters()), encoder + 4 * head)

    def test_grow_rejects_bad_k(self):
        for k in (0, MAX_HEADS + 1):
            with self.assertRaises(ValueError):
                grow(build(), k)
        with self.assertRaises(ValueError):
            grow(grow(build(), 2), 2)

    def test_grow_leaves_input_untouched(self):
        model = build()
        grow(model, 3)
        self.assertEqual(model.K, 1)
        self.assertEqual(model.heads[0].dropout_rate, 0.0)


class groups(SimpleTestCase):

    def test_bn_affine_only(self):
        model = build()
        bn = parameter_groups(model, 'bn_affine_only')
        layers = list(model.named_bn())
        self.assertEqual(parameter_count(bn), 2 * sum(state.channels for _, state in layers))
        self.assertTrue(set(bn) <= set(parameter_groups(model, 'all')))
        rest = set(parameter_groups(model, 'all')) - set(bn)
        self.assertFalse(any(name.endswith(('.gamma', '.beta')) for name in rest))

    def test_unknown_selector(self):
        with self.assertRaises(ValueError):
            parameter_groups(build(), 'heads')


class checkpoint(SimpleTestCase):

    def test_round_trip_is_bitwise(self):
        model = warmed(grow(warmed(build()), 2))
        x = sample_input()
        loaded, optimizer_state, meta = checkpoint_load(checkpoint_save(model, meta={'epoch': 3, 'K': 2}))
        self.assertIsNone(optimizer_state)
        self.assertEqual(meta, {'epoch': 3, 'K': 2})
        self.assertEqual(loaded.K, 2)
        self.assertEqual([h.dropout_rate for h in loaded.heads], [0.5, 0.5])
        for k in range(2):
            np.testing.assert_array_equal(loaded.forward_head(x, k, 'eval', None).data,
                                          model.forward_head(x, k, 'eval', None).data)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], value)

    def test_optimizer_moments_survive(self):
        model = build()
        optimizer = ad.Adam(parameter_groups(model), lr=0.01)
        for p in model.parameters().values():
            p.grad = np.ones_like(p.data)
        optimizer.step()
        _, state, _ = checkpoint_load(checkpoint_save(model, optimizer.state_dict()))
        self.assertEqual(state['step_count'], 1)
        self.assertEqual(state['lr'], 0.01)
        for name in optimizer.m:
            np.testing.assert_array_equal(state['m'][name], optimizer.m[name])
            np.testing.assert_array_equal(state['v'][name], optimizer.v[name])

    def test_grow_before_or_after_save(self):
        model = warmed(build())
        x = sample_input()
        saved_then_grown = grow(checkpoint_load(checkpoint_save(model))[0], 3)
        grown_then_loaded = checkpoint_load(checkpoint_save(grow(model, 3)))[0]
        for k in range(3):
            np.testing.assert_array_equal(saved_then_grown.forward_head(x, k, 'eval', None).data,
                                          grown_then_loaded.forward_head(x, k, 'eval', None).data)

    def test_corrupted_magic(self):
        data = bytearray(checkpoint_save(build()))
        data[0] ^= 0xFF
        with self.assertRaises(CheckpointError):
            checkpoint_load(bytes(data))

    def test_truncated(self):
        data = checkpoint_save(build())
        for cut in (5, len(data) // 2, len(data) - 1):
            with self.assertRaises(CheckpointError):
                checkpoint_load(data[:cut])

    def test_flipped_payload_byte(self):
        data = bytearray(checkpoint_save(build()))
        data[len(data) // 2] ^= 0x01
        with self.assertRaises(CheckpointError):
            checkpoint_load(bytes(data))

    def test_state_shape_mismatch(self):
        small, large = build(), build(arch=ArchConfig(base_channels=8))
        with self.assertRaises(CheckpointError):
            large.load_state_dict(small.state_dict())


class arch(SimpleTestCase):

    def test_validation(self):
        for kwargs in ({'levels': 0}, {'base_channels': 1}, {'kernel': 2}, {'dropout_rate': 1.0}):
            with self.assertRaises(ValueError):
                ArchConfig(**kwargs)

    def test_channels(self):
        self.assertEqual([ARCH.channels(level) for level in range(3)], [4, 8, 16])
