import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase

from upl.forms import AdaptConfigForm, StrictBooleanField
from upl.utils.adaptation import AblationConfig, AdaptConfig
from upl.utils.config import (
    ConfigError, apply_grid_point, build_experiment, expand_grid, load_experiment, parse_config, parse_grid,
    read_config,
)
from upl.utils.model import ArchConfig


def experiment(text, base=None):
    return build_experiment(parse_config(text, 'test.cfg'), base)


class parsing(SimpleTestCase):

    def test_sections_and_lines(self):
        config = parse_config('# comment\n[adapt]\nK = 2\n\n[arch]\nlevels=3\n', 'x.cfg')
        self.assertEqual(config.sections['adapt']['K'], ('2', 3))
        self.assertEqual(config.line_of('arch', 'levels'), 6)

    def test_lambda_alias(self):
        config = parse_config('[adapt]\nlambda = 0.5\n')
        self.assertIn('lam', config.sections['adapt'])
        self.assertEqual(experiment('[adapt]\nlambda = 0.5\n').adapt.lam, 0.5)

    def test_errors_name_the_line(self):
        cases = {
            '[adapt]\nK = 2\nmystery = 1\n': 'test.cfg:3',
            'K = 2\n': 'test.cfg:1',
            '[adapt]\nK 2\n': 'test.cfg:2',
            '[network]\n': 'test.cfg:1',
            '[adapt\n': 'test.cfg:1',
            '[adapt]\nK = 2\nK = 3\n': 'test.cfg:3',
        }
        for text, location in cases.items():
            with self.assertRaisesMessage(ConfigError, location):
                parse_config(text, 'test.cfg')

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_config('/nonexistent/upl.cfg')


class validation(SimpleTestCase):

    def test_reference_config(self):
        exp = load_experiment(settings.BASE_DIR / 'configs' / 'syn_a_b.cfg')
        self.assertEqual((exp.adapt.K, exp.adapt.tau, exp.adapt.lam), (4, 0.95, 1.0))
        self.assertEqual((exp.adapt.lr_adapt, exp.adapt.pretrain_epochs), (0.0001, 400))
        self.assertEqual(exp.adapt.batch_mode, 'volume')
        self.assertTrue(exp.adapt.ablation.is_full)
        self.assertEqual(exp.arch, ArchConfig())
        self.assertEqual(exp.data, {'benchmark': 'SYN-A-B', 'n_cases': 20, 'seed': 42})

    def test_quick_config(self):
        exp = load_experiment(settings.BASE_DIR / 'configs' / 'quick.cfg')
        self.assertEqual((exp.adapt.adapt_epochs, exp.adapt.tau, exp.adapt.pretrain_epochs), (3, 0.9, 30))
        self.assertEqual(exp.data, {'n_cases': 10})

    def test_defaults_without_file(self):
        exp = load_experiment(None, base=AdaptConfig(seed=7))
        self.assertEqual(exp.adapt, AdaptConfig(seed=7))
        self.assertEqual(exp.data, {})

    def test_base_is_overridden_only_where_set(self):
        exp = experiment('[adapt]\ntau = 0.9\n', base=AdaptConfig(seed=9, K=3))
        self.assertEqual((exp.adapt.seed, exp.adapt.K, exp.adapt.tau), (9, 3, 0.9))

    def test_value_errors_name_the_line(self):
        cases = {
            '[adapt]\ntau = 1.5\n': 'test.cfg:2',
            '[adapt]\n\nK = 0\n': 'test.cfg:3',
            '[adapt]\ncleanup = maybe\n': 'test.cfg:2',
            '[adapt]\nbatch_mode = -2\n': 'test.cfg:2',
            '[arch]\nkernel = 4\n': 'test.cfg:2',
            '[pretrain]\nlr = 0\n': 'test.cfg:2',
            '[data]\nbenchmark = SYN-X\n': 'test.cfg:2',
        }
        for text, location in cases.items():
            with self.assertRaisesMessage(ConfigError, location):
                experiment(text)

    def test_ablation_switches(self):
        exp = experiment('[adapt]\nuse_M = false\nuse_Lment = off\nuse_pseudo_dice = no\n')
        self.assertEqual(exp.adapt.ablation, AblationConfig(use_M=False, use_Lment=False, use_pseudo_dice=False))

    def test_arch_dropout_feeds_adaptation(self):
        exp = experiment('[arch]\ndropout_rate = 0.3\n')
        self.assertEqual((exp.arch.dropout_rate, exp.adapt.dropout_rate), (0.3, 0.3))

    def test_batch_mode_integer(self):
        self.assertEqual(experiment('[adapt]\nbatch_mode = 4\n').adapt.batch_mode, 4)

    def test_config_file_round_trip_through_disk(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'small.cfg'
            path.write_text('[adapt]\nK = 2\nepochs = 1\n', encoding='utf-8')
            exp = load_experiment(path)
        self.assertEqual((exp.adapt.K, exp.adapt.adapt_epochs), (2, 1))


class booleans(SimpleTestCase):

    def test_strict_boolean(self):
        field = StrictBooleanField(required=False)
        for text in ('true', 'Yes', 'ON', '1'):
            self.assertIs(field.clean(text), True)
        for text in ('false', 'no', 'Off', '0'):
            self.assertIs(field.clean(text), False)
        self.assertIsNone(field.clean(''))

    def test_form_rejects_other_words(self):
        form = AdaptConfigForm({'use_T': 'sometimes'})
        self.assertFalse(form.is_valid())
        self.assertIn('use_T', form.errors)


class grid(SimpleTestCase):

    def test_range_and_lists(self):
        axes = parse_grid(['K=1..3', 'tau=0.9,0.95', 'ablate=none,M,TFS+LMENT'])
        self.assertEqual(axes, [('K', [1, 2, 3]), ('tau', [0.9, 0.95]), ('ablate', ['none', 'M', 'TFS+LMENT'])])

    def test_expand_first_axis_slowest(self):
        points = expand_grid([('K', [1, 2]), ('tau', [0.9, 0.95])])
        self.assertEqual(points, [
            {'K': 1, 'tau': 0.9}, {'K': 1, 'tau': 0.95}, {'K': 2, 'tau': 0.9}, {'K': 2, 'tau': 0.95},
        ])

    def test_bad_grids(self):
        for tokens in ([], ['K'], ['K='], ['depth=1'], ['K=1', 'K=2'], ['lam=1', 'lambda=2'],
                       ['K=5..1'], ['K=a..3'], ['tau=high']):
            with self.assertRaises(ConfigError):
                parse_grid(tokens)

    def test_apply_point(self):
        cfg = apply_grid_point(AdaptConfig(), {'K': 2, 'lambda': 0.5, 'lr': 0.001, 'ablate': 'M+T'})
        self.assertEqual((cfg.K, cfg.lam, cfg.lr_adapt), (2, 0.5, 0.001))
        self.assertEqual(cfg.ablation, AblationConfig(use_M=False, use_T=False))
        self.assertTrue(apply_grid_point(cfg, {'ablate': 'none'}).ablation.is_full)
        entropy_only = apply_grid_point(cfg, {'ablate': 'M+T+TFS+DICE'}).ablation
        self.assertEqual(entropy_only, AblationConfig(use_M=False, use_T=False, use_TFS=False, use_pseudo_dice=False))
