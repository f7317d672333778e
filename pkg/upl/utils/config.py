"""
Reader for the flat ``key = value`` experiment config with [data], [arch],
[pretrain] and [adapt] sections, validated by the forms in ``upl.forms``.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..forms import AdaptConfigForm, ArchConfigForm, DataConfigForm, PretrainConfigForm
from .adaptation import AblationConfig, AdaptConfig
from .model import ArchConfig

logger = logging.getLogger(__name__)

SECTION_FORMS = {
    'data': DataConfigForm,
    'arch': ArchConfigForm,
    'pretrain': PretrainConfigForm,
    'adapt': AdaptConfigForm,
}
KEY_ALIASES = {'lambda': 'lam'}

PRETRAIN_FIELDS = {
    'epochs': 'pretrain_epochs',
    'lr': 'lr_pretrain',
    'lr_decay': 'lr_decay',
    'lr_decay_every': 'lr_decay_every',
    'batch_size': 'pretrain_batch_size',
    'seed': 'seed',
}
ADAPT_FIELDS = {
    'K': 'K', 'tau': 'tau', 'lam': 'lam', 'lr': 'lr_adapt', 'epochs': 'adapt_epochs',
    'finetune_epochs': 'finetune_epochs', 'batch_mode': 'batch_mode', 'cleanup': 'cleanup',
    'same_pass_labels': 'same_pass_labels', 'val_tau': 'val_tau', 'seed': 'seed',
}
ABLATION_KEYS = ('use_M', 'use_TDG_dropout', 'use_T', 'use_TFS', 'use_Lment', 'use_pseudo_dice')


class ConfigError(ValueError):
    pass


@dataclass
class ConfigFile:
    path: str
    sections: dict = field(default_factory=dict)   # section -> key -> (value, line)

    def line_of(self, section, key):
        return self.sections.get(section, {}).get(key, (None, 0))[1]


@dataclass
class Experiment:
    adapt: AdaptConfig
    arch: ArchConfig
    data: dict


def parse_config(text, path='<config>'):
    config = ConfigFile(path=str(path))
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(('#', ';')):
            continue
        if line.startswith('['):
            if not line.endswith(']'):
                raise ConfigError(f'{path}:{number}: malformed section header {raw!r}')
            section = line[1:-1].strip()
            if section not in SECTION_FORMS:
                raise ConfigError(f'{path}:{number}: unknown section [{section}]')
            config.sections.setdefault(section, {})
            continue
        if '=' not in line:
            raise ConfigError(f'{path}:{number}: expected "key = value", got {raw!r}')
        if section is None:
            raise ConfigError(f'{path}:{number}: key outside of any section')
        key, value = (part.strip() for part in line.split('=', 1))
        key = KEY_ALIASES.get(key, key)
        if key not in SECTION_FORMS[section].base_fields:
            raise ConfigError(f'{path}:{number}: unknown key {key!r} in [{section}]')
        if key in config.sections[section]:
            raise ConfigError(f'{path}:{number}: duplicate key {key!r} in [{section}]')
        config.sections[section][key] = (value, number)
    return config


def read_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f'{path}: cannot read config ({exc.strerror})') from exc
    return parse_config(text, path)


def _clean_section(config, section):
    entries = config.sections.get(section, {})
    form = SECTION_FORMS[section]({key: value for key, (value, _) in entries.items()})
    if not form.is_valid():
        messages = []
        for key, errors in form.errors.items():
            line = config.line_of(section, key)
            for error in errors:
                messages.append(f'{config.path}:{line}: [{section}] {key}: {error}')
        raise ConfigError('\n'.join(messages))
    return {key: form.cleaned_data[key] for key in entries if form.cleaned_data.get(key) is not None}


def build_experiment(config, base=None):
    """Cleaned AdaptConfig, ArchConfig and data options from a parsed config."""
    adapt = base or AdaptConfig()
    pretrain = _clean_section(config, 'pretrain')
    adapt_values = _clean_section(config, 'adapt')
    arch_values = _clean_section(config, 'arch')
    data = _clean_section(config, 'data')

    changes = {PRETRAIN_FIELDS[k]: v for k, v in pretrain.items()}
    changes.update({ADAPT_FIELDS[k]: v for k, v in adapt_values.items() if k in ADAPT_FIELDS})
    ablation = {k: v for k, v in adapt_values.items() if k in ABLATION_KEYS}
    if ablation:
        changes['ablation'] = replace(adapt.ablation, **ablation)
    if 'dropout_rate' in arch_values:
        changes['dropout_rate'] = arch_values['dropout_rate']
    adapt = replace(adapt, **changes)
    arch = ArchConfig(**arch_values)
    logger.debug('config %s: %s', config.path, adapt)
    return Experiment(adapt=adapt, arch=arch, data=data)


def load_experiment(path=None, base=None):
    if path is None:
        return Experiment(adapt=base or AdaptConfig(), arch=ArchConfig(), data={})
    return build_experiment(read_config(path), base)


GRID_FIELDS = {
    'K': 'K', 'tau': 'tau', 'lambda': 'lam', 'lam': 'lam', 'lr': 'lr_adapt',
    'epochs': 'adapt_epochs', 'dropout_rate': 'dropout_rate', 'ablate': 'ablation',
}


def _grid_value(key, text):
    if key == 'ablate':
        return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f'grid value {text!r} for {key} is not a number') from None


def parse_grid(tokens):
    """
    ``['K=1..5', 'tau=0.9,0.95']`` -> ``[('K', [1, 2, 3, 4, 5]), ('tau', [0.9, 0.95])]``.
    ``a..b`` is an inclusive integer range; ablate values join components with ``+``.
    """
    axes = []
    seen = set()
    for token in tokens:
        key, sep, values = token.partition('=')
        key = key.strip()
        if not sep or not values.strip():
            raise ConfigError(f'grid axis {token!r} must look like key=values')
        if key not in GRID_FIELDS:
            raise ConfigError(f'unknown grid key {key!r}; expected one of {", ".join(GRID_FIELDS)}')
        if GRID_FIELDS[key] in seen:
            raise ConfigError(f'grid key {key!r} given twice')
        seen.add(GRID_FIELDS[key])
        if '..' in values:
            low, _, high = values.partition('..')
            try:
                low, high = int(low), int(high)
            except ValueError:
                raise ConfigError(f'range {values!r} for {key} needs integer bounds') from None
            if high < low:
                raise ConfigError(f'empty range {values!r} for {key}')
            points = list(range(low, high + 1))
        else:
            points = [_grid_value(key, v.strip()) for v in values.split(',') if v.strip()]
        if not points:
            raise ConfigError(f'grid axis {key!r} has no values')
        axes.append((key, points))
    if not axes:
        raise ConfigError('empty grid')
    return axes


def expand_grid(axes):
    """Cartesian product of the axes as a list of {key: value} points, first axis slowest."""
    points = [{}]
    for key, values in axes:
        points = [{**point, key: value} for point in points for value in values]
    return points


def apply_grid_point(cfg, point):
    """AdaptConfig with one grid point's values substituted."""
    changes = {}
    for key, value in point.items():
        field_name = GRID_FIELDS[key]
        if field_name == 'ablation':
            names = [] if value.lower() in ('none', 'full') else value.split('+')
            changes['ablation'] = AblationConfig.disabling(names)
        else:
            changes[field_name] = value
    return replace(cfg, **changes)
