"""
Shared plumbing for the experiment commands: exit codes, input loading and
the diagnostic dump written when training diverges.
"""
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..utils import synthdata
from ..utils.adaptation import AdaptationError, AdaptConfig, NumericError
from ..utils.autodiff import ShapeError
from ..utils.config import ConfigError, load_experiment
from ..utils.losses import LossInputError
from ..utils.metrics import MetricError
from ..utils.model import CheckpointError, checkpoint_load
from ..utils.pseudolabel import PseudoLabelError
from ..utils.run_storage import json_safe, write_manifest
from ..utils.transforms import TransformError

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

NUMERIC_DUMP = 'numeric-failure.json'


class ExperimentCommand(BaseCommand):
    """
    Subclasses implement ``run(**options)``. Library errors are mapped to
    CommandError exit codes: 2 usage/config, 3 data/format, 4 numeric.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.out_dir = None
        self.inputs = []
        self.outputs = []
        self.started = None

    def handle(self, *args, **options):
        self.started = time.perf_counter()
        try:
            self.run(**options)
        except CommandError:
            raise
        except NumericError as exc:
            dump = self.dump_diagnostics(exc)
            raise CommandError(f'numeric failure: {exc} (diagnostics in {dump})', returncode=EXIT_NUMERIC)
        except (ConfigError, AdaptationError) as exc:
            raise CommandError(str(exc), returncode=EXIT_USAGE)
        except (synthdata.DatasetFormatError, synthdata.SplitError, CheckpointError,
                MetricError, PseudoLabelError, ShapeError, LossInputError, TransformError) as exc:
            raise CommandError(str(exc), returncode=EXIT_DATA)
        except OSError as exc:
            raise CommandError(f'I/O error: {exc}', returncode=EXIT_DATA)

    def run(self, **options):
        raise NotImplementedError('subclasses of ExperimentCommand must provide a run() method')

    # Inputs

    def experiment(self, config_path, seed=None):
        base = AdaptConfig(seed=settings.UPL_SEED)
        if config_path is not None:
            self.require_file(config_path, EXIT_USAGE)
            self.inputs.append(Path(config_path))
        exp = load_experiment(config_path, base)
        if seed is not None:
            exp.adapt = replace(exp.adapt, seed=seed)
        return exp

    def require_file(self, path, code=EXIT_DATA):
        path = Path(path)
        if not path.is_file():
            raise CommandError(f'missing input file: {path}', returncode=code)
        return path

    def load_split(self, data_dir, role, split):
        path = self.require_file(Path(data_dir) / synthdata.dataset_filename(role, split))
        self.inputs.append(path)
        return synthdata.load_dataset(path)

    def load_checkpoint(self, path):
        path = self.require_file(path)
        self.inputs.append(path)
        return checkpoint_load(path.read_bytes())

    # Outputs

    def prepare_out(self, out_dir):
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CommandError(f'cannot create output directory {out_dir}: {exc.strerror}', returncode=EXIT_USAGE)
        self.out_dir = out_dir
        return out_dir

    def emit(self, path):
        self.outputs.append(Path(path))
        return path

    def finish(self, command, config, seeds):
        timing = {'seconds': round(time.perf_counter() - self.started, 3)}
        manifest = write_manifest(self.out_dir, command, config, seeds, self.inputs, self.outputs, timing)
        self.stdout.write(self.style.SUCCESS(f'{command}: wrote {len(self.outputs)} file(s), manifest {manifest}'))
        return manifest

    def dump_diagnostics(self, exc):
        target = (self.out_dir or Path(settings.UPL_RUNS_DIR)) / NUMERIC_DUMP
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            payload = json_safe({'error': str(exc), **exc.diagnostics})
            target.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
        except OSError:
            logger.exception('could not write numeric diagnostics to %s', target)
        return target
