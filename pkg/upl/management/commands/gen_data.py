from django.conf import settings
from django.core.management.base import CommandError

from upl.management.base import EXIT_USAGE, ExperimentCommand
from upl.utils import synthdata


class Command(ExperimentCommand):
    help = 'Generate the source/target dataset files of a synthetic benchmark'

    def add_arguments(self, parser):
        parser.add_argument('--out', default=None, help='output directory (default: UPL_DATA_DIR)')
        parser.add_argument('--benchmark', default=None, help='benchmark name (default: UPL_DEFAULT_BENCHMARK)')
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--config', default=None, help='experiment config; only its [data] section is used')
        parser.add_argument('--n-cases', type=int, default=None, help='cases per domain')

    def run(self, **options):
        data = self.experiment(options['config']).data
        name = options['benchmark'] or data.get('benchmark') or settings.UPL_DEFAULT_BENCHMARK
        if name not in synthdata.BENCHMARKS:
            raise CommandError(
                f'unknown benchmark {name!r}; choose from {", ".join(synthdata.BENCHMARKS)}',
                returncode=EXIT_USAGE,
            )
        bench = synthdata.BENCHMARKS[name]
        seed = next(s for s in (options['seed'], data.get('seed'), settings.UPL_SEED) if s is not None)
        n_cases = options['n_cases'] or data.get('n_cases') or bench.n_cases
        out = self.prepare_out(options['out'] or settings.UPL_DATA_DIR)

        for role, domain in (('source', bench.source), ('target', bench.target)):
            splits = synthdata.generate(domain, n_cases, bench.class_count, bench.ratios, seed)
            for split, dataset in zip(synthdata.SPLIT_NAMES, splits):
                path = out / synthdata.dataset_filename(role, split)
                try:
                    synthdata.save_dataset(dataset, path)
                except OSError as exc:
                    raise CommandError(f'cannot write {path}: {exc.strerror}', returncode=EXIT_USAGE)
                self.emit(path)

        config = {
            'benchmark': name,
            'class_count': bench.class_count,
            'n_cases': n_cases,
            'ratios': list(bench.ratios),
            'shift_strength': synthdata.shift_strength(bench.source, bench.target),
        }
        self.finish('gen_data', config, {'root_seed': seed})
