from dataclasses import replace

from django.conf import settings
from django.core.management.base import CommandError

from upl.management.base import EXIT_DATA, ExperimentCommand
from upl.utils import adaptation
from upl.utils.config import apply_grid_point, expand_grid, parse_grid
from upl.utils.rng import SeedStreams
from upl.utils.run_storage import write_rows_csv

RESULT_NAME = 'sweep.csv'


class Command(ExperimentCommand):
    help = 'Sweep adaptation hyper-parameters; one CSV row of target-validation Dice per grid point'

    def add_arguments(self, parser):
        parser.add_argument('--grid', nargs='+', default=[],
                            help='axes like K=1..5 tau=0.8,0.9,0.95 lambda=0.1,1 ablate=none,M,TFS+LMENT')
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--data', default=None, help='dataset directory (default: UPL_DATA_DIR)')
        parser.add_argument('--config', default=None)
        parser.add_argument('--out', default=None, help='output directory (default: UPL_RUNS_DIR/ablate)')
        parser.add_argument('--seed', type=int, default=None)

    def run(self, **options):
        axes = parse_grid(options['grid'])
        points = expand_grid(axes)
        base = replace(self.experiment(options['config'], options['seed']).adapt, method='upl')

        data_dir = options['data'] or settings.UPL_DATA_DIR
        train = self.load_split(data_dir, 'target', 'train')
        val = self.load_split(data_dir, 'target', 'val')
        pretrained, _, _ = self.load_checkpoint(options['checkpoint'])
        if pretrained.class_count != train.class_count:
            raise CommandError(
                f'checkpoint has {pretrained.class_count} classes, target data has {train.class_count}',
                returncode=EXIT_DATA,
            )
        if pretrained.K != 1:
            raise CommandError('ablate sweeps K, so it needs a single-head pre-trained checkpoint', returncode=EXIT_DATA)
        out = self.prepare_out(options['out'] or settings.UPL_RUNS_DIR / 'ablate')

        classes = list(range(1, train.class_count))
        rows = []
        for i, point in enumerate(points):
            cfg = apply_grid_point(base, point).validate(train.class_count)
            self.stdout.write(f'[{i + 1}/{len(points)}] {point}')
            streams = SeedStreams(cfg.seed)
            model, log = adaptation.adapt_upl(pretrained, train.unlabeled(), val, cfg, streams)
            results = adaptation.evaluate_model(
                model, val, mode='ensemble', rng=streams.child('eval-transforms'),
                tau=cfg.inference_tau, cleanup=cfg.cleanup, method='upl',
            )
            row = {key: point[key] for key, _ in axes}
            row['best_epoch'] = log.best_epoch
            for c in classes:
                row[f'dice_{c}'] = sum(r.dice[c] for r in results) / len(results)
            row['dice_mean'] = sum(row[f'dice_{c}'] for c in classes) / len(classes)
            rows.append(row)

        fields = [key for key, _ in axes] + ['best_epoch'] + [f'dice_{c}' for c in classes] + ['dice_mean']
        self.emit(write_rows_csv(out / RESULT_NAME, fields, rows))
        self.finish('ablate', {'grid': options['grid'], 'base': base.to_dict()}, {'root_seed': base.seed})
