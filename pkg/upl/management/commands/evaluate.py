from pathlib import Path

from django.core.management.base import CommandError

from upl.management.base import EXIT_DATA, ExperimentCommand
from upl.utils import adaptation, metrics, synthdata
from upl.utils.model import grow
from upl.utils.rng import SeedStreams
from upl.utils.run_storage import read_results_csv, write_results_csv, write_summary_csv


def paired_rows(results, baseline):
    """One t-test row per class (and the foreground mean) over cases present in both runs."""
    if not results:
        raise metrics.MetricError('nothing to compare: the evaluation produced no cases')
    methods = sorted({r.method for r in baseline})
    if len(methods) > 1:
        raise metrics.MetricError(f'baseline CSV mixes methods {", ".join(methods)}; pass a single-method file')
    ours = {r.case_id: r for r in results}
    theirs = {r.case_id: r for r in baseline}
    shared = sorted(set(ours) & set(theirs))
    if not shared:
        raise metrics.MetricError('baseline CSV shares no case ids with this evaluation')
    method = f'{results[0].method} vs {baseline[0].method}'
    rows = []
    for c in sorted(ours[shared[0]].dice) + ['mean']:
        if c == 'mean':
            a = [sum(ours[i].dice.values()) / len(ours[i].dice) for i in shared]
            b = [sum(theirs[i].dice.values()) / len(theirs[i].dice) for i in shared]
        else:
            a = [ours[i].dice[c] for i in shared]
            b = [theirs[i].dice[c] for i in shared]
        t, p = metrics.paired_t_test(a, b)
        rows.append({'method': method, 'class': c, 'n': len(shared), 't_stat': t, 'p_value': p})
    return rows


class Command(ExperimentCommand):
    help = 'Score a checkpoint on a labeled dataset file; per-case CSV plus summary'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--data', required=True, help='dataset file, e.g. target_test.upld')
        parser.add_argument('--mode', choices=['ensemble', 'single'], default='ensemble')
        parser.add_argument('--out', required=True, help='per-case CSV path')
        parser.add_argument('--config', default=None)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--method', default=None, help='method label in the CSV (default: from the checkpoint)')
        parser.add_argument('--baseline', default=None, help='per-case CSV of another method for a paired t-test')

    def run(self, **options):
        cfg = self.experiment(options['config'], options['seed']).adapt
        model, _, meta = self.load_checkpoint(options['checkpoint'])
        data_path = self.require_file(options['data'])
        self.inputs.append(data_path)
        data = synthdata.load_dataset(data_path)
        if model.class_count != data.class_count:
            raise CommandError(
                f'checkpoint has {model.class_count} classes, {data_path} has {data.class_count}',
                returncode=EXIT_DATA,
            )
        cfg.validate(data.class_count)

        mode = options['mode']
        label = options['method'] or meta.get('method', 'model')
        if mode == 'single':
            label = f'{label}-single'
        if mode == 'ensemble' and model.K == 1 and cfg.K > 1:
            # identical heads; the ensemble then varies only the spatial transforms
            model = grow(model, cfg.K)
        streams = SeedStreams(cfg.seed)
        results = adaptation.evaluate_model(
            model, data, mode=mode, rng=streams.child('eval-transforms'),
            tau=cfg.inference_tau, cleanup=cfg.cleanup, method=label,
        )

        out = Path(options['out'])
        self.prepare_out(out.parent)
        self.emit(write_results_csv(out, results))
        extra = []
        if options['baseline']:
            baseline_path = self.require_file(options['baseline'])
            self.inputs.append(baseline_path)
            extra = paired_rows(results, read_results_csv(baseline_path))
        summary = metrics.aggregate(results)
        self.emit(write_summary_csv(out.with_name(f'{out.stem}_summary.csv'), summary, extra))

        for row in summary:
            if row['class'] == 'mean':
                self.stdout.write(f"{label}: mean foreground Dice {row['dice_mean']:.4f} over {row['n']} case(s)")
        self.finish(f'evaluate-{out.stem}', {**cfg.to_dict(), 'mode': mode, 'method': label}, streams.describe())
