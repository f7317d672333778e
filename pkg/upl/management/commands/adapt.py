from dataclasses import asdict, replace

from django.conf import settings
from django.core.management.base import CommandError

from upl.management.base import EXIT_DATA, EXIT_USAGE, ExperimentCommand
from upl.utils import adaptation
from upl.utils.model import checkpoint_save
from upl.utils.pseudolabel import export_pgm
from upl.utils.rng import SeedStreams
from upl.utils.run_storage import write_rows_csv, write_text

# command-line name -> AdaptConfig.method
METHODS = {
    'upl': 'upl',
    'tent': 'tent',
    'ptbn': 'ptbn',
    'selftrain': 'selftrain',
    'finetune-train': 'finetune',
    'finetune-valid': 'finetune',
    'target-only': 'target_only',
}


class Command(ExperimentCommand):
    help = 'Adapt a pre-trained model to the target domain, or run one of the baselines'

    def add_arguments(self, parser):
        parser.add_argument('--method', choices=sorted(METHODS), default='upl')
        parser.add_argument('--checkpoint', default=None, help='pre-trained checkpoint (not used by target-only)')
        parser.add_argument('--data', default=None, help='dataset directory (default: UPL_DATA_DIR)')
        parser.add_argument('--config', default=None)
        parser.add_argument('--out', default=None, help='output directory (default: UPL_RUNS_DIR/<method>)')
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--ablate', default='',
                            help='comma-separated components to switch off: M,TDG,T,TFS,LMENT,DICE')
        parser.add_argument('--dump-pgm', action='store_true',
                            help='write pseudo-label and reliability maps of the first target case per epoch')

    def run(self, **options):
        name = options['method']
        exp = self.experiment(options['config'], options['seed'])
        cfg = replace(exp.adapt, method=METHODS[name])
        if options['ablate']:
            if name != 'upl':
                raise CommandError(f'--ablate only applies to --method upl, not {name}', returncode=EXIT_USAGE)
            disabled = adaptation.AblationConfig.disabling(options['ablate'].split(','))
            off = {flag: False for flag, on in asdict(disabled).items() if not on}
            cfg = replace(cfg, ablation=replace(cfg.ablation, **off))
        if options['dump_pgm'] and name not in ('upl', 'selftrain'):
            raise CommandError('--dump-pgm needs a pseudo-label method (upl or selftrain)', returncode=EXIT_USAGE)

        data_dir = options['data'] or settings.UPL_DATA_DIR
        train = self.load_split(data_dir, 'target', 'train')
        val = self.load_split(data_dir, 'target', 'val')
        cfg.validate(train.class_count)

        pretrained = None
        if name != 'target-only':
            if options['checkpoint'] is None:
                raise CommandError(f'--method {name} needs --checkpoint', returncode=EXIT_USAGE)
            pretrained, _, _ = self.load_checkpoint(options['checkpoint'])
            if pretrained.class_count != train.class_count:
                raise CommandError(
                    f'checkpoint has {pretrained.class_count} classes, target data has {train.class_count}',
                    returncode=EXIT_DATA,
                )

        out = self.prepare_out(options['out'] or settings.UPL_RUNS_DIR / name)
        streams = SeedStreams(cfg.seed)
        observer = self.pgm_observer(out, train.class_count) if options['dump_pgm'] else None

        log = None
        if name == 'upl':
            model, log = adaptation.adapt_upl(pretrained, train.unlabeled(), val, cfg, streams, observer)
        elif name == 'selftrain':
            model, log = adaptation.baseline_selftrain(pretrained, train.unlabeled(), val, cfg, streams, observer)
        elif name == 'tent':
            model, log = adaptation.baseline_tent(pretrained, train.unlabeled(), val, cfg, streams)
        elif name == 'ptbn':
            model = adaptation.baseline_ptbn(pretrained, train.unlabeled(), cfg)
        elif name == 'finetune-train':
            model, log = adaptation.baseline_finetune(pretrained, train, val, cfg, streams)
        elif name == 'finetune-valid':
            # the validation split is the training data here, so the final epoch is kept
            model, log = adaptation.baseline_finetune(pretrained, val, None, cfg, streams)
        else:
            model, log = adaptation.baseline_target_only(train, val, cfg, exp.arch, streams)

        meta = {
            'method': name,
            'epoch': log.best_epoch if log is not None else None,
            'val_dice': log.best_score if log is not None else None,
            'seeds': streams.describe(),
            'ablation': asdict(cfg.ablation),
        }
        optimizer_state = log.optimizer_state if log is not None else None
        checkpoint = out / f'{name}.uplc'
        checkpoint.write_bytes(checkpoint_save(model, optimizer_state, meta))
        self.emit(checkpoint)
        if log is not None:
            self.emit(write_text(out / f'{name}_log.jsonl', log.to_jsonl()))
            fractions = [{'epoch': r.epoch, 'reliability': r.reliability} for r in log.records
                         if r.reliability is not None]
            if fractions:
                self.emit(write_rows_csv(out / f'{name}_reliability.csv', ['epoch', 'reliability'], fractions))
            if log.best_score is not None:
                self.stdout.write(f'best target-val Dice {log.best_score:.4f} at epoch {log.best_epoch}')
        self.finish(f'adapt-{name}', cfg.to_dict(), streams.describe())

    def pgm_observer(self, out, class_count):
        pgm_dir = out / 'pgm'
        pgm_dir.mkdir(exist_ok=True)

        def observe(epoch, case_id, bundle):
            middle = bundle.labels.shape[0] // 2
            stem = f'epoch{epoch:03d}_case{case_id}'
            self.emit(export_pgm(bundle.labels[middle], pgm_dir / f'{stem}_label.pgm', class_count))
            self.emit(export_pgm(bundle.reliability[middle], pgm_dir / f'{stem}_reliability.pgm'))

        return observe
