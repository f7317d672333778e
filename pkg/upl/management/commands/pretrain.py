from django.conf import settings

from upl.management.base import ExperimentCommand
from upl.utils import adaptation
from upl.utils.model import checkpoint_save
from upl.utils.rng import SeedStreams
from upl.utils.run_storage import write_text

CHECKPOINT_NAME = 'pretrained.uplc'
LOG_NAME = 'pretrain_log.jsonl'


class Command(ExperimentCommand):
    help = 'Pre-train a single-head model on the labeled source domain'

    def add_arguments(self, parser):
        parser.add_argument('--data', default=None, help='dataset directory (default: UPL_DATA_DIR)')
        parser.add_argument('--config', default=None)
        parser.add_argument('--out', default=None, help='output directory (default: UPL_RUNS_DIR/pretrain)')
        parser.add_argument('--seed', type=int, default=None)

    def run(self, **options):
        exp = self.experiment(options['config'], options['seed'])
        cfg = exp.adapt
        data_dir = options['data'] or settings.UPL_DATA_DIR
        train = self.load_split(data_dir, 'source', 'train')
        val = self.load_split(data_dir, 'source', 'val')
        cfg.validate(train.class_count)
        out = self.prepare_out(options['out'] or settings.UPL_RUNS_DIR / 'pretrain')

        streams = SeedStreams(cfg.seed)
        model, log = adaptation.pretrain(train, val, cfg, exp.arch, streams)

        meta = {
            'method': 'pretrain',
            'epoch': log.best_epoch,
            'val_dice': log.best_score,
            'seeds': streams.describe(),
            'domain': train.domain,
        }
        checkpoint = out / CHECKPOINT_NAME
        checkpoint.write_bytes(checkpoint_save(model, log.optimizer_state, meta))
        self.emit(checkpoint)
        self.emit(write_text(out / LOG_NAME, log.to_jsonl()))
        if log.best_score is not None:
            self.stdout.write(f'best source-val Dice {log.best_score:.4f} at epoch {log.best_epoch}')
        self.finish('pretrain', cfg.to_dict(), streams.describe())
