"""
Source pre-training, uncertainty-aware pseudo-label adaptation, inference and baselines.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses
from . import metrics
from . import pseudolabel as pl
from . import transforms as tf
from .model import SegModel, grow, parameter_groups
from .rng import SeedStreams
from .run_storage import json_safe

logger = logging.getLogger(__name__)

METHODS = ('upl', 'tent', 'ptbn', 'selftrain', 'source_only', 'finetune', 'target_only')
ABLATION_FLAGS = {
    'M': 'use_M',
    'TDG': 'use_TDG_dropout',
    'T': 'use_T',
    'TFS': 'use_TFS',
    'LMENT': 'use_Lment',
    'DICE': 'use_pseudo_dice',
}


class AdaptationError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AblationConfig:
    """
    Component switches; all on is the full method. With ``use_TFS`` off the pseudo
    labels come from the supervised pass itself. With ``use_pseudo_dice`` off no
    Dice term is left and only the entropy objective trains the model.
    """
    use_M: bool = True
    use_TDG_dropout: bool = True
    use_T: bool = True
    use_TFS: bool = True
    use_Lment: bool = True
    use_pseudo_dice: bool = True

    @classmethod
    def disabling(cls, names):
        """``names`` like ['M', 'TFS'] switch the matching components off."""
        changes = {}
        for name in names:
            key = name.strip().upper()
            if not key:
                continue
            if key not in ABLATION_FLAGS:
                raise AdaptationError(f'unknown ablation component {name!r}; expected one of {", ".join(ABLATION_FLAGS)}')
            changes[ABLATION_FLAGS[key]] = False
        return cls(**changes)

    @property
    def is_full(self):
        return all(asdict(self).values())


@dataclass(frozen=True)
class AdaptConfig:
    K: int = 4
    tau: float = 0.95
    lam: float = 1.0
    dropout_rate: float = 0.5
    lr_adapt: float = 1e-4
    adapt_epochs: int = 20
    pretrain_epochs: int = 400
    lr_pretrain: float = 0.01
    lr_decay: float = 0.9
    lr_decay_every: int = 4
    pretrain_batch_size: int = 8
    batch_mode: object = 'volume'
    finetune_epochs: int = 20
    seed: int = 42
    cleanup: bool = True
    same_pass_labels: bool = False
    val_tau: float = None
    method: str = 'upl'
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self, class_count=None):
        if self.K < 1:
            raise AdaptationError(f'K must be >= 1, got {self.K}')
        if self.method not in METHODS:
            raise AdaptationError(f'unknown method {self.method!r}')
        if self.lam < 0:
            raise AdaptationError(f'lambda must be >= 0, got {self.lam}')
        for name in ('lr_adapt', 'lr_pretrain', 'lr_decay'):
            if getattr(self, name) <= 0:
                raise AdaptationError(f'{name} must be positive, got {getattr(self, name)}')
        if not (self.batch_mode == 'volume' or (isinstance(self.batch_mode, int) and self.batch_mode > 0)):
            raise AdaptationError(f'batch_mode must be "volume" or a positive int, got {self.batch_mode!r}')
        low = 1.0 / class_count if class_count else 0.0
        for name in ('tau', 'val_tau'):
            value = getattr(self, name)
            if value is not None and not low < value < 1.0:
                raise AdaptationError(f'{name} must lie in ({low:g}, 1), got {value}')
        return self

    @property
    def inference_tau(self):
        return self.val_tau if self.val_tau is not None else self.tau

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    val_dice: dict
    val_mean: float
    reliability: float = None
    lr: float = None
    wall_time: float = 0.0

    def to_dict(self, include_time=False):
        record = asdict(self)
        record['val_dice'] = {str(k): v for k, v in self.val_dice.items()}
        if not include_time:
            record.pop('wall_time')
        return record


@dataclass
class TrainLog:
    name: str
    records: list = field(default_factory=list)
    best_epoch: int = None
    best_score: float = None
    optimizer_state: dict = field(default=None, repr=False)

    def add(self, record):
        self.records.append(record)
        logger.info(
            '%s epoch %d: %s val_dice=%.4f%s lr=%s',
            self.name, record.epoch,
            ' '.join(f'{k}={v:.4f}' for k, v in record.losses.items()),
            record.val_mean,
            '' if record.reliability is None else f' reliable={record.reliability:.3f}',
            record.lr,
        )

    def to_jsonl(self, include_time=False):
        records = (json_safe(r.to_dict(include_time)) for r in self.records)
        return ''.join(json.dumps(r, sort_keys=True, allow_nan=False) + '\n' for r in records)


class CheckpointSelector:
    """Keeps a snapshot of the model with the best validation score (earliest on ties)."""

    def __init__(self):
        self.best_epoch = None
        self.best_score = None
        self.best_model = None
        self.best_optimizer = None

    def offer(self, epoch, score, model, optimizer=None):
        if self.best_score is None or score > self.best_score:
            self.best_epoch, self.best_score = epoch, score
            self.best_model = model.clone()
            self.best_optimizer = optimizer.state_dict() if optimizer is not None else None
            return True
        return False

    def result(self, fallback):
        return self.best_model if self.best_model is not None else fallback.clone()


def iter_batches(data, batch_mode, rng=None):
    """Index arrays per batch: one per case ('volume') or fixed-size chunks; shuffled if rng is given."""
    if batch_mode == 'volume':
        batches = [idx for _, idx in data.cases()]
    else:
        order = np.arange(data.N)
        if rng is not None:
            order = rng.permutation(order)
        return [order[i:i + batch_mode] for i in range(0, data.N, batch_mode)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _check_finite(loss, diagnostics):
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f'non-finite {loss.name} loss ({value})', diagnostics)
    return value


def _param_norms(model):
    return {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters()}


# Inference

def forward_heads(model, x, mode, transforms, rng, dropout=True):
    """Per-head probabilities mapped back by the inverse transform of each head."""
    out = []
    for k, t in enumerate(transforms):
        p = model.forward_head(tf.apply(t, x), k, mode, rng, dropout=dropout)
        out.append(tf.apply(tf.inverse(t), p))
    return out


def infer_single(model, x, cleanup=True):
    """Head 0, identity transform, eval mode; label map [B,H,W]."""
    p = model.forward_head(x, 0, 'eval', None, dropout=False)
    labels = np.argmax(p.data, axis=1)
    return pl.cleanup_labels(labels, model.class_count) if cleanup else labels


def infer_ensemble(model, x, rng=None, tau=0.95, use_T=True, cleanup=True, transforms=None):
    """Transform-ensembled inference over all heads: (labels, mean probability, reliable fraction)."""
    if transforms is None:
        if use_T and rng is None:
            raise AdaptationError('ensemble inference with transforms needs an rng')
        transforms = [tf.sample(rng) if use_T else tf.IDENTITY for _ in range(model.K)]
    probs = forward_heads(model, x, 'eval', transforms, None, dropout=False)
    ens = pl.ensemble([p.data for p in probs])
    bundle = pl.make_pseudo_label(ens, tau, cleanup=cleanup)
    return bundle.labels, ens.mean, pl.reliability_fraction(bundle)


def evaluate_model(model, data, mode='ensemble', rng=None, tau=0.95, cleanup=True, method=''):
    """Per-case results over a labeled set."""
    results = []
    for case_id, idx in data.cases():
        x = data.images[idx]
        if mode == 'ensemble':
            labels, _, _ = infer_ensemble(model, x, rng=rng, tau=tau, cleanup=cleanup)
        elif mode == 'single':
            labels = infer_single(model, x, cleanup=cleanup)
        else:
            raise AdaptationError(f'unknown inference mode {mode!r}')
        results.append(metrics.evaluate_case(case_id, labels, data.labels[idx], data.class_count, method))
    return results


def validation_score(model, data, mode, rng, tau, cleanup):
    results = evaluate_model(model, data, mode=mode, rng=rng, tau=tau, cleanup=cleanup)
    per_class = {c: float(np.mean([r.dice[c] for r in results])) for c in range(1, data.class_count)}
    return metrics.mean_foreground_dice(results), per_class


# Supervised training

def train_supervised(model, train, val, epochs, schedule, streams, name, batch_size=8, cleanup=True):
    """Adam on the supervised Dice loss; returns the best-validation model and its log.

    Without a validation set the final model is returned.
    """
    if train.N == 0:
        raise AdaptationError(f'{name}: empty training set')
    if val is not None and val.N == 0:
        raise AdaptationError(f'{name}: empty validation set')
    model = model.clone()
    optimizer = ad.Adam(parameter_groups(model, 'all'), schedule.lr_at(0))
    data_rng = streams.child('data', 0)
    log = TrainLog(name)
    selector = CheckpointSelector()
    targets = pl.one_hot(train.labels, train.class_count, channel_axis=1)
    for epoch in range(epochs):
        started = time.perf_counter()
        optimizer.lr = schedule.lr_at(epoch)
        epoch_losses = []
        for idx in iter_batches(train, batch_size, data_rng):
            optimizer.zero_grad()
            with ad.Tape() as tape:
                p = model.forward_head(train.images[idx], 0, 'train', None, dropout=False)
                loss = losses.dice_loss_supervised(p, targets[idx])
                value = _check_finite(loss, {'run': name, 'epoch': epoch, 'dice': loss.item()})
                tape.backward(loss.value)
            optimizer.step()
            epoch_losses.append(value)
        if val is not None:
            score, per_class = validation_score(model, val, 'single', None, 0.95, cleanup)
            selector.offer(epoch, score, model, optimizer)
        else:
            score, per_class = float('nan'), {}
        log.add(EpochRecord(epoch, {'dice': float(np.mean(epoch_losses))}, per_class, score,
                            lr=optimizer.lr, wall_time=time.perf_counter() - started))
    if val is None:
        log.optimizer_state = optimizer.state_dict()
        return model, log
    log.best_epoch, log.best_score = selector.best_epoch, selector.best_score
    log.optimizer_state = selector.best_optimizer
    return selector.result(model), log


def pretrain(source_train, source_val, cfg, arch, streams=None):
    """Source-domain pre-training of a single-head model (dropout off)."""
    streams = streams or SeedStreams(cfg.seed)
    if source_train.N == 0 or source_val.N == 0:
        raise AdaptationError('pretrain needs non-empty source train and validation sets')
    model = SegModel.build(arch, source_train.class_count, streams['init'])
    schedule = ad.StepDecay(cfg.lr_pretrain, cfg.lr_decay, cfg.lr_decay_every)
    return train_supervised(model, source_train, source_val, cfg.pretrain_epochs, schedule, streams,
                            'pretrain', batch_size=cfg.pretrain_batch_size, cleanup=cfg.cleanup)


# Self-training

def adapt_step(model, optimizer, x, cfg, rngs, step):
    """One parameter update: pseudo-label pass, supervised pass, Adam step.

    ``rngs`` maps 'dropout' and 'transforms' to generators. Returns the loss
    values and the bundle used for supervision. Without TFS the pseudo labels
    come from the taped pass itself; without DICE only the entropy term is left.
    """
    ablation = cfg.ablation
    dropout = ablation.use_TDG_dropout
    same_pass = cfg.same_pass_labels or not ablation.use_TFS

    def draw():
        return [tf.sample(rngs['transforms']) if ablation.use_T else tf.IDENTITY for _ in range(model.K)]

    def labels_from(probs):
        ens = pl.ensemble([p.data for p in probs])
        bundle = pl.make_pseudo_label(ens, cfg.tau, cleanup=cfg.cleanup, step=step)
        if not ablation.use_M:
            bundle.reliability = np.ones_like(bundle.reliability)
        return bundle

    optimizer.zero_grad()
    bundle = None
    if not same_pass:
        # First pass: no tape, its outputs are constants for the second pass.
        first = forward_heads(model, x, 'train', draw(), rngs['dropout'], dropout)
        bundle = labels_from(first)

    with ad.Tape() as tape:
        heads = forward_heads(model, x, 'train', draw(), rngs['dropout'], dropout)
        if same_pass:
            bundle = labels_from(heads)
        if bundle.step != step:
            raise AdaptationError(f'pseudo labels from step {bundle.step} used at step {step}')
        ent = losses.mean_entropy(heads) if ablation.use_Lment else losses.per_head_entropy(heads)
        if ablation.use_pseudo_dice:
            sup = losses.tfs_loss(heads, bundle, K=model.K)
            total = losses.total_loss(sup, ent, cfg.lam)
        else:
            sup = None
            total = losses.LossValue(cfg.lam * ent.value, 'total')
        values = {
            'tfs': sup.item() if sup is not None else 0.0,
            'ment': ent.item(),
            'total': total.item(),
        }
        _check_finite(total, {'step': step, **values})
        tape.backward(total.value)
    optimizer.step()
    return values, bundle


def _self_train(pretrained, target_train, target_val, cfg, streams, name, observer=None):
    if target_train.N == 0:
        raise AdaptationError(f'{name}: unlabeled target training set is empty')
    if target_val is None or target_val.N == 0:
        raise AdaptationError(f'{name}: a labeled target validation set is required for checkpoint selection')
    cfg.validate(target_train.class_count)
    if pretrained.K not in (1, cfg.K):
        raise AdaptationError(f'{name}: model has {pretrained.K} heads, config asks for {cfg.K}')
    model = pretrained.clone()
    model.arch = replace(model.arch, dropout_rate=cfg.dropout_rate)
    if model.K == 1:
        model = grow(model, cfg.K)
    optimizer = ad.Adam(parameter_groups(model, 'all'), cfg.lr_adapt)
    rngs = {'dropout': streams['dropout'], 'transforms': streams['transforms']}
    data_rng = streams.child('data', 1)
    log = TrainLog(name)
    selector = CheckpointSelector()
    step = 0
    for epoch in range(cfg.adapt_epochs):
        started = time.perf_counter()
        totals = {'tfs': [], 'ment': [], 'total': []}
        fractions = []
        for i, idx in enumerate(iter_batches(target_train, cfg.batch_mode, data_rng)):
            step += 1
            try:
                values, bundle = adapt_step(model, optimizer, target_train.images[idx], cfg, rngs, step)
            except NumericError as exc:
                exc.diagnostics.update({'run': name, 'epoch': epoch, 'param_norms': _param_norms(model)})
                raise
            for key, value in values.items():
                totals[key].append(value)
            fractions.append(pl.reliability_fraction(bundle))
            if observer is not None and i == 0:
                observer(epoch, int(target_train.case_ids[idx[0]]), bundle)
        score, per_class = validation_score(
            model, target_val, 'ensemble', streams.child('val-transforms', epoch),
            cfg.inference_tau, cfg.cleanup,
        )
        selector.offer(epoch, score, model, optimizer)
        log.add(EpochRecord(epoch, {k: float(np.mean(v)) for k, v in totals.items()}, per_class, score,
                            reliability=float(np.mean(fractions)), lr=optimizer.lr,
                            wall_time=time.perf_counter() - started))
    log.best_epoch, log.best_score = selector.best_epoch, selector.best_score
    log.optimizer_state = selector.best_optimizer
    return selector.result(model), log


def adapt_upl(pretrained, target_train, target_val, cfg, streams=None, observer=None):
    """Target Domain Growing + twice-forward-pass supervision + mean-prediction entropy."""
    if cfg.method != 'upl':
        raise AdaptationError(f'adapt_upl called with method {cfg.method!r}')
    return _self_train(pretrained, target_train, target_val, cfg, streams or SeedStreams(cfg.seed), 'upl', observer)


def selftrain_config(cfg):
    """Single head, no perturbations, same-pass unweighted pseudo labels, Dice + entropy."""
    return replace(
        cfg, K=1, same_pass_labels=True, method='selftrain',
        ablation=AblationConfig(use_M=False, use_TDG_dropout=False, use_T=False, use_TFS=False, use_Lment=False),
    )


def baseline_selftrain(pretrained, target_train, target_val, cfg, streams=None, observer=None):
    return _self_train(pretrained, target_train, target_val, selftrain_config(cfg),
                       streams or SeedStreams(cfg.seed), 'selftrain', observer)


def baseline_ptbn(pretrained, target_train, cfg):
    """Refresh batch-norm running statistics on target images; no gradient steps."""
    model = pretrained.clone()
    for idx in iter_batches(target_train, cfg.batch_mode):
        x = target_train.images[idx]
        for k in range(model.K):
            model.forward_head(x, k, 'train', None, dropout=False)
    return model


def baseline_tent(pretrained, target_train, target_val, cfg, streams=None):
    """Adam on the batch-norm affine parameters only, minimizing prediction entropy."""
    streams = streams or SeedStreams(cfg.seed)
    if target_train.N == 0:
        raise AdaptationError('tent: unlabeled target training set is empty')
    model = pretrained.clone()
    optimizer = ad.Adam(parameter_groups(model, 'bn_affine_only'), cfg.lr_adapt)
    data_rng = streams.child('data', 1)
    log = TrainLog('tent')
    selector = CheckpointSelector()
    for epoch in range(cfg.adapt_epochs):
        started = time.perf_counter()
        epoch_losses = []
        for idx in iter_batches(target_train, cfg.batch_mode, data_rng):
            model.zero_grad()
            with ad.Tape() as tape:
                p = model.forward_head(target_train.images[idx], 0, 'train', None, dropout=False)
                loss = losses.per_head_entropy([p])
                epoch_losses.append(_check_finite(loss, {'run': 'tent', 'epoch': epoch}))
                tape.backward(loss.value)
            optimizer.step()
        if target_val is not None and target_val.N:
            score, per_class = validation_score(model, target_val, 'single', None, cfg.inference_tau, cfg.cleanup)
            selector.offer(epoch, score, model, optimizer)
        else:
            score, per_class = float('nan'), {}
        log.add(EpochRecord(epoch, {'ent': float(np.mean(epoch_losses))}, per_class, score,
                            lr=optimizer.lr, wall_time=time.perf_counter() - started))
    log.best_epoch, log.best_score = selector.best_epoch, selector.best_score
    log.optimizer_state = selector.best_optimizer if selector.best_optimizer is not None else optimizer.state_dict()
    return selector.result(model), log


def baseline_finetune(pretrained, labeled_target, target_val, cfg, streams=None):
    """Supervised fine-tuning of the pre-trained model on labeled target images."""
    streams = streams or SeedStreams(cfg.seed)
    if cfg.finetune_epochs == 0:
        return pretrained.clone(), TrainLog('finetune')
    schedule = ad.StepDecay(cfg.lr_pretrain, cfg.lr_decay, cfg.lr_decay_every)
    return train_supervised(pretrained, labeled_target, target_val, cfg.finetune_epochs, schedule, streams,
                            'finetune', batch_size=cfg.pretrain_batch_size, cleanup=cfg.cleanup)


def baseline_target_only(labeled_target, target_val, cfg, arch, streams=None):
    """Supervised training from a fresh initialization on labeled target images."""
    streams = streams or SeedStreams(cfg.seed)
    model = SegModel.build(arch, labeled_target.class_count, streams['init'])
    schedule = ad.StepDecay(cfg.lr_pretrain, cfg.lr_decay, cfg.lr_decay_every)
    return train_supervised(model, labeled_target, target_val, cfg.pretrain_epochs, schedule, streams,
                            'target_only', batch_size=cfg.pretrain_batch_size, cleanup=cfg.cleanup)
