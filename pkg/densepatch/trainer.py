import collections
import csv
import io
import logging
import math
import pathlib

import attr
import humanfriendly
import numpy
import toml

from densepatch.architectures import Classifier, Connectivity
from densepatch.autodiff import OpKind, Tape, backward, register_backward
from densepatch.checkpoint import Checkpoint
from densepatch.errors import DataError, FormatError, NumericalError, ShapeError
from densepatch.layers import Mode
from densepatch.optimizers import OptimizerKind
import densepatch.dataset
import densepatch.metrics
import densepatch.optimizers
import densepatch.tensor

logger = logging.getLogger(__name__)

# probabilities are clamped to [BCE_EPSILON, 1 - BCE_EPSILON]
BCE_EPSILON = 1e-7

# derive_seed tags, so each random stream of a run is independent
VALIDATION_TAG = 2
EPOCH_TAG = 3
INIT_TAG = 4

TRAIN = 'train'
VALIDATION = 'validation'

def bce_loss(tape, scores, labels):
    """Sigmoid + binary cross-entropy over N x 1 raw scores, averaged over N."""
    z = tape.value(scores).data
    y = numpy.asarray(labels, dtype=numpy.float64).reshape(-1)
    if z.ndim != 2 or z.shape[1] != 1:
        raise ShapeError('bce_loss needs N x 1 scores, got {}'.format(list(z.shape)))
    if z.shape[0] != y.size:
        raise ShapeError('{} scores but {} labels'.format(z.shape[0], y.size))
    if y.size == 0:
        raise ShapeError('bce_loss over an empty batch')
    p = densepatch.tensor.sigmoid(z[:, 0].astype(numpy.float64))
    clamped = numpy.clip(p, BCE_EPSILON, 1 - BCE_EPSILON)
    loss = -numpy.mean(y * numpy.log(clamped) + (1 - y) * numpy.log(1 - clamped))
    # the clamp is flat, so clamped samples pass no gradient
    active = (p > BCE_EPSILON) & (p < 1 - BCE_EPSILON)
    return tape.record(OpKind.BCE, (scores,), numpy.array(loss, dtype=z.dtype), saved=dict(p=p, y=y, active=active))

@register_backward(OpKind.BCE)
def _bce_backward(node, grad, tape):
    z = tape.value(node.input_ids[0])
    p, y = node.saved['p'], node.saved['y']
    dz = numpy.where(node.saved['active'], (p - y) / y.size, 0.0) * float(numpy.asarray(grad).reshape(-1)[0])
    return [dz.reshape(-1, 1).astype(z.dtype)]

@attr.s(frozen=True)
class CurveRow:
    batches_processed = attr.ib(converter=int)
    split = attr.ib()
    loss = attr.ib(converter=float)

@attr.s(eq=True)
class CurveLog:
    rows = attr.ib(factory=list)

    def append(self, batches_processed, split, loss):
        if split not in (TRAIN, VALIDATION):
            raise ValueError('unknown curve split: {}'.format(split))
        previous = self.series(split)[0]
        if previous.size and batches_processed < previous[-1]:
            raise ValueError('{} rows must not go back in time: {} after {}'.format(split, batches_processed, int(previous[-1])))
        row = CurveRow(batches_processed, split, loss)
        self.rows.append(row)
        return row

    def series(self, split):
        """(batches_processed, loss) arrays for one split."""
        rows = [r for r in self.rows if r.split == split]
        return (
            numpy.array([r.batches_processed for r in rows], dtype=numpy.int64),
            numpy.array([r.loss for r in rows], dtype=numpy.float64),
        )

    def windowed_means(self, split=TRAIN, window=20):
        _, loss = self.series(split)
        if loss.size < window:
            raise DataError('{} {} rows, fewer than a window of {}'.format(loss.size, split, window))
        return numpy.convolve(loss, numpy.ones(window) / window, mode='valid')

    def quarter_slopes(self, split=TRAIN):
        """Least-squares loss slope over the first and the last quarter of rows."""
        x, loss = self.series(split)
        quarter = x.size // 4
        if quarter < 2:
            raise DataError('too few {} rows to fit slopes: {}'.format(split, x.size))
        early = numpy.polyfit(x[:quarter], loss[:quarter], 1)[0]
        late = numpy.polyfit(x[-quarter:], loss[-quarter:], 1)[0]
        return float(early), float(late)

    def dumps(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(['batches_processed', 'split', 'loss'])
        for r in self.rows:
            writer.writerow([r.batches_processed, r.split, repr(r.loss)])
        return out.getvalue()

    def save(self, path):
        with open(str(path), 'w', newline='') as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text):
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != ['batches_processed', 'split', 'loss']:
            raise FormatError('curve log must start with batches_processed,split,loss')
        log = cls()
        for line, row in enumerate(reader, start=2):
            try:
                batches, split, loss = row
                log.append(int(batches), split, float(loss))
            except ValueError as e:
                raise FormatError('bad curve log row {}: {}'.format(line, e))
        return log

    @classmethod
    def load(cls, path):
        with open(str(path), newline='') as f:
            return cls.loads(f.read())

def prepare(cfg):
    """Read the dataset and split it into (train, validation, test)."""
    if cfg.data is None:
        raise DataError('no dataset given')
    full = densepatch.dataset.read_ppak(cfg.data)
    h, w = cfg.model.input_hw
    if (full.height, full.width, full.channels) != (h, w, cfg.model.image_channels):
        raise ShapeError('model expects {}x{}x{} patches, dataset has {}x{}x{}'.format(
            h, w, cfg.model.image_channels, full.height, full.width, full.channels))
    train, test = densepatch.dataset.split(full, cfg.train_fraction, cfg.seed)
    train, validation = densepatch.dataset.split(train, 1 - cfg.validation_fraction, densepatch.dataset.derive_seed(cfg.seed, VALIDATION_TAG))
    if len(train) == 0 or len(validation) == 0:
        raise DataError('{} samples leave {} for training and {} for validation'.format(len(full), len(train), len(validation)))
    return train, validation, test

def train_step(model, batch, state):
    """One forward/backward/update on a batch; returns the batch loss."""
    tape = Tape()
    logits = model.forward(tape, tape.constant(batch.images), Mode.TRAIN)
    loss = bce_loss(tape, logits, batch.labels)
    value = tape.value(loss).item()
    if not math.isfinite(value):
        raise NumericalError('loss is {}'.format(value))
    grads = backward(tape, loss)
    densepatch.optimizers.step(model.params.trainable(), grads.named(), state)
    return value

def batch_loss(model, images, labels):
    tape = Tape()
    logits = model.forward(tape, tape.constant(images), Mode.EVAL)
    return tape.value(bce_loss(tape, logits, labels)).item()

def validation_loss(model, ds, batch_size):
    """Eval-mode loss over a whole dataset, weighted by batch size."""
    dtype = model.params['stem.conv.weight'].dtype.type
    total = 0.0
    for start in range(0, len(ds), batch_size):
        indices = numpy.arange(start, min(start + batch_size, len(ds)))
        images = densepatch.tensor.Tensor(ds.images(indices, dtype))
        total += batch_loss(model, images, ds.labels[indices]) * indices.size
    return total / len(ds)

def _prefetch_depth(cfg, ds, dtype):
    batch_bytes = cfg.batch_size * ds.height * ds.width * ds.channels * numpy.dtype(dtype).itemsize
    return max(1, cfg.prefetch_bytes // batch_bytes)

def fit(cfg, model, train, validation, state=None, callback=None, on_epoch=None):
    """Run the training loop over the train and validation splits only.

    `callback(batches_processed, loss)` is called after every optimizer
    step, `on_epoch(epoch, batches_processed, state)` after every epoch.
    """
    if state is None:
        state = cfg.optim_state()
    curve = CurveLog()
    dtype = model.params['stem.conv.weight'].dtype.type
    prefetch = cfg.prefetch and not cfg.deterministic
    depth = _prefetch_depth(cfg, train, dtype)
    batches = 0
    for epoch in range(cfg.epochs):
        timer = humanfriendly.Timer()
        seed = densepatch.dataset.derive_seed(cfg.seed, EPOCH_TAG, epoch)
        for batch in densepatch.dataset.batch_iter(train, cfg.batch_size, seed, prefetch=prefetch, depth=depth, dtype=dtype):
            try:
                loss = train_step(model, batch, state)
            except NumericalError as e:
                raise NumericalError('non-finite loss at batch {} (epoch {}): {}'.format(batches, epoch, e))
            batches += 1
            curve.append(batches, TRAIN, loss)
            if callback is not None:
                callback(batches, loss)
            if batches % cfg.validation_every == 0:
                vloss = validation_loss(model, validation, cfg.batch_size)
                if not math.isfinite(vloss):
                    raise NumericalError('non-finite validation loss after batch {}'.format(batches))
                curve.append(batches, VALIDATION, vloss)
                logger.info('batch %d: train loss %.4f, validation loss %.4f', batches, loss, vloss)
        logger.info('epoch %d done in %s (%s batches)', epoch, timer, humanfriendly.format_number(batches))
        if on_epoch is not None:
            on_epoch(epoch, batches, state)
    return state, curve

def predict(checkpoint, dataset, batch_size=256):
    """Eval-mode sigmoid scores for every sample of a dataset."""
    cfg = checkpoint.config
    h, w = cfg.input_hw
    if (dataset.height, dataset.width, dataset.channels) != (h, w, cfg.image_channels):
        raise ShapeError('checkpoint expects {}x{}x{} patches, dataset has {}x{}x{}'.format(
            h, w, cfg.image_channels, dataset.height, dataset.width, dataset.channels))
    model = checkpoint.model()
    dtype = model.params['stem.conv.weight'].dtype.type
    scores = []
    for start in range(0, len(dataset), batch_size):
        indices = numpy.arange(start, min(start + batch_size, len(dataset)))
        scores.append(model.scores(dataset.images(indices, dtype), batch_size))
    if not scores:
        raise DataError('cannot evaluate an empty dataset')
    return numpy.concatenate(scores)

def evaluate(checkpoint, dataset, batch_size=256, name=None, threshold=0.5):
    scores = predict(checkpoint, dataset, batch_size)
    name = name or checkpoint.config.connectivity.value
    result = densepatch.metrics.report(scores, dataset.labels, name, threshold)
    logger.info('%s: auc %.4f, accuracy %.4f over %s samples', name, result.auc_roc, result.accuracy, humanfriendly.format_number(len(dataset)))
    return result

def train(cfg, callback=None, datasets=None):
    """Split, train, checkpoint and evaluate; returns (Checkpoint, CurveLog, Report).

    The test split only reaches `evaluate`, after the loop has finished.
    The report is None when train_fraction leaves no test samples.
    """
    if datasets is None:
        datasets = prepare(cfg)
    train_ds, validation_ds, test_ds = datasets
    out = pathlib.Path(cfg.out) if cfg.out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    saved_threads = densepatch.tensor.num_threads()
    densepatch.tensor.set_num_threads(1 if cfg.deterministic else cfg.threads)
    try:
        model = Classifier.build(cfg.model, densepatch.dataset.derive_seed(cfg.seed, INIT_TAG))
        logger.info('training %s model with %s parameters on %s samples (%s validation)',
                    cfg.model.connectivity.value,
                    humanfriendly.format_number(model.params.count()),
                    humanfriendly.format_number(len(train_ds)),
                    humanfriendly.format_number(len(validation_ds)))

        def save_epoch(epoch, batches, state):
            if out is not None:
                Checkpoint(cfg.model, model.params, state, batches).save(out / 'epoch-{}.pckp'.format(epoch))

        state, curve = fit(cfg, model, train_ds, validation_ds, callback=callback, on_epoch=save_epoch)
        _, trained = curve.series(TRAIN)
        checkpoint = Checkpoint(cfg.model, model.params, state, len(trained))

        result = None
        if len(test_ds):
            result = evaluate(checkpoint, test_ds, cfg.batch_size)
        else:
            logger.warning('no test samples held out, skipping evaluation')
    finally:
        densepatch.tensor.set_num_threads(saved_threads)

    if out is not None:
        checkpoint.save(out / 'final.pckp')
        curve.save(out / 'curve.csv')
        if result is not None:
            result.save(out / 'report.toml')
    return checkpoint, curve, result

def compare(cfg, kinds=None, optimizers=None):
    """Train every connectivity x optimizer pair under the same protocol.

    Runs go to <out>/<connectivity>-<optimizer>/ and the table to
    <out>/comparison.toml.
    """
    kinds = [Connectivity(k) for k in (kinds or [c.value for c in Connectivity])]
    optimizers = [OptimizerKind(o) for o in (optimizers or [o.value for o in OptimizerKind])]
    datasets = prepare(cfg)
    out = pathlib.Path(cfg.out) if cfg.out is not None else None
    rows = []
    for kind in kinds:
        for opt in optimizers:
            name = '{}-{}'.format(kind.value, opt.value)
            logger.info('comparing %s', name)
            run = attr.evolve(
                cfg,
                model=attr.evolve(cfg.model, connectivity=kind),
                optimizer=opt,
                out=out / name if out is not None else None,
            )
            _, curve, result = train(run, datasets=datasets)
            _, vloss = curve.series(VALIDATION)
            row = collections.OrderedDict()
            row['model'] = name
            row['connectivity'] = kind.value
            row['optimizer'] = opt.value
            row['auc_roc'] = result.auc_roc if result else float('nan')
            row['accuracy'] = result.accuracy if result else float('nan')
            row['final_validation_loss'] = float(vloss[-1]) if vloss.size else float('nan')
            rows.append(row)
    if out is not None:
        with open(str(out / 'comparison.toml'), 'w') as f:
            toml.dump({'runs': rows}, f)
    return rows
