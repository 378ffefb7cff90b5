# This file is part of ViACT.
# Copyright (c) 2026 ViACT developers
#
# ViACT is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# ViACT is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with ViACT.  If not, see <http://www.gnu.org/licenses/>.

"""
Pre-training and fine-tuning loops, the learning rate schedule and the block-wise
protocol for tracking clips longer than the model window.
"""

import math
import logging
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import viact
from viact import numerics as nx
from viact import metrics
from viact.exceptions import UsageError
from viact.geometry import Clip, PointTrajectorySet
from viact.mae import AnatomicalMAE, sample_mask, mae_forward
from viact.model import tracking_loss, classification_loss, ef_loss
from viact.utils import rng_stream, get_rng_state, set_rng_state, worker_count, write_jsonl, read_jsonl


log = logging.getLogger(__name__)

LR_REFERENCE_BATCH = 256.0
RNG_STREAMS = ('data', 'mask')

# metric and direction used to pick the best epoch
BEST_METRIC = {
    viact.TASK_PRETRAIN: ('loss', min),
    viact.TASK_TRACK: ('me', min),
    viact.TASK_CLASSIFY: ('accuracy', max),
    viact.TASK_EF: ('me', min),
}


# Learning rate

class Schedule(object):

    """
    Linear warmup followed by a half cosine to zero. Epoch counts are converted to
    optimizer steps with `steps_per_epoch`.
    """

    FIELDS = ('base_lr', 'batch_size', 'warmup_epochs', 'total_epochs', 'steps_per_epoch')

    def __init__(self, base_lr=1.5e-4, batch_size=16, warmup_epochs=5, total_epochs=50, steps_per_epoch=1):
        self.base_lr = float(base_lr)
        self.batch_size = int(batch_size)
        self.warmup_epochs = int(warmup_epochs)
        self.total_epochs = int(total_epochs)
        self.steps_per_epoch = int(steps_per_epoch)

        self.validate()

    def validate(self):
        if self.base_lr < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise UsageError('Schedule needs base_lr >= 0, batch_size >= 1 and steps_per_epoch >= 1.')

        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise UsageError('Warmup of {} epochs does not fit in {} epochs.'.format(
                self.warmup_epochs, self.total_epochs))

    @property
    def peak_lr(self):
        return self.base_lr * self.batch_size / LR_REFERENCE_BATCH

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch

    def as_dict(self):
        return OrderedDict((name, getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def from_dict(cls, values):
        return cls(**dict((name, values[name]) for name in cls.FIELDS if name in values))

    def __str__(self):
        return '<Schedule:lr=%g,batch=%d,%d/%d>' % (self.base_lr, self.batch_size, self.warmup_epochs,
                                                    self.total_epochs)


def effective_lr(step, schedule):
    """
    Learning rate at optimizer step `step`: base_lr * batch / 256 scaled by a linear
    ramp over the warmup steps and a half cosine over the rest.

    :Args:
      - step: Step index, 0 <= step
      - schedule: Instance of Schedule

    :Returns:
      Learning rate (float), 0 at step 0 and from the last step on.
    """
    if step < 0:
        raise UsageError('Step must not be negative, got {}.'.format(step))

    warmup = schedule.warmup_steps
    total = schedule.total_steps
    peak = schedule.peak_lr

    if step >= total:
        return 0.0

    if step < warmup:
        return peak * step / float(warmup)

    progress = (step - warmup) / float(total - warmup)

    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# Reports

class MetricReport(object):

    """
    One record per epoch: task, seed, epoch, step, learning rate, training loss and the
    validation metrics of the task.
    """

    def __init__(self, task, seed, records=None):
        self.task = task
        self.seed = seed
        self.records = list(records or [])

    def add(self, epoch, step, lr, loss, values):
        record = OrderedDict()
        record['task'] = self.task
        record['seed'] = self.seed
        record['epoch'] = epoch
        record['step'] = step
        record['lr'] = lr
        record['loss'] = loss

        for name in sorted(values):
            record['val_' + name] = values[name]

        self.records.append(record)
        return record

    def column(self, name):
        return [record[name] for record in self.records if name in record]

    def last(self):
        return self.records[-1] if self.records else None

    def write(self, path):
        write_jsonl(path, self.records)

    @classmethod
    def read(cls, path):
        records = read_jsonl(path)

        if not records:
            return cls(None, None)

        return cls(records[0]['task'], records[0]['seed'], records)

    def __len__(self):
        return len(self.records)

    def __str__(self):
        return '<MetricReport:%s:%d>' % (self.task, len(self.records))


# Windows

def window_span(length, stride):
    return (length - 1) * stride + 1


def sample_window(sample, length, strides, rng):
    """
    Random window of `length` frames with a random start and a stride drawn from
    `strides`. Returns None, with a warning, when the clip cannot hold the window at
    the largest stride.
    """
    frames = sample.clip.frame_count

    if frames < window_span(length, max(strides)):
        warnings.warn('Skipping {}: {} frames is too short for a {} frame window at stride {}.'.format(
            sample.sample_id, frames, length, max(strides)))
        return None

    stride = int(strides[rng.integers(len(strides))])
    start = int(rng.integers(frames - window_span(length, stride) + 1))

    return sample.clip.window(start, stride, length), sample.points.window(start, stride, length)


def first_window(sample, length):
    "Frames 0 .. length-1 at stride 1, the window used for evaluation."
    if sample.clip.frame_count < length:
        warnings.warn('Skipping {}: {} frames is shorter than the {} frame window.'.format(
            sample.sample_id, sample.clip.frame_count, length))
        return None

    return sample.clip.window(0, 1, length), sample.points.window(0, 1, length)


# Block-wise tracking

def track_long(model, clip, queries, block=None, refine_passes=0):
    """
    Tracks query points through a clip of any length with windows of `block` frames.
    Consecutive windows share one frame: the final predictions of a window are the
    queries of the next. A short last window is padded by repeating the final frame
    and the padded predictions are dropped.

    :Args:
      - model: Instance of ViACT
      - clip: Instance of Clip, at least 2 frames
      - queries: Array N x 2 or PointTrajectorySet whose first frame is used
      - block: Window length (optional, the model frame count by default)
      - refine_passes: Refinement passes per window (optional)

    :Returns:
      Instance of PointTrajectorySet covering every frame of the clip.
    """
    block = block or model.config.frames
    frames = clip.frame_count

    if frames < 2:
        raise UsageError('track_long needs at least 2 frames, got {}.'.format(frames))

    if not 2 <= block <= model.config.frames:
        raise UsageError('Block length must lie in [2, {}], got {}.'.format(model.config.frames, block))

    if isinstance(queries, PointTrajectorySet):
        apex = queries.apex_index
        current = queries.coords[0]
    else:
        apex = None
        current = np.asarray(queries, dtype=np.float32)

    if frames <= block:
        start_points = PointTrajectorySet(current[np.newaxis], apex)
        return model.track(clip, start_points, refine_passes)

    out = np.empty((frames, current.shape[0], 2), dtype=np.float32)
    start = 0

    while True:
        end = min(start + block, frames)
        window = Clip(clip.frames[start:end]).padded(block)

        predicted = model.track(window, PointTrajectorySet(current[np.newaxis], apex), refine_passes).coords

        first = 0 if start == 0 else 1
        out[start + first:end] = predicted[first:end - start]

        log.debug('Tracked frames {}..{}.'.format(start, end - 1))

        if end >= frames:
            break

        current = predicted[end - 1 - start]
        start = end - 1

    return PointTrajectorySet(out, apex)


# Training

def trainable_split(params):
    "Names of parameters that skip weight decay: biases, norms and other vectors."
    return [name for name, p in params.items() if p.ndim < 2]


class Trainer(object):

    """
    Optimisation loop for one task.

    Each step accumulates the gradient of loss / B over a batch of B samples and applies
    one AdamW update with the scheduled learning rate of the next step. Hooks of the
    plugins in options['plugins'] run around training, epochs and steps.
    """

    DEFAULT_OPTIONS = {
        'plugins': [],
        'log_every': 10,
        'strides': (1, 2, 3),
        'refine_passes': 0,
        'mask_ratio': viact.DEFAULT_MASK_RATIO,
        'workers': None,
        'restore_best': True
    }

    def __init__(self, task, model, schedule, seed=0, mae=None, options=None):
        """
        :Args:
          - task: One of pretrain, track, classify, ef
          - model: Instance of ViACT
          - schedule: Instance of Schedule
          - seed: Run seed (optional)
          - mae: AnatomicalMAE wrapping `model`, required for pretrain
          - options: Options overriding DEFAULT_OPTIONS (optional)
        """
        if task not in BEST_METRIC:
            raise UsageError('Cannot train task "{}".'.format(task))

        if task == viact.TASK_PRETRAIN and mae is None:
            raise UsageError('Pre-training needs an AnatomicalMAE.')

        self.task = task
        self.model = model
        self.mae = mae
        self.schedule = schedule
        self.seed = seed

        self.options = dict(self.DEFAULT_OPTIONS)
        if options:
            self.options.update(options)

        self.params = (mae if task == viact.TASK_PRETRAIN else model).named_parameters()
        self.optimizer = nx.AdamW(self.params, no_decay=trainable_split(self.params))

        self.rngs = OrderedDict((name, rng_stream(seed, name)) for name in RNG_STREAMS)
        self.step = 0
        self.epoch = 0
        self.report = MetricReport(task, seed)

        self.best_value = None
        self.best_epoch = None
        self.best_state = None

    @property
    def window(self):
        return self.model.config.frames

    def _plugins(self, hook, *args):
        for plg in self.options.get('plugins', []):
            if hasattr(plg, hook):
                getattr(plg, hook)(self, *args)

    # losses

    def sample_loss(self, clip, points, sample):
        "Loss of one window; builds the graph."
        if self.task == viact.TASK_PRETRAIN:
            plan = sample_mask(points.frames * points.points, self.options['mask_ratio'], self.rngs['mask'])
            loss, _ = mae_forward(self.mae, clip, points, plan)
            return loss

        if self.task == viact.TASK_TRACK:
            initial = points.static()
            output = self.model.forward(clip, initial)
            delta = self.model.tracking_head(output, points.frames, points.points)
            return tracking_loss(delta, initial, points)

        output = self.model.forward(clip, points)

        if self.task == viact.TASK_CLASSIFY:
            return classification_loss(self.model.classification_head(output), sample.label)

        return ef_loss(self.model.ef_head(output), sample.ef_fraction)

    def train_step(self, batch):
        """
        One optimizer step over a list of samples.

        :Returns:
          Mean loss of the batch, None when every sample was skipped.
        """
        windows = []
        for sample in batch:
            window = sample_window(sample, self.window, self.options['strides'], self.rngs['data'])
            if window is not None:
                windows.append((window, sample))

        if not windows:
            return None

        self.optimizer.zero_grad()
        scale = 1.0 / len(windows)
        total = 0.0

        for (clip, points), sample in windows:
            loss = self.sample_loss(clip, points, sample)
            total += loss.item()
            nx.backward(loss * scale)

        lr = effective_lr(self.step + 1, self.schedule)

        if lr > 0:
            self.optimizer.step(lr)
        else:
            log.debug('Step {} has learning rate 0, update skipped.'.format(self.step + 1))

        self.step += 1

        return total * scale

    def train_epoch(self, samples):
        size = self.schedule.batch_size
        order = self.rngs['data'].permutation(len(samples))
        losses = []

        for start in range(0, len(samples), size):
            batch = [samples[n] for n in order[start:start + size]]
            loss = self.train_step(batch)

            if loss is None:
                continue

            losses.append(loss)
            self._plugins('after_step', self.step, loss)

            if self.step % self.options['log_every'] == 0:
                log.debug('{} step {}: loss {:.6f}.'.format(self.task, self.step, loss))

        return float(np.mean(losses)) if losses else float('nan')

    # evaluation

    def _evaluate_one(self, sample):
        window = first_window(sample, self.window)
        if window is None:
            return None

        clip, points = window

        with nx.no_grad():
            if self.task == viact.TASK_PRETRAIN:
                rng = rng_stream(self.seed, 'eval-mask-{}'.format(sample.sample_id))
                plan = sample_mask(points.frames * points.points, self.options['mask_ratio'], rng)
                loss, _ = self.mae(clip, points, plan)
                return {'loss': loss.item()}

            if self.task == viact.TASK_TRACK:
                predicted = self.model.track(clip, points, self.options['refine_passes'])
                return {'pred': predicted.coords, 'gt': points.coords}

            output = self.model.forward(clip, points)

            if self.task == viact.TASK_CLASSIFY:
                logit = self.model.classification_head(output)
                return {'logit': logit.item(), 'label': sample.label,
                        'loss': classification_loss(logit, sample.label).item()}

            pred = self.model.ef_head(output)
            return {'pred': pred.item(), 'gt': sample.ef_fraction, 'loss': ef_loss(pred, sample.ef_fraction).item()}

    def predict(self, samples):
        "Per-sample evaluation outputs in sample order, skipped samples dropped."
        with ThreadPoolExecutor(max_workers=worker_count(self.options['workers'])) as pool:
            results = list(pool.map(self._evaluate_one, samples))

        return [r for r in results if r is not None]

    def evaluate(self, samples):
        """
        Task metrics over `samples`: loss for pre-training; ME and the identity-baseline ME
        for tracking; loss, accuracy and weighted F1 for classification; loss, ME and
        RMSE for EF.
        """
        return summarize(self.task, self.predict(samples))

    # bookkeeping

    def _is_better(self, value):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return False

        if self.best_value is None:
            return True

        _, pick = BEST_METRIC[self.task]
        return pick(value, self.best_value) == value and value != self.best_value

    def fit(self, train, val=None, epochs=None):
        """
        Trains for `epochs` epochs (default: the schedule's remaining epochs), evaluating
        on `val` after each one and keeping the best epoch's weights.

        :Returns:
          Instance of MetricReport.
        """
        if not train:
            raise UsageError('Training set is empty.')

        epochs = epochs if epochs is not None else self.schedule.total_epochs - self.epoch
        self._plugins('before_train')

        for _ in range(epochs):
            self.epoch += 1
            self._plugins('before_epoch', self.epoch)

            loss = self.train_epoch(train)
            values = self.evaluate(val) if val else {'loss': loss}

            lr = effective_lr(self.step, self.schedule)
            record = self.report.add(self.epoch, self.step, lr, loss, values)

            name, _ = BEST_METRIC[self.task]
            if self._is_better(values.get(name)):
                self.best_value = values.get(name)
                self.best_epoch = self.epoch
                self.best_state = self.model.state_dict()

            log.info('{} epoch {}: loss {:.6f}, {}, lr {:.3g}.'.format(
                self.task, self.epoch, loss,
                ', '.join('{} {:.4f}'.format(k, v) for k, v in sorted(values.items())), lr))

            self._plugins('after_epoch', self.epoch, record)

        if self.options['restore_best'] and self.best_state is not None and self.task != viact.TASK_PRETRAIN:
            self.model.load_state_dict(self.best_state)
            log.info('Restored weights of epoch {} ({} {}).'.format(
                self.best_epoch, BEST_METRIC[self.task][0], self.best_value))

        self._plugins('after_train')

        return self.report

    # persistence

    def state(self):
        "Everything needed to continue this run exactly."
        state = OrderedDict()
        state['task'] = self.task
        state['seed'] = self.seed
        state['step'] = self.step
        state['epoch'] = self.epoch
        state['mask_ratio'] = self.options['mask_ratio']
        state['rng'] = OrderedDict((name, get_rng_state(rng)) for name, rng in self.rngs.items())

        return state

    def restore(self, checkpoint):
        """
        Loads weights, optimizer moments, counters and random states from a checkpoint
        written by this trainer's task.
        """
        self.model.load_state_dict(checkpoint.params)

        if self.mae is not None and checkpoint.decoder_params:
            prefixed = OrderedDict(('model.' + name, value) for name, value in checkpoint.params.items())
            prefixed.update(checkpoint.decoder_params)
            self.mae.load_state_dict(prefixed)

        if checkpoint.optimizer is not None:
            state = self.optimizer.state
            state.step = checkpoint.optimizer['step']
            for name in self.params:
                if name in checkpoint.optimizer['m']:
                    state.m[name] = np.array(checkpoint.optimizer['m'][name], dtype=np.float32)
                    state.v[name] = np.array(checkpoint.optimizer['v'][name], dtype=np.float32)

        trainer = checkpoint.trainer or {}
        self.step = int(trainer.get('step', 0))
        self.epoch = int(trainer.get('epoch', 0))

        for name, values in trainer.get('rng', {}).items():
            if name in self.rngs:
                set_rng_state(self.rngs[name], values)


def summarize(task, results):
    if not results:
        return {}

    if task == viact.TASK_PRETRAIN:
        return {'loss': float(np.mean([r['loss'] for r in results]))}

    if task == viact.TASK_TRACK:
        pred = np.stack([r['pred'] for r in results])
        gt = np.stack([r['gt'] for r in results])
        identity = np.repeat(gt[:, :1], gt.shape[1], axis=1)
        return {'me': metrics.me(pred, gt), 'me_identity': metrics.me(identity, gt)}

    if task == viact.TASK_CLASSIFY:
        preds = [1 if r['logit'] > 0 else 0 for r in results]
        labels = [r['label'] for r in results]
        return {'loss': float(np.mean([r['loss'] for r in results])),
                'accuracy': metrics.accuracy(preds, labels),
                'weighted_f1': metrics.weighted_f1(preds, labels)}

    preds = [r['pred'] for r in results]
    gts = [r['gt'] for r in results]
    return {'loss': float(np.mean([r['loss'] for r in results])),
            'me': metrics.mae(preds, gts),
            'rmse': metrics.rmse(preds, gts)}


# Task entry points

def fit_schedule(schedule, train_size):
    "Copy of the schedule with steps_per_epoch matching the training set."
    values = schedule.as_dict()
    values['steps_per_epoch'] = max(1, int(math.ceil(train_size / float(schedule.batch_size))))
    return Schedule.from_dict(values)


def pretrain(dataset, model, schedule, decoder_config=None, seed=0, mask_ratio=viact.DEFAULT_MASK_RATIO,
             options=None, resume=None):
    """
    Anatomical MAE pre-training of `model` on the train split.

    :Args:
      - resume: Checkpoint of an interrupted pre-training run to continue (optional)

    :Returns:
      Instance of Trainer after training; trainer.mae holds the decoder.
    """
    train = dataset.split(viact.SPLIT_TRAIN)
    mae = AnatomicalMAE(model, decoder_config, seed=seed)

    opts = dict(options or {})
    opts['mask_ratio'] = mask_ratio

    trainer = Trainer(viact.TASK_PRETRAIN, model, fit_schedule(schedule, len(train)), seed, mae, opts)

    if resume is not None:
        trainer.restore(resume)
        log.info('Resuming pre-training after epoch {}.'.format(trainer.epoch))

    trainer.fit(train, dataset.split(viact.SPLIT_VAL))

    return trainer


def pretrain_sweep(dataset, model_factory, schedule, ratios=viact.MASK_RATIO_SWEEP, decoder_config=None,
                   seed=0, options=None):
    """
    Pre-trains a fresh model per masking ratio.

    :Args:
      - model_factory: Callable returning a new ViACT
      - ratios: Masking ratios to try (optional)

    :Returns:
      OrderedDict ratio -> MetricReport.
    """
    reports = OrderedDict()

    for ratio in ratios:
        log.info('Pre-training with mask ratio {}.'.format(ratio))
        trainer = pretrain(dataset, model_factory(), schedule, decoder_config, seed, ratio, options)
        reports[ratio] = trainer.report

    return reports


def _finetune(task, dataset, model, schedule, seed, options):
    train = dataset.split(viact.SPLIT_TRAIN)

    trainer = Trainer(task, model, fit_schedule(schedule, len(train)), seed, options=options)
    trainer.fit(train, dataset.split(viact.SPLIT_VAL))

    return trainer


def finetune_track(dataset, model, schedule, seed=0, options=None):
    "Fine-tunes the tracking head; returns the Trainer (model and report attached)."
    return _finetune(viact.TASK_TRACK, dataset, model, schedule, seed, options)


def finetune_classify(dataset, model, schedule, seed=0, options=None):
    return _finetune(viact.TASK_CLASSIFY, dataset, model, schedule, seed, options)


def finetune_ef(dataset, model, schedule, seed=0, options=None):
    return _finetune(viact.TASK_EF, dataset, model, schedule, seed, options)


FINETUNE = {
    viact.TASK_TRACK: finetune_track,
    viact.TASK_CLASSIFY: finetune_classify,
    viact.TASK_EF: finetune_ef,
}


def repeat_runs(run, seeds):
    """
    Runs `run(seed)` for every seed and summarises each returned metric.

    :Args:
      - run: Callable taking a seed and returning a dict of metric values
      - seeds: Iterable of seeds

    :Returns:
      OrderedDict metric -> {'mean', 'std', 'runs'}.
    """
    values = OrderedDict()

    for seed in seeds:
        for name, value in sorted(run(seed).items()):
            values.setdefault(name, []).append(float(value))

    summary = OrderedDict()
    for name, runs in values.items():
        summary[name] = {'mean': float(np.mean(runs)), 'std': float(np.std(runs)), 'runs': runs}

    return summary


