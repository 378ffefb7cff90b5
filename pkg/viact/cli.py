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
Command line entry point: ``viact --task <task> --out <dir> ...``.

Every command writes only inside --out. gen-data writes the dataset itself into --out.
"""

import os
import sys
import logging
import argparse
from collections import OrderedDict

import numpy as np

import viact
from viact import numerics as nx
from viact import metrics
from viact.exceptions import ViactException, UsageError, DatasetError
from viact.mae import DecoderConfig, token_cost_profile
from viact.model import ModelConfig, ViACT
from viact.phantom import CONTOUR_POINTS, PhantomSpec, generate_cohort
from viact.plugins.standard import CheckpointPlugin, ReportPlugin, LossCurvePlugin
from viact.storage import Checkpoint, write_checkpoint, read_checkpoint, write_dataset, read_dataset
from viact.training import (Schedule, Trainer, pretrain, pretrain_sweep, FINETUNE, track_long, first_window,
                            summarize, repeat_runs)
from viact.utils import atomic_write, write_jsonl


log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 50
DEFAULT_BATCH = 16
# peak lr 1e-3 at the default batch after the batch / 256 scaling
DEFAULT_BASE_LR = 0.016
DEFAULT_WARMUP = 5
DEFAULT_COHORT = 100
DEFAULT_SIZE = 224

ARCHITECTURE_FLAGS = OrderedDict([
    ('dim', 'embed_dim'),
    ('heads', 'heads'),
    ('depth', 'depth'),
    ('patch', 'patch_size'),
    ('frames', 'frames'),
    ('points', 'points'),
    ('pos_embed', 'pos_embed'),
])

ARCHITECTURE_DEFAULTS = {
    'dim': 192,
    'heads': 3,
    'depth': 12,
    'patch': viact.DEFAULT_PATCH,
    'frames': viact.DEFAULT_FRAMES,
    'points': viact.DEFAULT_POINTS,
    'pos_embed': viact.POS_POINT_LINEAR,
}

PROFILE_SCALES = ('tiny', 'small', 'base')

REPORT_NAME = 'report.jsonl'
LOSS_CURVE_NAME = 'loss_curve.csv'
MODEL_NAME = 'model.ckpt'
EVAL_NAME = 'eval.jsonl'
PROFILE_NAME = 'profile.jsonl'
SUMMARY_NAME = 'summary.jsonl'


def build_parser():
    parser = argparse.ArgumentParser(prog='viact', description='Anatomically constrained video transformer.')

    parser.add_argument('--task', required=True, choices=viact.TASKS)
    parser.add_argument('--data', help='dataset directory')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--epochs', type=int, default=DEFAULT_EPOCHS)
    parser.add_argument('--batch', type=int, default=DEFAULT_BATCH)
    parser.add_argument('--base-lr', type=float, default=DEFAULT_BASE_LR,
                        help='learning rate before the batch / 256 scaling; the default peaks at 1e-3 for batch 16, '
                             'large-batch pre-training on clinical data uses 1.5e-4')
    parser.add_argument('--warmup', type=int, default=DEFAULT_WARMUP, help='warmup epochs')
    parser.add_argument('--mask-ratio', type=float, default=viact.DEFAULT_MASK_RATIO)
    parser.add_argument('--mask-ratio-sweep', action='store_true',
                        help='pre-train once per ratio in {}'.format(', '.join(str(r) for r in viact.MASK_RATIO_SWEEP)))
    parser.add_argument('--pos-embed', choices=viact.POS_EMBED_VARIANTS, default=None)
    parser.add_argument('--frames', type=int, default=None)
    parser.add_argument('--points', type=int, default=None)
    parser.add_argument('--patch', type=int, default=None)
    parser.add_argument('--depth', type=int, default=None)
    parser.add_argument('--dim', type=int, default=None)
    parser.add_argument('--heads', type=int, default=None)
    parser.add_argument('--block', type=int, default=-1, help='transformer block of the attention map')
    parser.add_argument('--head', type=int, default=0, help='attention head of the attention map')
    parser.add_argument('--force', action='store_true', help='overwrite a non-empty output directory')

    parser.add_argument('--checkpoint', help='checkpoint to start from, evaluate or inspect')
    parser.add_argument('--sample', help='sample id for --task attn (first test sample by default)')
    parser.add_argument('--n', type=int, default=DEFAULT_COHORT, help='cohort size for gen-data')
    parser.add_argument('--size', type=int, default=DEFAULT_SIZE, help='frame size for gen-data and profile')
    parser.add_argument('--amplitude', type=float, default=1.0, help='phantom contraction scale for gen-data')
    parser.add_argument('--refine', type=int, default=0, help='tracking refinement passes')
    parser.add_argument('--repeat', type=int, default=1,
                        help='fine-tune with this many consecutive seeds and report mean and std (5 or more)')
    parser.add_argument('--verbose', action='store_true')

    return parser


class RunConfig(object):

    """
    Parsed command line with every path checked before any work starts.
    """

    NEEDS_DATA = (viact.TASK_PRETRAIN, viact.TASK_TRACK, viact.TASK_CLASSIFY, viact.TASK_EF, viact.TASK_EVAL,
                  viact.TASK_ATTN)
    NEEDS_CHECKPOINT = (viact.TASK_EVAL, viact.TASK_ATTN)

    def __init__(self, args):
        self.args = args
        self.task = args.task
        self.out = os.path.abspath(args.out)
        self.seed = args.seed

    def validate(self):
        args = self.args

        if self.task in self.NEEDS_DATA:
            if not args.data:
                raise UsageError('--task {} needs --data.'.format(self.task))
            if not os.path.isdir(args.data):
                raise DatasetError('Dataset directory {} does not exist.'.format(args.data))

        if args.repeat < 1:
            raise UsageError('--repeat must be at least 1, got {}.'.format(args.repeat))

        if self.task in self.NEEDS_CHECKPOINT and not args.checkpoint:
            raise UsageError('--task {} needs --checkpoint.'.format(self.task))

        if args.checkpoint and not os.path.isfile(args.checkpoint):
            raise UsageError('Checkpoint {} does not exist.'.format(args.checkpoint))

        if self.task == viact.TASK_GEN_DATA:
            # the dataset writer checks emptiness itself
            return

        if os.path.exists(self.out) and not os.path.isdir(self.out):
            raise UsageError('--out {} is not a directory.'.format(self.out))

        if os.path.isdir(self.out) and os.listdir(self.out) and not args.force:
            raise UsageError('--out {} is not empty; use --force to overwrite.'.format(self.out))

        os.makedirs(self.out, exist_ok=True)

    def explicit_architecture(self):
        "Architecture flags given on the command line, as ModelConfig field names."
        return OrderedDict((field, getattr(self.args, flag)) for flag, field in ARCHITECTURE_FLAGS.items()
                           if getattr(self.args, flag) is not None)

    def model_config(self, base=None):
        """
        ModelConfig from the flags. With a checkpoint config as `base`, flags override it
        and any difference is reported by Checkpoint.check.
        """
        if base is not None:
            values = base.as_dict()
        else:
            values = OrderedDict((field, ARCHITECTURE_DEFAULTS[flag]) for flag, field in ARCHITECTURE_FLAGS.items())
            values['mlp_hidden'] = None

        values.update(self.explicit_architecture())

        if base is None or 'embed_dim' in self.explicit_architecture():
            values['mlp_hidden'] = 4 * values['embed_dim']

        return ModelConfig(**values)

    def schedule(self):
        return Schedule(base_lr=self.args.base_lr, batch_size=self.args.batch,
                        warmup_epochs=min(self.args.warmup, self.args.epochs), total_epochs=self.args.epochs)

    def decoder_config(self, model_config):
        width = model_config.embed_dim

        if width >= 96:
            return DecoderConfig()

        # narrow encoders get a decoder of half their width
        heads = model_config.heads
        dec_dim = max(heads, (width // 2) // heads * heads)
        if model_config.pos_embed.endswith('sincos') and dec_dim % 2:
            dec_dim += heads
        return DecoderConfig(dec_dim=min(dec_dim, width), dec_depth=1, dec_heads=heads)

    def path(self, name):
        return os.path.join(self.out, name)


# Commands

def cmd_gen_data(run):
    args = run.args
    points = args.points or viact.DEFAULT_POINTS
    frames = args.frames or viact.DEFAULT_FRAMES

    # long enough for a full window at stride 3
    base = PhantomSpec(height=args.size, width=args.size, frames=3 * (frames - 1) + 1, points=points,
                       amplitude=args.amplitude)
    cohort = generate_cohort(args.n, args.seed, base)

    write_dataset(run.out, cohort, {'force': args.force})

    return cohort


def _plugins(run, checkpoints=True):
    plugins = [ReportPlugin(run.path(REPORT_NAME)), LossCurvePlugin(run.path(LOSS_CURVE_NAME))]

    if checkpoints:
        directory = run.path('checkpoints')
        os.makedirs(directory, exist_ok=True)
        plugins.append(CheckpointPlugin(directory, every=max(1, run.args.epochs // 5)))

    return plugins


def cmd_pretrain(run):
    args = run.args
    dataset = read_dataset(args.data)

    resume = None
    if args.checkpoint:
        resume = read_checkpoint(args.checkpoint)
        config = run.model_config(resume.model_config)
        resume.check(config)
    else:
        config = run.model_config()

    decoder_config = resume.decoder_config if resume is not None and resume.decoder_config else \
        run.decoder_config(config)

    if args.mask_ratio_sweep:
        reports = pretrain_sweep(dataset, lambda: ViACT(config, seed=args.seed), run.schedule(),
                                 viact.MASK_RATIO_SWEEP, decoder_config, args.seed)

        for ratio, report in reports.items():
            report.write(run.path('pretrain_ratio_{:.2f}.jsonl'.format(ratio)))

        return reports

    trainer = pretrain(dataset, ViACT(config, seed=args.seed), run.schedule(), decoder_config, args.seed,
                       args.mask_ratio, {'plugins': _plugins(run)}, resume)

    write_checkpoint(run.path(MODEL_NAME), Checkpoint.from_trainer(trainer))

    return trainer.report


def cmd_finetune(run):
    args = run.args
    dataset = read_dataset(args.data)

    checkpoint = None
    if args.checkpoint:
        checkpoint = read_checkpoint(args.checkpoint)
        checkpoint.check(run.model_config(checkpoint.model_config))
        log.info('Fine-tuning from {}.'.format(args.checkpoint))
    else:
        log.info('Fine-tuning from random initialisation.')

    def new_model(seed):
        return checkpoint.build_model() if checkpoint is not None else ViACT(run.model_config(), seed=seed)

    if args.repeat > 1:
        return repeat_finetune(run, dataset, new_model)

    model = new_model(args.seed)
    options = {'plugins': _plugins(run), 'refine_passes': args.refine}
    trainer = FINETUNE[run.task](dataset, model, run.schedule(), args.seed, options)

    write_checkpoint(run.path(MODEL_NAME), Checkpoint.from_trainer(trainer))

    return trainer.report


def repeat_finetune(run, dataset, new_model):
    """
    Fine-tunes once per seed in seed .. seed + repeat - 1 and writes the test-split
    metrics of every run with their mean and std to summary.jsonl.
    """
    args = run.args
    test = dataset.split(viact.SPLIT_TEST) or dataset.split(viact.SPLIT_VAL)

    def one_run(seed):
        report = ReportPlugin(run.path('report_seed_{}.jsonl'.format(seed)))
        options = {'plugins': [report], 'refine_passes': args.refine}

        trainer = FINETUNE[run.task](dataset, new_model(seed), run.schedule(), seed, options)
        return trainer.evaluate(test)

    summary = repeat_runs(one_run, range(args.seed, args.seed + args.repeat))

    records = []
    for name, values in summary.items():
        log.info('{} {}: {:.4f} +- {:.4f} over {} seeds.'.format(run.task, name, values['mean'], values['std'],
                                                                  len(values['runs'])))
        records.append(OrderedDict([('task', run.task), ('metric', name), ('mean', values['mean']),
                                    ('std', values['std']), ('runs', values['runs'])]))

    write_jsonl(run.path(SUMMARY_NAME), records)

    return summary


def _checkpoint_task(checkpoint):
    task = (checkpoint.trainer or {}).get('task')

    if task not in FINETUNE:
        raise UsageError('Checkpoint was not written by a fine-tuning run (task {}).'.format(task))

    return task


def evaluate_tracking(trainer, samples, results):
    "Extra tracking figures: long-clip ME and centerline strain error."
    extra = OrderedDict()
    count = results[0]['pred'].shape[1]
    rows = count // CONTOUR_POINTS if count % CONTOUR_POINTS == 0 else 1
    # centerline row
    row = min(1, rows - 1)
    row_length = count // rows

    errors = []
    for r in results:
        pred = metrics.longitudinal_strain(r['pred'], row, row_length)
        gt = metrics.longitudinal_strain(r['gt'], row, row_length)
        errors.append(np.abs(pred - gt).mean())
    extra['strain_error'] = float(np.mean(errors))

    long_pred, long_gt = [], []
    for sample in samples:
        predicted = track_long(trainer.model, sample.clip, sample.points, refine_passes=trainer.options['refine_passes'])
        long_pred.append(predicted.coords)
        long_gt.append(sample.points.coords)
    extra['me_long'] = metrics.me(np.concatenate(long_pred), np.concatenate(long_gt))

    return extra


def cmd_eval(run):
    args = run.args
    checkpoint = read_checkpoint(args.checkpoint)
    task = _checkpoint_task(checkpoint)
    dataset = read_dataset(args.data)

    model = checkpoint.build_model()
    trainer = Trainer(task, model, Schedule(), checkpoint.trainer.get('seed', 0),
                      options={'refine_passes': args.refine})

    records = []
    for split in (viact.SPLIT_VAL, viact.SPLIT_TEST):
        samples = dataset.split(split)
        if not samples:
            continue

        results = trainer.predict(samples)
        record = OrderedDict([('task', task), ('split', split), ('samples', len(results))])
        record.update(sorted(summarize(task, results).items()))

        if task == viact.TASK_TRACK and results:
            record.update(evaluate_tracking(trainer, samples, results))

        log.info('eval {} {}: {}'.format(task, split, ', '.join('{} {}'.format(k, v) for k, v in record.items())))
        records.append(record)

    write_jsonl(run.path(EVAL_NAME), records)

    return records


def write_overlays(run, clip, points, attention, prefix):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    names = []

    for t in range(clip.frame_count):
        fig = plt.figure(figsize=(4, 4), dpi=100)
        ax = fig.add_axes([0, 0, 1, 1])
        ax.imshow(clip.frames[t], cmap='gray', vmin=0.0, vmax=1.0)
        ax.scatter(points.coords[t, :, 0], points.coords[t, :, 1], c=attention[t], cmap='jet', vmin=0.0, vmax=1.0,
                   s=12)
        ax.set_axis_off()

        name = run.path('{}_frame_{:03d}.png'.format(prefix, t))
        fig.savefig(name, metadata={'Software': None})
        plt.close(fig)
        names.append(name)

    return names


def cmd_attn(run):
    args = run.args
    checkpoint = read_checkpoint(args.checkpoint)
    task = _checkpoint_task(checkpoint)

    if task == viact.TASK_TRACK or not checkpoint.model_config.use_class_token:
        raise UsageError('Attention maps need a classification or EF checkpoint; got a {} model.'.format(task))

    dataset = read_dataset(args.data)
    sample_id = args.sample or (dataset.splits[viact.SPLIT_TEST] or sorted(dataset.samples))[0]

    if sample_id not in dataset.samples:
        raise UsageError('Sample {} is not in the dataset.'.format(sample_id))

    model = checkpoint.build_model()
    window = first_window(dataset.samples[sample_id], model.config.frames)

    if window is None:
        raise UsageError('Sample {} is shorter than the model window.'.format(sample_id))

    clip, points = window

    with nx.no_grad():
        output = model.forward(clip, points, keep_attention=True)

    attention = model.attention_maps(output, args.block, args.head)
    prefix = 'attention_{}_b{}_h{}'.format(sample_id, args.block, args.head)

    lines = [','.join('%.6f' % v for v in row) for row in attention]
    atomic_write(run.path(prefix + '.csv'), '\n'.join(lines) + '\n')

    write_overlays(run, clip, points, attention, prefix)

    return attention


def cmd_profile(run):
    args = run.args
    configs = []

    for scale in PROFILE_SCALES:
        overrides = dict((field, value) for field, value in run.explicit_architecture().items()
                         if field in ('patch_size', 'frames', 'points'))
        configs.append((scale, ModelConfig.preset(scale, **overrides)))

    rows = token_cost_profile(configs, args.size, args.size, args.mask_ratio)
    write_jsonl(run.path(PROFILE_NAME), rows)

    return rows


COMMANDS = {
    viact.TASK_GEN_DATA: cmd_gen_data,
    viact.TASK_PRETRAIN: cmd_pretrain,
    viact.TASK_TRACK: cmd_finetune,
    viact.TASK_CLASSIFY: cmd_finetune,
    viact.TASK_EF: cmd_finetune,
    viact.TASK_EVAL: cmd_eval,
    viact.TASK_ATTN: cmd_attn,
    viact.TASK_PROFILE: cmd_profile,
}


def main(argv=None):
    args = build_parser().parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    run = RunConfig(args)

    try:
        run.validate()
        COMMANDS[run.task](run)
    except ViactException as e:
        log.error('{} failed: {}'.format(run.task, e.msg))
        return e.code or 1

    return 0


if __name__ == '__main__':
    sys.exit(main())
