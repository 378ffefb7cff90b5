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
Checkpoints and phantom datasets on disk.

A checkpoint is a zip container with header.xml (configuration, counters, random
states and a table of tensor names, shapes and byte offsets) and tensors.bin (every
tensor as little-endian float32, one after another). Entries carry fixed timestamps,
so equal checkpoints are equal bytes.
"""

import io
import os
import csv
import shutil
import logging
import zipfile
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from lxml import etree

import viact
from viact.exceptions import CheckpointError, DatasetError
from viact.geometry import Clip, PointTrajectorySet
from viact.mae import DecoderConfig
from viact.model import ModelConfig, ViACT
from viact.phantom import Cohort, PhantomSample, PhantomSpec
from viact.training import Schedule
from viact.utils import (atomic_write, parse_string, xml_bytes, float_attr, write_pgm, read_pgm,
                         worker_count)


log = logging.getLogger(__name__)

FORMAT_VERSION = '1'

HEADER_NAME = 'header.xml'
TENSORS_NAME = 'tensors.bin'
ZIP_DATE = (1980, 1, 1, 0, 0, 0)

GROUP_MODEL = 'model'
GROUP_DECODER = 'decoder'
GROUP_ADAM_M = 'adam_m'
GROUP_ADAM_V = 'adam_v'

MANIFEST_NAME = 'manifest.xml'
SAMPLE_NAME = 'sample.xml'
POINTS_NAME = 'points.csv'
FRAME_NAME = 'frame_{:03d}.pgm'
POINTS_HEADER = ('frame', 'point', 'x', 'y')


# Attribute values

def _text(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'

    if isinstance(value, (float, np.floating)):
        return float_attr(value)

    return str(value)


def _value(text):
    if text in ('true', 'false'):
        return text == 'true'

    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass

    return text


def _attrs(values):
    return OrderedDict((name, _text(value)) for name, value in values.items())


def _read_attrs(el):
    return OrderedDict((name, _value(text)) for name, text in el.attrib.items())


# Checkpoints

class Checkpoint(object):

    """
    Model weights plus, for a training run, the decoder, optimizer moments, schedule,
    counters and random states needed to continue it.
    """

    def __init__(self, model_config, params, decoder_config=None, decoder_params=None, schedule=None,
                 optimizer=None, trainer=None, version=FORMAT_VERSION):
        self.version = version
        self.model_config = model_config
        self.params = OrderedDict(params)
        self.decoder_config = decoder_config
        self.decoder_params = OrderedDict(decoder_params or ())
        self.schedule = schedule
        self.optimizer = optimizer
        self.trainer = trainer

    @classmethod
    def from_model(cls, model):
        return cls(model.config, model.state_dict())

    @classmethod
    def from_trainer(cls, trainer):
        """
        Snapshot of a Trainer. Optimizer moments are keyed like trainer.params.
        """
        state = trainer.optimizer.state
        optimizer = OrderedDict()
        optimizer['step'] = state.step
        optimizer['m'] = OrderedDict((name, value.copy()) for name, value in state.m.items())
        optimizer['v'] = OrderedDict((name, value.copy()) for name, value in state.v.items())

        decoder_config, decoder_params = None, None
        if trainer.mae is not None:
            decoder_config = trainer.mae.decoder_config
            decoder_params = trainer.mae.decoder_state_dict()

        return cls(trainer.model.config, trainer.model.state_dict(), decoder_config, decoder_params,
                   trainer.schedule, optimizer, trainer.state())

    def check(self, model_config=None, decoder_config=None):
        """
        Raises CheckpointError naming the first configuration field that differs.
        """
        if model_config is not None:
            field = self.model_config.mismatch(model_config)
            if field is not None:
                raise CheckpointError('Checkpoint has {}={!r}, configuration asks for {!r}.'.format(
                    field, getattr(self.model_config, field), getattr(model_config, field)), field=field)

        if decoder_config is not None and self.decoder_config is not None:
            field = self.decoder_config.mismatch(decoder_config)
            if field is not None:
                raise CheckpointError('Checkpoint has {}={!r}, configuration asks for {!r}.'.format(
                    field, getattr(self.decoder_config, field), getattr(decoder_config, field)), field=field)

    def build_model(self):
        model = ViACT(self.model_config)
        model.load_state_dict(self.params)
        return model

    def __str__(self):
        return '<Checkpoint:v%s:%s>' % (self.version, self.model_config)


class CheckpointWriter(object):
    DEFAULT_OPTIONS = {
        'compresslevel': 6
    }

    def __init__(self, name, checkpoint, options=None):
        self.file_name = name
        self.checkpoint = checkpoint

        self.options = dict(self.DEFAULT_OPTIONS)
        if options:
            self.options.update(options)

    def _tensors(self):
        ck = self.checkpoint
        groups = [(GROUP_MODEL, ck.params), (GROUP_DECODER, ck.decoder_params)]

        if ck.optimizer is not None:
            groups.append((GROUP_ADAM_M, ck.optimizer['m']))
            groups.append((GROUP_ADAM_V, ck.optimizer['v']))

        for group, values in groups:
            for name, value in values.items():
                yield group, name, np.asarray(value, dtype='<f4')

    def _header(self, table):
        ck = self.checkpoint
        root = etree.Element('checkpoint', {'version': ck.version})

        etree.SubElement(root, 'model', _attrs(ck.model_config.as_dict()))

        if ck.decoder_config is not None:
            etree.SubElement(root, 'decoder', _attrs(ck.decoder_config.as_dict()))

        if ck.schedule is not None:
            etree.SubElement(root, 'schedule', _attrs(ck.schedule.as_dict()))

        if ck.optimizer is not None:
            etree.SubElement(root, 'optimizer', {'step': _text(ck.optimizer['step'])})

        if ck.trainer is not None:
            values = OrderedDict((k, v) for k, v in ck.trainer.items() if k != 'rng')
            el = etree.SubElement(root, 'trainer', _attrs(values))

            for name, state in ck.trainer.get('rng', {}).items():
                rng = etree.SubElement(el, 'rng', {'name': name})
                for key, value in state.items():
                    rng.set(key, value)

        tensors = etree.SubElement(root, 'tensors')
        for group, name, shape, offset, count in table:
            etree.SubElement(tensors, 'tensor', OrderedDict([
                ('group', group),
                ('name', name),
                ('shape', ','.join(str(s) for s in shape)),
                ('offset', str(offset)),
                ('count', str(count))
            ]))

        return xml_bytes(root)

    def _entry(self, name):
        info = zipfile.ZipInfo(name, date_time=ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        info.external_attr = 0o644 << 16
        return info

    def write(self):
        blob = io.BytesIO()
        table = []

        for group, name, value in self._tensors():
            table.append((group, name, value.shape, blob.tell(), value.size))
            blob.write(value.tobytes())

        content = io.BytesIO()
        with zipfile.ZipFile(content, 'w', zipfile.ZIP_DEFLATED, compresslevel=self.options['compresslevel']) as out:
            out.writestr(self._entry(HEADER_NAME), self._header(table))
            out.writestr(self._entry(TENSORS_NAME), blob.getvalue())

        atomic_write(self.file_name, content.getvalue())


class CheckpointReader(object):
    DEFAULT_OPTIONS = {}

    def __init__(self, name, options=None):
        self.file_name = name

        self.options = dict(self.DEFAULT_OPTIONS)
        if options:
            self.options.update(options)

    def _open(self):
        try:
            zf = zipfile.ZipFile(self.file_name, 'r')
        except (IOError, OSError):
            raise CheckpointError('Can not open checkpoint {}.'.format(self.file_name))
        except zipfile.BadZipfile:
            raise CheckpointError('Checkpoint {} is not a zip container.'.format(self.file_name))

        try:
            return zf.read(HEADER_NAME), zf.read(TENSORS_NAME)
        except KeyError as e:
            raise CheckpointError('Checkpoint {} is missing {}.'.format(self.file_name, e))
        finally:
            zf.close()

    def load(self):
        header, blob = self._open()
        root = parse_string(header).getroot()

        version = root.get('version')
        if version != FORMAT_VERSION:
            raise CheckpointError('Unsupported checkpoint version {}.'.format(version), field='version')

        model_config = ModelConfig.from_dict(_read_attrs(root.find('model')))

        el = root.find('decoder')
        decoder_config = DecoderConfig.from_dict(_read_attrs(el)) if el is not None else None

        el = root.find('schedule')
        schedule = Schedule.from_dict(_read_attrs(el)) if el is not None else None

        groups = dict((g, OrderedDict()) for g in (GROUP_MODEL, GROUP_DECODER, GROUP_ADAM_M, GROUP_ADAM_V))

        for tensor in root.find('tensors'):
            shape = tuple(int(s) for s in tensor.get('shape').split(',') if s)
            offset, count = int(tensor.get('offset')), int(tensor.get('count'))

            if offset + 4 * count > len(blob) or int(np.prod(shape)) != count:
                raise CheckpointError('Tensor "{}" does not fit the tensor blob.'.format(tensor.get('name')),
                                      field=tensor.get('name'))

            values = np.frombuffer(blob, dtype='<f4', count=count, offset=offset)
            groups[tensor.get('group')][tensor.get('name')] = values.reshape(shape).astype(np.float32)

        optimizer = None
        el = root.find('optimizer')
        if el is not None:
            optimizer = OrderedDict([('step', int(el.get('step'))),
                                     ('m', groups[GROUP_ADAM_M]),
                                     ('v', groups[GROUP_ADAM_V])])

        trainer = None
        el = root.find('trainer')
        if el is not None:
            trainer = _read_attrs(el)
            trainer['rng'] = OrderedDict((rng.get('name'), OrderedDict((k, v) for k, v in rng.attrib.items()
                                                                         if k != 'name'))
                                         for rng in el.findall('rng'))

        return Checkpoint(model_config, groups[GROUP_MODEL], decoder_config, groups[GROUP_DECODER], schedule,
                          optimizer, trainer, version)


def write_checkpoint(name, checkpoint, options=None):
    """
    Writes checkpoint to a file, replacing it atomically.

    :Args:
      - name: File name
      - checkpoint: Instance of Checkpoint
      - options: Extra options as dictionary (optional)
    """
    CheckpointWriter(name, checkpoint, options).write()


def read_checkpoint(name, options=None):
    """
    :Returns:
      Instance of Checkpoint.
    """
    return CheckpointReader(name, options).load()


# Datasets

def _points_csv(points):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(POINTS_HEADER)

    for t in range(points.frames):
        for i in range(points.points):
            x, y = points.coords[t, i]
            writer.writerow((t, i, '%.9g' % x, '%.9g' % y))

    return out.getvalue()


def _read_points_csv(path, apex_index):
    with open(path, 'r', encoding='utf-8') as fp:
        rows = list(csv.reader(fp))

    if not rows or tuple(rows[0]) != POINTS_HEADER:
        raise DatasetError('{} does not start with {}.'.format(path, ','.join(POINTS_HEADER)))

    values = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)

    if values.size == 0:
        raise DatasetError('{} holds no points.'.format(path))

    frames = int(values[:, 0].max()) + 1
    count = int(values[:, 1].max()) + 1
    coords = np.zeros((frames, count, 2), dtype=np.float32)
    coords[values[:, 0].astype(int), values[:, 1].astype(int)] = values[:, 2:4]

    return PointTrajectorySet(coords, apex_index)


class DatasetWriter(object):
    DEFAULT_OPTIONS = {
        'force': False,
        'workers': None
    }

    def __init__(self, path, cohort, options=None):
        self.path = path
        self.cohort = cohort

        self.options = dict(self.DEFAULT_OPTIONS)
        if options:
            self.options.update(options)

    def _prepare(self):
        if os.path.exists(self.path) and not os.path.isdir(self.path):
            raise DatasetError('{} exists and is not a directory.'.format(self.path))

        if os.path.isdir(self.path) and os.listdir(self.path):
            if not self.options['force']:
                raise DatasetError('{} is not empty; use force to overwrite.'.format(self.path))

            # only what a previous dataset write left behind
            manifest = os.path.join(self.path, MANIFEST_NAME)
            if os.path.exists(manifest):
                os.remove(manifest)

            for name in os.listdir(self.path):
                if name.startswith('sample_') and os.path.isdir(os.path.join(self.path, name)):
                    shutil.rmtree(os.path.join(self.path, name))

        os.makedirs(self.path, exist_ok=True)

    def _write_sample(self, sample, split):
        directory = os.path.join(self.path, sample.sample_id)
        os.makedirs(directory, exist_ok=True)

        for t in range(sample.clip.frame_count):
            write_pgm(os.path.join(directory, FRAME_NAME.format(t)), sample.clip.frames[t])

        atomic_write(os.path.join(directory, POINTS_NAME), _points_csv(sample.points))

        root = etree.Element('sample', {'id': sample.sample_id, 'split': split,
                                        'frames': str(sample.clip.frame_count)})
        etree.SubElement(root, 'spec', _attrs(sample.spec.as_dict()))
        etree.SubElement(root, 'labels', _attrs(sample.labels))

        atomic_write(os.path.join(directory, SAMPLE_NAME), xml_bytes(root))

    def _manifest(self):
        root = etree.Element('dataset', {'version': FORMAT_VERSION, 'samples': str(len(self.cohort)),
                                         'seed': _text(self.cohort.seed)})

        for split, ids in self.cohort.splits.items():
            el = etree.SubElement(root, 'split', {'name': split, 'size': str(len(ids))})
            for sample_id in ids:
                etree.SubElement(el, 'sample', {'id': sample_id})

        return xml_bytes(root)

    def write(self):
        self._prepare()

        split_of = dict((sample_id, split) for split, ids in self.cohort.splits.items() for sample_id in ids)
        samples = list(self.cohort.samples.values())

        with ThreadPoolExecutor(max_workers=worker_count(self.options['workers'])) as pool:
            list(pool.map(lambda s: self._write_sample(s, split_of[s.sample_id]), samples))

        # completion marker
        atomic_write(os.path.join(self.path, MANIFEST_NAME), self._manifest())

        log.info('Wrote {} samples to {}.'.format(len(samples), self.path))


class DatasetReader(object):
    DEFAULT_OPTIONS = {
        'workers': None
    }

    def __init__(self, path, options=None):
        self.path = path

        self.options = dict(self.DEFAULT_OPTIONS)
        if options:
            self.options.update(options)

    def read_sample(self, sample_id):
        directory = os.path.join(self.path, sample_id)

        try:
            with open(os.path.join(directory, SAMPLE_NAME), 'rb') as fp:
                root = parse_string(fp.read()).getroot()
        except (IOError, OSError):
            raise DatasetError('Sample {} has no {}.'.format(sample_id, SAMPLE_NAME))

        spec = PhantomSpec.from_dict(_read_attrs(root.find('spec')))
        frames = int(root.get('frames'))

        try:
            clip = Clip(np.stack([read_pgm(os.path.join(directory, FRAME_NAME.format(t))) for t in range(frames)]))
        except (IOError, OSError):
            raise DatasetError('Sample {} is missing frames.'.format(sample_id))

        points = _read_points_csv(os.path.join(directory, POINTS_NAME), spec.apex_index)

        return PhantomSample(clip, points, spec, sample_id)

    def load(self):
        manifest = os.path.join(self.path, MANIFEST_NAME)

        if not os.path.exists(manifest):
            raise DatasetError('{} has no {}; the dataset is incomplete.'.format(self.path, MANIFEST_NAME))

        with open(manifest, 'rb') as fp:
            root = parse_string(fp.read()).getroot()

        splits = OrderedDict()
        for el in root.findall('split'):
            splits[el.get('name')] = [s.get('id') for s in el.findall('sample')]

        for name in (viact.SPLIT_TRAIN, viact.SPLIT_VAL, viact.SPLIT_TEST):
            splits.setdefault(name, [])

        ids = sorted(sample_id for group in splits.values() for sample_id in group)

        with ThreadPoolExecutor(max_workers=worker_count(self.options['workers'])) as pool:
            samples = OrderedDict(zip(ids, pool.map(self.read_sample, ids)))

        seed = root.get('seed')
        return Cohort(samples, splits, _value(seed) if seed is not None else None)


def write_dataset(path, cohort, options=None):
    """
    Stores a cohort as one directory per sample plus manifest.xml, written last.

    :Args:
      - path: Dataset directory
      - cohort: Instance of Cohort
      - options: Extra options as dictionary (optional)
    """
    DatasetWriter(path, cohort, options).write()


def read_dataset(path, options=None):
    """
    :Returns:
      Instance of Cohort.
    """
    return DatasetReader(path, options).load()
