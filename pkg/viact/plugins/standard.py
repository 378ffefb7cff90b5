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

import os
import logging

from viact.plugins.base import BasePlugin
from viact.storage import Checkpoint, write_checkpoint
from viact.utils import atomic_write


log = logging.getLogger(__name__)


class CheckpointPlugin(BasePlugin):
    NAME = 'Periodic checkpoints'

    def __init__(self, directory, every=1, prefix='epoch'):
        self.directory = directory
        self.every = max(1, int(every))
        self.prefix = prefix
        self.written = []

    def path(self, epoch):
        return os.path.join(self.directory, '{}_{:03d}.ckpt'.format(self.prefix, epoch))

    def after_epoch(self, trainer, epoch, record):
        if epoch % self.every != 0:
            return

        name = self.path(epoch)
        write_checkpoint(name, Checkpoint.from_trainer(trainer))
        self.written.append(name)

        log.debug('Checkpoint {} written.'.format(name))


class ReportPlugin(BasePlugin):
    NAME = 'Metric report'

    def __init__(self, path):
        self.path = path

    def after_epoch(self, trainer, epoch, record):
        # the whole report, rewritten every epoch
        trainer.report.write(self.path)


class LossCurvePlugin(BasePlugin):
    NAME = 'Loss curve'

    def __init__(self, path):
        self.path = path
        self.rows = []

    def before_train(self, trainer):
        self.rows = []

    def after_step(self, trainer, step, loss):
        self.rows.append((trainer.epoch, step, loss))

    def after_epoch(self, trainer, epoch, record):
        self.write()

    def write(self):
        lines = ['epoch,step,loss'] + ['%d,%d,%.9g' % row for row in self.rows]
        atomic_write(self.path, '\n'.join(lines) + '\n')
