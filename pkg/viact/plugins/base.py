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


class BasePlugin(object):
    def before_train(self, trainer):
        "Processing before the first epoch"
        return True

    def after_train(self, trainer):
        "Processing after the last epoch"
        return True

    def before_epoch(self, trainer, epoch):
        return True

    def after_epoch(self, trainer, epoch, record):
        "Process the report record of a finished epoch."
        return True

    def after_step(self, trainer, step, loss):
        "Process the mean batch loss of an optimizer step."
        return True
