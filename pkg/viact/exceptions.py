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

# Error codes
NUMERIC_ERROR = 1
SHAPE_ERROR = 2
USAGE_ERROR = 3
GENERATION_ERROR = 4
CHECKPOINT_ERROR = 5
DATASET_ERROR = 6


class ViactException(Exception):

    def __init__(self, code, msg):
        self.code = code
        self.msg = msg

    def __str__(self):
        return repr(self.msg)


class NumericError(ViactException):
    "NaN or Inf produced by a forward operation."

    def __init__(self, msg):
        super(NumericError, self).__init__(NUMERIC_ERROR, msg)


class ShapeError(ViactException):

    def __init__(self, msg):
        super(ShapeError, self).__init__(SHAPE_ERROR, msg)


class UsageError(ViactException):
    "Invalid argument or call made in the wrong order."

    def __init__(self, msg):
        super(UsageError, self).__init__(USAGE_ERROR, msg)


class GenerationError(ViactException):

    def __init__(self, msg):
        super(GenerationError, self).__init__(GENERATION_ERROR, msg)


class CheckpointError(ViactException):
    """
    Raised for unreadable checkpoints and for checkpoints whose stored configuration
    does not match the one requested. `field` names the first offending field.
    """

    def __init__(self, msg, field=None):
        super(CheckpointError, self).__init__(CHECKPOINT_ERROR, msg)
        self.field = field


class DatasetError(ViactException):

    def __init__(self, msg):
        super(DatasetError, self).__init__(DATASET_ERROR, msg)
