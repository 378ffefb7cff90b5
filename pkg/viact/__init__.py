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

# Version of the viact library

VERSION = (0, 1, 0)

# POSITIONAL EMBEDDING VARIANTS
POS_POINT_SINCOS = 'point_sincos'
POS_POINT_LINEAR = 'point_linear'
POS_APEX_SINCOS = 'apex_sincos'
POS_APEX_LINEAR = 'apex_linear'

POS_EMBED_VARIANTS = (POS_POINT_SINCOS, POS_POINT_LINEAR, POS_APEX_SINCOS, POS_APEX_LINEAR)

# TASKS
TASK_PRETRAIN = 'pretrain'
TASK_TRACK = 'track'
TASK_CLASSIFY = 'classify'
TASK_EF = 'ef'
TASK_EVAL = 'eval'
TASK_ATTN = 'attn'
TASK_PROFILE = 'profile'
TASK_GEN_DATA = 'gen-data'

TASKS = (TASK_PRETRAIN, TASK_TRACK, TASK_CLASSIFY, TASK_EF, TASK_EVAL,
         TASK_ATTN, TASK_PROFILE, TASK_GEN_DATA)

# DEFAULT SIZES
DEFAULT_FRAMES = 18
DEFAULT_POINTS = 84
DEFAULT_PATCH = 16
DEFAULT_MASK_RATIO = 0.9
MASK_RATIO_SWEEP = (0.80, 0.85, 0.90, 0.95)

# SPLITS
SPLIT_TRAIN = 'train'
SPLIT_VAL = 'val'
SPLIT_TEST = 'test'

SPLITS = {SPLIT_TRAIN: 0.70,
          SPLIT_VAL: 0.15,
          SPLIT_TEST: 0.15
          }
