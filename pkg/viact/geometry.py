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
Point trajectories, clips and patch sampling.

Coordinates are (x, y) in pixels with x the column and y the row; the origin is the
centre of the top-left pixel. Samples falling outside [0, W-1] x [0, H-1] read as 0.
"""

import numpy as np

from viact.exceptions import ShapeError, UsageError


class PointTrajectorySet(object):

    """
    N points tracked through T frames.
    """

    def __init__(self, coords, apex_index=None):
        """
        :Args:
          - coords: Array T x N x 2 of (x, y) pixel coordinates
          - apex_index: Index of the apex point (optional, required by apex-relative embeddings)
        """
        coords = np.array(coords, dtype=np.float32)

        if coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
            raise ShapeError('Trajectories must be T x N x 2 with T, N >= 1, got {}.'.format(coords.shape))

        if not np.all(np.isfinite(coords)):
            raise UsageError('Trajectory coordinates must be finite.')

        if apex_index is not None:
            apex_index = int(apex_index)
            if not 0 <= apex_index < coords.shape[1]:
                raise UsageError('Apex index {} outside [0, {}).'.format(apex_index, coords.shape[1]))

        self.coords = coords
        self.apex_index = apex_index

    @property
    def frames(self):
        return self.coords.shape[0]

    @property
    def points(self):
        return self.coords.shape[1]

    def window(self, start, stride, length):
        "Trajectories of frames start, start+stride, ... (length frames)."
        index = start + stride * np.arange(length)
        return PointTrajectorySet(self.coords[index], self.apex_index)

    def permuted(self, order):
        """
        Same trajectories with point indices reordered; the apex follows its point.
        """
        order = np.asarray(order)
        apex = None

        if self.apex_index is not None:
            apex = int(np.nonzero(order == self.apex_index)[0][0])

        return PointTrajectorySet(self.coords[:, order], apex)

    def shifted(self, offset):
        return PointTrajectorySet(self.coords + np.asarray(offset, dtype=np.float32), self.apex_index)

    def static(self):
        """
        Frame-0 points copied to every frame (tracker initialisation).
        """
        coords = np.repeat(self.coords[:1], self.frames, axis=0)
        return PointTrajectorySet(coords, self.apex_index)

    def __str__(self):
        return '<PointTrajectorySet:%dx%d>' % (self.frames, self.points)


class Clip(object):

    """
    T grayscale frames with intensities in [0, 1].
    """

    def __init__(self, frames):
        frames = np.array(frames, dtype=np.float32)

        if frames.ndim != 3:
            raise ShapeError('Clip frames must be T x H x W, got {}.'.format(frames.shape))

        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise UsageError('Clip intensities must lie in [0, 1].')

        self.frames = frames

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def window(self, start, stride, length):
        index = start + stride * np.arange(length)
        return Clip(self.frames[index])

    def padded(self, length):
        "Clip extended to `length` frames by repeating the final frame."
        if length <= self.frame_count:
            return self

        extra = np.repeat(self.frames[-1:], length - self.frame_count, axis=0)
        return Clip(np.concatenate([self.frames, extra], axis=0))

    def __str__(self):
        return '<Clip:%dx%dx%d>' % (self.frame_count, self.height, self.width)


class PatchSet(object):

    def __init__(self, patches):
        patches = np.asarray(patches, dtype=np.float32)

        if patches.ndim != 4 or patches.shape[2] != patches.shape[3]:
            raise ShapeError('Patches must be T x N x j x j, got {}.'.format(patches.shape))

        self.patches = patches

    @property
    def patch_size(self):
        return self.patches.shape[2]

    def flat(self):
        "Patches flattened to (T*N) x j^2, frame-major."
        frames, points, size, _ = self.patches.shape
        return self.patches.reshape(frames * points, size * size)

    def __str__(self):
        return '<PatchSet:%dx%dx%d>' % self.patches.shape[:3]


def grid_offsets(size):
    """
    Pixel offsets -(j-1)/2 .. +(j-1)/2 in steps of one pixel. For even j the centre lies
    between the two middle samples.
    """
    if size < 1:
        raise UsageError('Patch size must be at least 1, got {}.'.format(size))

    return np.arange(size, dtype=np.float64) - (size - 1) / 2.0


def build_sampling_grid(point, size):
    """
    j x j grid of (x, y) locations centred on `point`.

    :Returns:
      Array j x j x 2, row r and column c holding (x + dx[c], y + dy[r]).
    """
    offsets = grid_offsets(size)
    x, y = float(point[0]), float(point[1])

    grid = np.empty((size, size, 2), dtype=np.float64)
    grid[..., 0] = x + offsets[np.newaxis, :]
    grid[..., 1] = y + offsets[:, np.newaxis]

    return grid


def bilinear_sample(frame, locations):
    """
    Samples `frame` (H x W) at (x, y) `locations` (any leading shape, last axis 2)
    with bilinear weights from the four surrounding pixels.

    Locations outside [0, W-1] x [0, H-1] return 0.
    """
    frame = np.asarray(frame)
    locations = np.asarray(locations, dtype=np.float64)
    height, width = frame.shape

    x = locations[..., 0]
    y = locations[..., 1]

    inside = (x >= 0.0) & (x <= width - 1) & (y >= 0.0) & (y <= height - 1)

    xc = np.where(inside, x, 0.0)
    yc = np.where(inside, y, 0.0)

    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    # at the last row/column the far neighbour has weight zero
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)

    fx = xc - x0
    fy = yc - y0

    values = frame.astype(np.float64)
    out = ((1.0 - fx) * (1.0 - fy) * values[y0, x0] +
           fx * (1.0 - fy) * values[y0, x1] +
           (1.0 - fx) * fy * values[y1, x0] +
           fx * fy * values[y1, x1])

    return np.where(inside, out, 0.0)


def extract_patches(clip, points, size):
    """
    Samples a j x j patch around every point of every frame.

    :Args:
      - clip: Instance of Clip
      - points: Instance of PointTrajectorySet with the same number of frames
      - size: Patch size j

    :Returns:
      Instance of PatchSet (T x N x j x j).
    """
    if clip.frame_count != points.frames:
        raise UsageError('Clip has {} frames but trajectories have {}.'.format(clip.frame_count, points.frames))

    offsets = grid_offsets(size)
    coords = points.coords.astype(np.float64)

    # T x N x j x j
    gx = coords[:, :, 0, np.newaxis, np.newaxis] + offsets[np.newaxis, np.newaxis, np.newaxis, :]
    gy = coords[:, :, 1, np.newaxis, np.newaxis] + offsets[np.newaxis, np.newaxis, :, np.newaxis]
    gx, gy = np.broadcast_arrays(gx, gy)

    patches = np.empty(gx.shape, dtype=np.float32)

    for t in range(clip.frame_count):
        patches[t] = bilinear_sample(clip.frames[t], np.stack([gx[t], gy[t]], axis=-1))

    return PatchSet(patches)
