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

import numpy as np

from viact.exceptions import ShapeError, UsageError
from viact.geometry import PointTrajectorySet


def _coords(value):
    if isinstance(value, PointTrajectorySet):
        return value.coords.astype(np.float64)
    return np.asarray(value, dtype=np.float64)


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)

    if pred.size == 0 or gt.size == 0:
        raise UsageError('Metrics need at least one value.')

    if pred.shape != gt.shape:
        raise ShapeError('Prediction {} and ground truth {} differ in shape.'.format(pred.shape, gt.shape))

    return pred, gt


def me(pred, gt):
    """
    Mean Euclidean distance between predicted and true points, in pixels.

    :Args:
      - pred, gt: PointTrajectorySet or arrays whose last axis holds (x, y)
    """
    pred, gt = _pair(_coords(pred), _coords(gt))

    if pred.shape[-1] != 2:
        raise ShapeError('Point arrays must end in (x, y), got {}.'.format(pred.shape))

    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mae(pred, gt):
    "Mean absolute error of scalar predictions."
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def rmse(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.sqrt(((pred - gt) ** 2).mean()))


def _labels(preds, labels):
    preds, labels = _pair(preds, labels)
    return preds.astype(np.int64).reshape(-1), labels.astype(np.int64).reshape(-1)


def accuracy(preds, labels):
    preds, labels = _labels(preds, labels)
    return float((preds == labels).mean())


def confusion_matrix(preds, labels, classes=None):
    "Rows are true classes, columns predicted classes."
    preds, labels = _labels(preds, labels)

    if classes is None:
        classes = np.unique(np.concatenate([labels, preds]))

    index = dict((c, n) for n, c in enumerate(classes))
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)

    for p, l in zip(preds, labels):
        matrix[index[l], index[p]] += 1

    return matrix


def f1_from_confusion(matrix):
    "Per-class F1 scores and supports; a class never predicted and never present scores 0."
    matrix = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(matrix)
    predicted = matrix.sum(axis=0)
    support = matrix.sum(axis=1)

    denom = predicted + support
    scores = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)

    return scores, support


def weighted_f1(preds, labels):
    """
    F1 per class averaged with the class support (true count) as weight.
    """
    scores, support = f1_from_confusion(confusion_matrix(preds, labels))
    return float((scores * support).sum() / support.sum())


def contour_length(coords):
    "Polyline length of each frame, coords T x P x 2."
    coords = np.asarray(coords, dtype=np.float64)
    return np.linalg.norm(np.diff(coords, axis=1), axis=-1).sum(axis=1)


def longitudinal_strain(points, row=0, row_length=None):
    """
    Longitudinal strain (L_t - L_0) / L_0 of one contour row per frame.

    :Args:
      - points: PointTrajectorySet with rows of `row_length` points stored one after another
      - row: Row to measure (optional)
      - row_length: Points per row (optional, all points form one row by default)

    :Returns:
      Array with one strain value per frame; negative values mean shortening.
    """
    coords = _coords(points)
    row_length = row_length or coords.shape[1]

    if coords.shape[1] % row_length != 0 or not 0 <= row < coords.shape[1] // row_length:
        raise UsageError('Row {} of length {} does not exist for {} points.'.format(row, row_length, coords.shape[1]))

    lengths = contour_length(coords[:, row * row_length:(row + 1) * row_length])

    if lengths[0] <= 0:
        raise UsageError('Contour has zero length on the first frame.')

    return (lengths - lengths[0]) / lengths[0]
