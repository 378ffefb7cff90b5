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
Synthetic echo-like phantoms.

A bright inverted U (the myocardium analog, apex at the top) carries band-limited
speckle over a dark background. Every frame is the first frame warped backwards by a
periodic contraction towards the band centre, so the true point trajectories are
known exactly.
"""

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.ndimage import gaussian_filter, distance_transform_edt

import viact
from viact.exceptions import GenerationError, UsageError
from viact.geometry import Clip, PointTrajectorySet, bilinear_sample
from viact.utils import rng_stream, worker_count


log = logging.getLogger(__name__)

CONTOUR_POINTS = 21
ARC_LIMIT = 0.75 * np.pi
ARC_SAMPLES = 720

# half axes of the centerline as fractions of the frame
AXIS_X = 0.22
AXIS_Y = 0.38

BACKGROUND_LEVEL = 0.08
BAND_LEVEL = 0.55
BAND_HALF_WIDTH = 16.0
BAND_EDGE_SIGMA = 1.5

# contraction per unit of amplitude * ef_fraction
RADIAL_RATE = 0.044
LONGITUDINAL_RATE = 0.035

CLASS_BRIGHTNESS = {0: 1.0, 1: 1.3}

EF_RANGE = (0.3, 0.75)
CENTER_JITTER = 4.0


class PhantomSpec(object):

    """
    Every constant a phantom is rendered from. Rendering is a pure function of the spec.
    """

    FIELDS = ('height', 'width', 'frames', 'points', 'row_spacing', 'amplitude', 'period', 'grain',
              'noise', 'seed', 'label', 'ef_fraction', 'center_x', 'center_y')

    def __init__(self, height=224, width=224, frames=viact.DEFAULT_FRAMES, points=CONTOUR_POINTS,
                 row_spacing=6.0, amplitude=1.0, period=18.0, grain=1.5, noise=0.02, seed=0, label=0,
                 ef_fraction=0.6, center_x=None, center_y=None):
        """
        :Args:
          - height, width: Frame size in pixels
          - frames: Clip length
          - points: Tracked points, a multiple of 21 (one centerline plus parallel rows)
          - row_spacing: Distance between point rows in pixels
          - amplitude: Contraction scale, 0 gives a static clip
          - period: Contraction period in frames
          - grain: Speckle grain size (Gaussian sigma in pixels)
          - noise: Standard deviation of the additive noise
          - seed: Seed of texture and noise
          - label: Binary class, 1 brightens the band
          - ef_fraction: Ejection fraction analog in (0, 1), scales the contraction
          - center_x, center_y: Centre of the U (optional, frame centre by default)
        """
        self.height = int(height)
        self.width = int(width)
        self.frames = int(frames)
        self.points = int(points)
        self.row_spacing = float(row_spacing)
        self.amplitude = float(amplitude)
        self.period = float(period)
        self.grain = float(grain)
        self.noise = float(noise)
        self.seed = int(seed)
        self.label = int(label)
        self.ef_fraction = float(ef_fraction)
        self.center_x = float(center_x) if center_x is not None else (self.width - 1) / 2.0
        self.center_y = float(center_y) if center_y is not None else (self.height - 1) / 2.0

        self.validate()

    def validate(self):
        if self.height < 16 or self.width < 16 or self.frames < 1:
            raise UsageError('Phantom frames must be at least 16x16 and the clip at least one frame long.')

        if self.points < CONTOUR_POINTS or self.points % CONTOUR_POINTS != 0:
            raise UsageError('Phantom point count must be a multiple of {}, got {}.'.format(CONTOUR_POINTS, self.points))

        if self.label not in CLASS_BRIGHTNESS:
            raise UsageError('Phantom label must be 0 or 1, got {}.'.format(self.label))

        if not 0.0 < self.ef_fraction < 1.0:
            raise UsageError('ef_fraction must lie in (0, 1), got {}.'.format(self.ef_fraction))

        if self.amplitude < 0 or self.noise < 0 or self.grain <= 0 or self.period <= 0:
            raise UsageError('Phantom amplitude and noise must not be negative, grain and period must be positive.')

    @property
    def rows(self):
        return self.points // CONTOUR_POINTS

    @property
    def row_offsets(self):
        "Normal offsets of the point rows; the centerline row comes second when there are several."
        first = min(1, self.rows - 1)
        return (np.arange(self.rows) - first) * self.row_spacing

    @property
    def apex_index(self):
        return min(1, self.rows - 1) * CONTOUR_POINTS + CONTOUR_POINTS // 2

    @property
    def brightness(self):
        return CLASS_BRIGHTNESS[self.label]

    def replace(self, **values):
        current = self.as_dict()
        current.update(values)
        return PhantomSpec(**current)

    def as_dict(self):
        return OrderedDict((name, getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def from_dict(cls, values):
        return cls(**dict((name, values[name]) for name in cls.FIELDS if name in values))

    def __eq__(self, other):
        return isinstance(other, PhantomSpec) and self.as_dict() == other.as_dict()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __str__(self):
        return '<PhantomSpec:%dx%dx%d,N=%d,seed=%d>' % (self.frames, self.height, self.width, self.points, self.seed)


class PhantomSample(object):

    def __init__(self, clip, points, spec, sample_id=None):
        if clip.frame_count != points.frames:
            raise UsageError('Clip has {} frames, trajectories {}.'.format(clip.frame_count, points.frames))

        self.clip = clip
        self.points = points
        self.spec = spec
        self.sample_id = sample_id

    @property
    def label(self):
        return self.spec.label

    @property
    def ef_fraction(self):
        return self.spec.ef_fraction

    @property
    def labels(self):
        return {'label': self.spec.label, 'ef_fraction': self.spec.ef_fraction}

    def __str__(self):
        return '<PhantomSample:%s>' % (self.sample_id or '')


# Geometry of the band

def centerline(spec, count=CONTOUR_POINTS):
    """
    Points along the U, apex at the top. Returns (points count x 2, unit outward
    normals count x 2).
    """
    psi = np.linspace(-ARC_LIMIT, ARC_LIMIT, count)
    ax = AXIS_X * spec.width
    ay = AXIS_Y * spec.height

    curve = np.stack([spec.center_x + ax * np.sin(psi), spec.center_y - ay * np.cos(psi)], axis=1)

    normal = np.stack([ay * np.sin(psi), -ax * np.cos(psi)], axis=1)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)

    return curve, normal


def contour_points(spec):
    "Frame-0 points, row after row, N x 2."
    curve, normal = centerline(spec)
    rows = [curve + offset * normal for offset in spec.row_offsets]

    return np.concatenate(rows, axis=0)


def band_centroid(spec):
    "Centroid of the band, weighted by arc length along its centerline."
    curve, _ = centerline(spec, ARC_SAMPLES)
    lengths = np.linalg.norm(np.diff(curve, axis=0), axis=1)

    return np.average(0.5 * (curve[1:] + curve[:-1]), axis=0, weights=lengths)


def band_mask(spec):
    "Soft [0, 1] mask of the myocardium band."
    curve, _ = centerline(spec, ARC_SAMPLES)

    seeds = np.ones((spec.height, spec.width), dtype=bool)
    cols = np.clip(np.rint(curve[:, 0]).astype(int), 0, spec.width - 1)
    rows = np.clip(np.rint(curve[:, 1]).astype(int), 0, spec.height - 1)
    seeds[rows, cols] = False

    distance = distance_transform_edt(seeds)
    mask = (distance <= BAND_HALF_WIDTH).astype(np.float64)

    return np.clip(gaussian_filter(mask, BAND_EDGE_SIGMA), 0.0, 1.0)


def speckle(spec, rng):
    "Rayleigh-like multiplicative speckle with unit mean."
    shape = (spec.height, spec.width)
    real = gaussian_filter(rng.standard_normal(shape), spec.grain)
    imag = gaussian_filter(rng.standard_normal(shape), spec.grain)
    amplitude = np.hypot(real, imag)

    return amplitude / amplitude.mean()


def generate_texture(spec):
    """
    First frame of a phantom: speckle over a bright band on a dark background.

    :Args:
      - spec: Instance of PhantomSpec

    :Returns:
      Array H x W (float64) with intensities in [0, 1].
    """
    rng = rng_stream(spec.seed, 'phantom-texture')

    band = band_mask(spec)
    level = BACKGROUND_LEVEL * (1.0 - band) + BAND_LEVEL * spec.brightness * band

    return np.clip(level * speckle(spec, rng), 0.0, 1.0)


# Motion

def contraction(t, spec):
    "Contraction state s(t) in [0, 1]; zero at t = 0 and every full period."
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / spec.period))


class Deformation(object):

    """
    phi_t(p) = c + S_t (p - c) with S_t = diag(1 - e s k_r, 1 - e s (k_r + k_l)),
    e = amplitude * ef_fraction and c the band centroid. The x scale is the radial part,
    the extra y scale the longitudinal shortening.
    """

    def __init__(self, t, spec):
        strength = spec.amplitude * spec.ef_fraction * contraction(t, spec)

        self.center = band_centroid(spec)
        self.scale = np.array([1.0 - strength * RADIAL_RATE,
                               1.0 - strength * (RADIAL_RATE + LONGITUDINAL_RATE)], dtype=np.float64)

        if np.any(self.scale <= 0.0):
            raise GenerationError('Contraction at t={} collapses the band.'.format(t))

    def __call__(self, points):
        return self.center + self.scale * (np.asarray(points, dtype=np.float64) - self.center)

    def inverse(self, points):
        return self.center + (np.asarray(points, dtype=np.float64) - self.center) / self.scale


def deformation(t, spec):
    return Deformation(t, spec)


def render_sample(spec, sample_id=None):
    """
    Renders a clip and its ground-truth trajectories.

    Frame t is the texture sampled at phi_t^-1 of every pixel plus Gaussian noise; the
    trajectories are phi_t of the frame-0 points.

    :Args:
      - spec: Instance of PhantomSpec
      - sample_id: Identifier stored with the sample (optional)

    :Returns:
      Instance of PhantomSample.
    """
    spec.validate()

    base = generate_texture(spec)
    start = contour_points(spec)
    noise_rng = rng_stream(spec.seed, 'phantom-noise')

    rows, cols = np.mgrid[0:spec.height, 0:spec.width]
    pixels = np.stack([cols, rows], axis=-1).astype(np.float64)

    frames = np.empty((spec.frames, spec.height, spec.width), dtype=np.float32)
    coords = np.empty((spec.frames, spec.points, 2), dtype=np.float64)

    for t in range(spec.frames):
        phi = deformation(t, spec)
        coords[t] = phi(start)

        frame = bilinear_sample(base, phi.inverse(pixels))
        if spec.noise > 0:
            frame = frame + noise_rng.normal(0.0, spec.noise, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)

    if np.any(coords < 0.0) or np.any(coords[..., 0] > spec.width - 1) or np.any(coords[..., 1] > spec.height - 1):
        raise GenerationError('Phantom trajectories leave the {}x{} frame.'.format(spec.width, spec.height))

    return PhantomSample(Clip(frames), PointTrajectorySet(coords, spec.apex_index), spec, sample_id)


# Cohorts

class Cohort(object):

    """
    Samples keyed by id plus the train/val/test split lists.
    """

    def __init__(self, samples, splits, seed=None):
        self.samples = samples
        self.splits = splits
        self.seed = seed

    def split(self, name):
        if name not in self.splits:
            raise UsageError('Unknown split "{}".'.format(name))

        return [self.samples[sample_id] for sample_id in self.splits[name]]

    def __len__(self):
        return len(self.samples)

    def __str__(self):
        return '<Cohort:%s>' % '/'.join('%d' % len(self.splits[s]) for s in (viact.SPLIT_TRAIN, viact.SPLIT_VAL,
                                                                             viact.SPLIT_TEST))


def split_sizes(n):
    train = int(round(viact.SPLITS[viact.SPLIT_TRAIN] * n))
    val = int(round(viact.SPLITS[viact.SPLIT_VAL] * n))
    return train, val, n - train - val


def cohort_specs(n, seed, base=None, ef_range=EF_RANGE):
    """
    Randomised per-sample specs: balanced labels, uniform EF in `ef_range`, jittered
    centre and one texture seed per sample.
    """
    if n < 10:
        raise UsageError('A cohort needs at least 10 samples, got {}.'.format(n))

    base = base or PhantomSpec()
    rng = rng_stream(seed, 'cohort')

    labels = rng.permutation(np.array([0] * (n // 2) + [1] * (n - n // 2)))
    efs = rng.uniform(ef_range[0], ef_range[1], size=n)
    jitter = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=(n, 2))
    seeds = rng.integers(0, 2 ** 31 - 1, size=n)

    specs = OrderedDict()
    for n_id in range(n):
        sample_id = 'sample_{:03d}'.format(n_id)
        specs[sample_id] = base.replace(label=int(labels[n_id]), ef_fraction=float(efs[n_id]),
                                        center_x=(base.width - 1) / 2.0 + float(jitter[n_id, 0]),
                                        center_y=(base.height - 1) / 2.0 + float(jitter[n_id, 1]),
                                        seed=int(seeds[n_id]))

    return specs


def assign_splits(sample_ids, seed):
    ids = list(sample_ids)
    order = rng_stream(seed, 'splits').permutation(len(ids))
    train, val, _ = split_sizes(len(ids))

    shuffled = [ids[n] for n in order]

    return OrderedDict([(viact.SPLIT_TRAIN, sorted(shuffled[:train])),
                        (viact.SPLIT_VAL, sorted(shuffled[train:train + val])),
                        (viact.SPLIT_TEST, sorted(shuffled[train + val:]))])


def generate_cohort(n, seed, base=None, ef_range=EF_RANGE, workers=None):
    """
    Labelled phantom cohort with deterministic 70/15/15 splits.

    :Args:
      - n: Number of samples, at least 10
      - seed: Cohort seed
      - base: PhantomSpec the per-sample specs derive from (optional)
      - ef_range: Range of the uniform EF draw (optional)
      - workers: Rendering threads (optional, capped by VIACT_THREADS)

    :Returns:
      Instance of Cohort.
    """
    specs = cohort_specs(n, seed, base, ef_range)
    workers = worker_count(workers)

    log.info('Rendering {} phantoms with {} workers.'.format(n, workers))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rendered = list(pool.map(lambda item: render_sample(item[1], item[0]), specs.items()))

    samples = OrderedDict((sample.sample_id, sample) for sample in rendered)

    return Cohort(samples, assign_splits(samples.keys(), seed), seed)
