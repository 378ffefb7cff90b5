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
The anatomically constrained video transformer.

Tokens are patches sampled at myocardium points, one per (frame, point), ordered
frame-major: token t*N + i belongs to point i on frame t. An optional class token
sits at index 0 and carries no positional or temporal term.
"""

from collections import OrderedDict

import numpy as np
from scipy.stats import truncnorm

import viact
from viact import numerics as nx
from viact.exceptions import ShapeError, UsageError, CheckpointError
from viact.geometry import PointTrajectorySet, extract_patches
from viact.utils import rng_stream


INIT_STD = 0.02
SINCOS_BASE = 10000.0
CLASS_ORIGIN = -1


# Configuration

class ModelConfig(object):

    """
    Architecture hyperparameters of a ViACT backbone.
    """

    FIELDS = ('embed_dim', 'heads', 'depth', 'mlp_hidden', 'patch_size', 'frames', 'points',
              'pos_embed', 'use_class_token')

    PRESETS = {
        'tiny': {'embed_dim': 192, 'heads': 3, 'depth': 12, 'mlp_hidden': 768},
        'small': {'embed_dim': 384, 'heads': 6, 'depth': 12, 'mlp_hidden': 1536},
        'base': {'embed_dim': 768, 'heads': 12, 'depth': 12, 'mlp_hidden': 3072},
        # gradient checks
        'micro': {'embed_dim': 8, 'heads': 2, 'depth': 1, 'mlp_hidden': 32, 'patch_size': 2,
                  'frames': 2, 'points': 3},
        # laptop-sized runs on phantoms
        'desk': {'embed_dim': 48, 'heads': 3, 'depth': 2, 'mlp_hidden': 192, 'patch_size': 8,
                 'frames': 8, 'points': 21},
    }

    def __init__(self, embed_dim=192, heads=3, depth=12, mlp_hidden=None, patch_size=viact.DEFAULT_PATCH,
                 frames=viact.DEFAULT_FRAMES, points=viact.DEFAULT_POINTS, pos_embed=viact.POS_POINT_LINEAR,
                 use_class_token=True):
        self.embed_dim = int(embed_dim)
        self.heads = int(heads)
        self.depth = int(depth)
        self.mlp_hidden = int(mlp_hidden) if mlp_hidden is not None else 4 * self.embed_dim
        self.patch_size = int(patch_size)
        self.frames = int(frames)
        self.points = int(points)
        self.pos_embed = pos_embed
        self.use_class_token = bool(use_class_token)

        self.validate()

    @classmethod
    def preset(cls, name, **overrides):
        if name not in cls.PRESETS:
            raise UsageError('Unknown model preset "{}".'.format(name))

        values = dict(cls.PRESETS[name])
        values.update(overrides)

        return cls(**values)

    def validate(self):
        for name in ('embed_dim', 'heads', 'mlp_hidden', 'patch_size', 'frames', 'points'):
            if getattr(self, name) < 1:
                raise UsageError('ModelConfig.{} must be positive.'.format(name))

        if self.depth < 0:
            raise UsageError('ModelConfig.depth must not be negative.')

        if self.embed_dim % self.heads != 0:
            raise UsageError('Embedding dimension {} is not divisible by {} heads.'.format(self.embed_dim, self.heads))

        if self.pos_embed not in viact.POS_EMBED_VARIANTS:
            raise UsageError('Unknown positional embedding "{}", expected one of {}.'.format(
                self.pos_embed, ', '.join(viact.POS_EMBED_VARIANTS)))

        if self.pos_embed.endswith('sincos') and self.embed_dim % 2 != 0:
            raise UsageError('sin cos embeddings need an even embedding dimension.')

    @property
    def tokens(self):
        "Number of encoder tokens for a full clip, class token included."
        return self.frames * self.points + (1 if self.use_class_token else 0)

    def as_dict(self):
        return OrderedDict((name, getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def from_dict(cls, values):
        return cls(**dict((name, values[name]) for name in cls.FIELDS if name in values))

    def mismatch(self, other):
        "Name of the first field that differs from `other`, None if equal."
        for name in self.FIELDS:
            if getattr(self, name) != getattr(other, name):
                return name
        return None

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.mismatch(other) is None

    def __ne__(self, other):
        return not self.__eq__(other)

    def __str__(self):
        return '<ModelConfig:k=%d,heads=%d,depth=%d,j=%d,T=%d,N=%d,%s>' % (
            self.embed_dim, self.heads, self.depth, self.patch_size, self.frames, self.points, self.pos_embed)


# Building blocks

def trunc_normal(shape, rng, std=INIT_STD):
    "Normal samples cut at two standard deviations."
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(np.float32)


class Module(object):

    """
    Base class for anything holding parameters. Parameters are discovered from the
    attributes in assignment order, recursing into sub-modules and lists of them.
    """

    def named_parameters(self, prefix=''):
        params = OrderedDict()

        for attr, value in vars(self).items():
            name = prefix + attr

            if isinstance(value, nx.Parameter):
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(name + '.'))
            elif isinstance(value, (list, tuple)):
                for n, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters('{}.{}.'.format(name, n)))

        return params

    def zero_grad(self):
        for param in self.named_parameters().values():
            param.zero_grad()

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters().items())

    def load_state_dict(self, values, strict=True):
        params = self.named_parameters()

        if strict:
            missing = [name for name in params if name not in values]
            if missing:
                raise CheckpointError('Missing parameter "{}".'.format(missing[0]), field=missing[0])

        for name, param in params.items():
            if name not in values:
                continue
            value = np.asarray(values[name], dtype=np.float32)
            if value.shape != param.shape:
                raise CheckpointError('Parameter "{}" has shape {}, expected {}.'.format(
                    name, value.shape, param.shape), field=name)
            param.data[...] = value


class Linear(Module):

    def __init__(self, inputs, outputs, rng, bias=True):
        self.weight = nx.Parameter(trunc_normal((inputs, outputs), rng))
        self.bias = nx.Parameter(np.zeros(outputs)) if bias else None

    def __call__(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):

    def __init__(self, width, eps=nx.LAYER_NORM_EPS):
        self.gamma = nx.Parameter(np.ones(width))
        self.beta = nx.Parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):

    def __init__(self, width, hidden, rng):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class Attention(Module):

    def __init__(self, width, heads, rng):
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.proj = Linear(width, width, rng)

    def __call__(self, x, keep_weights=False):
        out = nx.scaled_dot_attention(self.query(x), self.key(x), self.value(x), self.heads,
                                      return_weights=keep_weights)
        if keep_weights:
            out, weights = out
            return self.proj(out), weights

        return self.proj(out), None


class Block(Module):

    "Pre-LN transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."

    def __init__(self, width, heads, hidden, rng):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP(width, hidden, rng)

    def __call__(self, x, keep_weights=False):
        attended, weights = self.attn(self.norm1(x), keep_weights)
        x = x + attended
        x = x + self.mlp(self.norm2(x))

        return x, weights


class Transformer(Module):

    """
    Stack of pre-LN blocks followed by a final LayerNorm. With depth 0 it reduces to the
    final LayerNorm.
    """

    def __init__(self, width, depth, heads, hidden, rng):
        self.blocks = [Block(width, heads, hidden, rng) for _ in range(depth)]
        self.norm = LayerNorm(width)

    def __call__(self, x, keep_attention=False):
        attention = []

        for block in self.blocks:
            x, weights = block(x, keep_attention)
            if keep_attention:
                attention.append(weights)

        return self.norm(x), (attention if keep_attention else None)


# Positional embeddings

def sincos_embedding(values, width):
    """
    1D sinusoidal embedding: channel 2i holds sin(p w_i) and channel 2i+1 cos(p w_i)
    with w_i = 10000^(-2i/width).

    :Args:
      - values: Array of positions, any shape S
      - width: Even embedding width

    :Returns:
      Array S x width (float64).
    """
    if width % 2 != 0:
        raise UsageError('sin cos embedding needs an even width, got {}.'.format(width))

    values = np.asarray(values, dtype=np.float64)
    omega = SINCOS_BASE ** (-np.arange(width // 2, dtype=np.float64) * 2.0 / width)
    angles = values[..., np.newaxis] * omega

    out = np.empty(values.shape + (width,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)

    return out


def point_sincos(coords, width):
    "Summed sin cos embeddings of x and y, coords of shape ... x 2."
    coords = np.asarray(coords, dtype=np.float64)
    return sincos_embedding(coords[..., 0], width) + sincos_embedding(coords[..., 1], width)


def relative_coords(points, variant):
    """
    Coordinates entering the positional embedding, T x N x 2. Apex variants subtract
    the first-frame apex point from every frame.
    """
    coords = points.coords.astype(np.float64)

    if variant in (viact.POS_APEX_SINCOS, viact.POS_APEX_LINEAR):
        if points.apex_index is None:
            raise UsageError('Positional embedding "{}" needs an apex point.'.format(variant))
        coords = coords - coords[0, points.apex_index]

    return coords


class TokenBatch(object):

    """
    Token matrix (M x k) and, per row, the (frame, point) it came from. The class token
    row has origin (-1, -1).
    """

    def __init__(self, tokens, origin):
        self.tokens = tokens
        self.origin = np.asarray(origin, dtype=np.int64)

        if self.origin.shape != (tokens.shape[0], 2):
            raise ShapeError('Token origin {} does not match {} tokens.'.format(self.origin.shape, tokens.shape[0]))

    @property
    def has_class_token(self):
        return len(self.origin) > 0 and self.origin[0, 0] == CLASS_ORIGIN

    def __len__(self):
        return self.tokens.shape[0]

    def __str__(self):
        return '<TokenBatch:%d>' % len(self)


class EncoderOutput(object):

    """
    Encodings (M x k) with the per-block attention weights (heads x M x M) when they
    were retained.
    """

    def __init__(self, encodings, origin, attention=None):
        self.encodings = encodings
        self.origin = origin
        self.attention = attention

    @property
    def has_class_token(self):
        return len(self.origin) > 0 and self.origin[0, 0] == CLASS_ORIGIN

    def class_encoding(self):
        if not self.has_class_token:
            raise UsageError('Model was built without a class token.')

        return nx.take_rows(self.encodings, [0])

    def point_encodings(self):
        "Encodings of the anatomical tokens only."
        if self.has_class_token:
            return nx.take_rows(self.encodings, np.arange(1, self.encodings.shape[0]))

        return self.encodings


class Tokenizer(Module):

    """
    Patch embedding (j^2 -> k), positional embedding of the point coordinates and a
    learnable temporal embedding per frame, summed per token.
    """

    def __init__(self, config, rng):
        self.config = config
        width = config.embed_dim

        self.patch_embed = Linear(config.patch_size ** 2, width, rng)

        if config.pos_embed in (viact.POS_POINT_LINEAR, viact.POS_APEX_LINEAR):
            self.pos_linear = Linear(2, width, rng)
        else:
            self.pos_linear = None

        self.temporal = nx.Parameter(trunc_normal((config.frames, width), rng))

        if config.use_class_token:
            self.class_token = nx.Parameter(trunc_normal((1, width), rng))
        else:
            self.class_token = None

    def embed_patches(self, patches, index=None):
        "Rows of flattened patches mapped to the embedding width, T*N x k."
        flat = patches.flat()
        if index is not None:
            flat = flat[index]

        return self.patch_embed(nx.Tensor(flat))

    def positional_embed(self, points, index=None):
        coords = relative_coords(points, self.config.pos_embed).reshape(-1, 2)
        if index is not None:
            coords = coords[index]

        if self.pos_linear is not None:
            return self.pos_linear(nx.Tensor(coords))

        return nx.Tensor(point_sincos(coords, self.config.embed_dim))

    def temporal_embed(self, frame_index):
        frame_index = np.asarray(frame_index, dtype=np.int64)

        if frame_index.size and (frame_index.min() < 0 or frame_index.max() >= self.config.frames):
            raise UsageError('Frame index outside [0, {}).'.format(self.config.frames))

        return nx.take_rows(self.temporal, frame_index.reshape(-1))

    def __call__(self, patches, points, index=None):
        """
        :Args:
          - patches: PatchSet T x N x j x j
          - points: PointTrajectorySet the patches were sampled at
          - index: Flat token indices (t*N + i) to keep, all tokens when None

        :Returns:
          Instance of TokenBatch.
        """
        frames, count, size, _ = patches.patches.shape

        if (frames, count) != (points.frames, points.points):
            raise UsageError('Patches {}x{} do not match trajectories {}x{}.'.format(
                frames, count, points.frames, points.points))

        if size != self.config.patch_size:
            raise UsageError('Patch size {} does not match model patch size {}.'.format(size, self.config.patch_size))

        if frames > self.config.frames:
            raise UsageError('Clip has {} frames, model supports {}.'.format(frames, self.config.frames))

        if index is None:
            index = np.arange(frames * count)
        index = np.asarray(index, dtype=np.int64)

        frame_of = index // count
        point_of = index % count

        tokens = self.embed_patches(patches, index) + self.positional_embed(points, index)
        tokens = tokens + self.temporal_embed(frame_of)
        origin = np.stack([frame_of, point_of], axis=1)

        if self.class_token is not None:
            tokens = nx.concat_rows([self.class_token, tokens])
            origin = np.concatenate([[[CLASS_ORIGIN, CLASS_ORIGIN]], origin], axis=0)

        return TokenBatch(tokens, origin)


# Attention maps

def normalize_map(values):
    "Min-max normalisation to [0, 1]; constant maps become zeros."
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()

    if high - low <= 0.0:
        return np.zeros(values.shape, dtype=np.float32)

    return ((values - low) / (high - low)).astype(np.float32)


def attention_maps(output, block, head, frames, points):
    """
    Class-token attention of one head, reshaped to frames x points and normalised over
    the whole sequence.

    :Args:
      - output: EncoderOutput with retained attention
      - block: Block index, negative values count from the end
      - head: Head index
      - frames, points: Layout of the anatomical tokens

    :Returns:
      Array frames x points with values in [0, 1].
    """
    if not output.has_class_token:
        raise UsageError('Attention maps need a class token.')

    if output.attention is None:
        raise UsageError('Attention was not retained; encode with keep_attention=True.')

    if not output.attention:
        raise UsageError('Model has no transformer blocks.')

    weights = output.attention[block]

    if not 0 <= head < weights.shape[0]:
        raise UsageError('Head {} outside [0, {}).'.format(head, weights.shape[0]))

    row = weights[head, 0, 1:]

    if row.size != frames * points:
        raise ShapeError('Attention row has {} entries, expected {}x{}.'.format(row.size, frames, points))

    return normalize_map(row.reshape(frames, points))


# Model

class ViACT(Module):

    """
    Tokenizer, transformer encoder and the three task heads.
    """

    def __init__(self, config, seed=0, rng=None):
        """
        :Args:
          - config: Instance of ModelConfig
          - seed: Seed of the 'init' random stream (optional)
          - rng: Generator to draw initial weights from instead of the seed (optional)
        """
        config.validate()
        rng = rng if rng is not None else rng_stream(seed, 'init')

        self.config = config
        self.tokenizer = Tokenizer(config, rng)
        self.encoder = Transformer(config.embed_dim, config.depth, config.heads, config.mlp_hidden, rng)
        self.track_out = Linear(config.embed_dim, 2, rng)
        self.class_out = Linear(config.embed_dim, 1, rng)
        self.ef_out = Linear(config.embed_dim, 1, rng)

    def extract_patches(self, clip, points):
        return extract_patches(clip, points, self.config.patch_size)

    def assemble_tokens(self, patches, points, index=None):
        return self.tokenizer(patches, points, index)

    def encode(self, tokens, keep_attention=False):
        if tokens.tokens.shape[1] != self.config.embed_dim:
            raise ShapeError('Token width {} does not match embedding dimension {}.'.format(
                tokens.tokens.shape[1], self.config.embed_dim))

        encodings, attention = self.encoder(tokens.tokens, keep_attention)

        return EncoderOutput(encodings, tokens.origin, attention)

    def forward(self, clip, points, keep_attention=False):
        "Samples patches at `points`, tokenizes and encodes the clip."
        patches = self.extract_patches(clip, points)
        return self.encode(self.assemble_tokens(patches, points), keep_attention)

    def tracking_head(self, output, frames, points):
        "Displacements T x N x 2 for every anatomical token."
        return nx.reshape(self.track_out(output.point_encodings()), (frames, points, 2))

    def classification_head(self, output):
        return nx.reshape(self.class_out(output.class_encoding()), (1,))

    def ef_head(self, output):
        "Ejection fraction prediction in (0, 1)."
        return nx.sigmoid(nx.reshape(self.ef_out(output.class_encoding()), (1,)))

    def attention_maps(self, output, block=-1, head=0):
        frames = output.origin[:, 0].max() + 1
        points = output.origin[:, 1].max() + 1
        return attention_maps(output, block, head, int(frames), int(points))

    def track(self, clip, queries, refine_passes=0):
        """
        Tracks query points through the clip: the queries are copied to every frame,
        displaced by the tracking head and, for each refinement pass, resampled at the
        displaced points and displaced again.

        :Args:
          - clip: Instance of Clip
          - queries: PointTrajectorySet whose first frame holds the query points
          - refine_passes: Extra passes after the first (optional)

        :Returns:
          Instance of PointTrajectorySet with clip.frame_count frames.
        """
        frames = clip.frame_count
        current = np.repeat(queries.coords[:1], frames, axis=0).astype(np.float32)

        with nx.no_grad():
            for _ in range(1 + refine_passes):
                points = PointTrajectorySet(current, queries.apex_index)
                delta = self.tracking_head(self.forward(clip, points), frames, points.points)
                current = current + delta.data

        return PointTrajectorySet(current, queries.apex_index)

    def __str__(self):
        return '<ViACT:%s>' % self.config


# Task losses

def tracking_loss(delta, initial, target):
    """
    Sum of absolute differences between the target trajectories and the initial points
    deformed by `delta`.
    """
    predicted = delta + nx.Tensor(initial.coords)
    return nx.l1(predicted, nx.Tensor(target.coords), reduction='sum')


def classification_loss(logit, label):
    return nx.bce_with_logit(logit, [float(label)])


def ef_loss(prediction, target):
    target = float(target)

    if not 0.0 <= target <= 1.0:
        raise UsageError('EF target must be a fraction in [0, 1], got {}.'.format(target))

    return nx.mse(prediction, nx.Tensor([target]))
