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
Anatomical masked autoencoder.

A random subset of the (frame, point) tokens is hidden, the encoder sees the rest plus
the class token, and a small decoder reconstructs the pixels of the hidden patches.
"""

import logging
import math
from collections import OrderedDict

import numpy as np

import viact
from viact import numerics as nx
from viact.exceptions import UsageError
from viact.geometry import PatchSet
from viact.model import Module, Linear, Transformer, trunc_normal, relative_coords, point_sincos
from viact.utils import rng_stream


log = logging.getLogger(__name__)


class MaskPlan(object):

    """
    Partition of the T*N anatomical token indices into masked and kept sets, both
    sorted. The class token is never part of a plan.
    """

    def __init__(self, total_tokens, mask_ratio, masked):
        masked = np.sort(np.asarray(masked, dtype=np.int64))

        if len(np.unique(masked)) != len(masked) or (masked.size and (masked[0] < 0 or masked[-1] >= total_tokens)):
            raise UsageError('Masked indices must be distinct and inside [0, {}).'.format(total_tokens))

        self.total_tokens = int(total_tokens)
        self.mask_ratio = float(mask_ratio)
        self.masked = masked
        self.keep = np.setdiff1d(np.arange(total_tokens, dtype=np.int64), masked)

    def __str__(self):
        return '<MaskPlan:%d/%d>' % (len(self.masked), self.total_tokens)


def masked_count(total, ratio):
    return int(math.floor(ratio * total))


def sample_mask(total_tokens, mask_ratio, rng):
    """
    Uniformly random subset of floor(ratio * M) token indices, without replacement.

    :Args:
      - total_tokens: Number of anatomical tokens M = T*N
      - mask_ratio: Fraction in (0, 1)
      - rng: Instance of numpy.random.Generator

    :Returns:
      Instance of MaskPlan.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise UsageError('Mask ratio must lie in (0, 1), got {}.'.format(mask_ratio))

    count = masked_count(total_tokens, mask_ratio)

    if count == 0:
        raise UsageError('Mask ratio {} masks no token out of {}.'.format(mask_ratio, total_tokens))

    if count == total_tokens:
        raise UsageError('Mask ratio {} leaves no visible token out of {}.'.format(mask_ratio, total_tokens))

    masked = rng.permutation(total_tokens)[:count]

    return MaskPlan(total_tokens, mask_ratio, masked)


class DecoderConfig(object):

    FIELDS = ('dec_dim', 'dec_depth', 'dec_heads', 'dec_mlp_hidden')

    PRESETS = {
        'default': {'dec_dim': 96, 'dec_depth': 4, 'dec_heads': 3},
        'micro': {'dec_dim': 4, 'dec_depth': 1, 'dec_heads': 2},
        'desk': {'dec_dim': 24, 'dec_depth': 1, 'dec_heads': 3},
    }

    def __init__(self, dec_dim=96, dec_depth=4, dec_heads=3, dec_mlp_hidden=None):
        self.dec_dim = int(dec_dim)
        self.dec_depth = int(dec_depth)
        self.dec_heads = int(dec_heads)
        self.dec_mlp_hidden = int(dec_mlp_hidden) if dec_mlp_hidden is not None else 4 * self.dec_dim

        self.validate()

    @classmethod
    def preset(cls, name, **overrides):
        if name not in cls.PRESETS:
            raise UsageError('Unknown decoder preset "{}".'.format(name))

        values = dict(cls.PRESETS[name])
        values.update(overrides)

        return cls(**values)

    def validate(self, model_config=None):
        if self.dec_dim < 1 or self.dec_heads < 1 or self.dec_depth < 0 or self.dec_mlp_hidden < 1:
            raise UsageError('Decoder sizes must be positive.')

        if self.dec_dim % self.dec_heads != 0:
            raise UsageError('Decoder width {} is not divisible by {} heads.'.format(self.dec_dim, self.dec_heads))

        if model_config is not None:
            if self.dec_dim > model_config.embed_dim:
                raise UsageError('Decoder width {} exceeds encoder width {}.'.format(
                    self.dec_dim, model_config.embed_dim))

            if model_config.pos_embed.endswith('sincos') and self.dec_dim % 2 != 0:
                raise UsageError('sin cos embeddings need an even decoder width.')

    def as_dict(self):
        return OrderedDict((name, getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def from_dict(cls, values):
        return cls(**dict((name, values[name]) for name in cls.FIELDS if name in values))

    def mismatch(self, other):
        for name in self.FIELDS:
            if getattr(self, name) != getattr(other, name):
                return name
        return None

    def __eq__(self, other):
        return isinstance(other, DecoderConfig) and self.mismatch(other) is None

    def __ne__(self, other):
        return not self.__eq__(other)

    def __str__(self):
        return '<DecoderConfig:%d/%d/%d>' % (self.dec_dim, self.dec_depth, self.dec_heads)


class AnatomicalMAE(Module):

    """
    Pre-training wrapper around a ViACT model.

    The wrapped model's parameters appear under the 'model.' prefix, everything else
    belongs to the decoder and is discarded after pre-training.
    """

    def __init__(self, model, decoder_config=None, seed=0, rng=None):
        decoder_config = decoder_config or DecoderConfig()
        decoder_config.validate(model.config)

        rng = rng if rng is not None else rng_stream(seed, 'decoder-init')
        config = model.config
        width = decoder_config.dec_dim

        self.model = model
        self.decoder_config = decoder_config

        self.enc_to_dec = Linear(config.embed_dim, width, rng)
        self.mask_token = nx.Parameter(trunc_normal((1, width), rng))

        if config.pos_embed in (viact.POS_POINT_LINEAR, viact.POS_APEX_LINEAR):
            self.dec_pos_linear = Linear(2, width, rng)
        else:
            self.dec_pos_linear = None

        self.dec_temporal = nx.Parameter(trunc_normal((config.frames, width), rng))
        self.decoder = Transformer(width, decoder_config.dec_depth, decoder_config.dec_heads,
                                   decoder_config.dec_mlp_hidden, rng)
        self.recon = Linear(width, config.patch_size ** 2, rng)

    def decoder_parameters(self):
        return OrderedDict((name, p) for name, p in self.named_parameters().items() if not name.startswith('model.'))

    def decoder_state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.decoder_parameters().items())

    def restore_order(self, visible, plan):
        """
        Puts the visible decoder tokens back at their original slots and fills the
        masked slots with the shared mask token.

        :Args:
          - visible: Tensor of len(plan.keep) rows, ordered like plan.keep
          - plan: Instance of MaskPlan

        :Returns:
          Tensor with plan.total_tokens rows, row m belonging to token m.
        """
        if visible.shape[0] != len(plan.keep):
            raise UsageError('Got {} visible tokens for a plan keeping {}.'.format(visible.shape[0], len(plan.keep)))

        filled = nx.concat_rows([visible, nx.repeat_rows(self.mask_token, len(plan.masked))])
        order = np.argsort(np.concatenate([plan.keep, plan.masked]), kind='stable')

        return nx.take_rows(filled, order)

    def decoder_embed(self, points):
        "Positional plus temporal decoder terms for all T*N slots, from the original points."
        coords = relative_coords(points, self.model.config.pos_embed).reshape(-1, 2)

        if self.dec_pos_linear is not None:
            pos = self.dec_pos_linear(nx.Tensor(coords))
        else:
            pos = nx.Tensor(point_sincos(coords, self.decoder_config.dec_dim))

        frame_of = np.repeat(np.arange(points.frames), points.points)

        return pos + nx.take_rows(self.dec_temporal, frame_of)

    def forward(self, clip, points, plan, targets=None):
        """
        Masked reconstruction loss of one clip.

        :Args:
          - clip: Instance of Clip
          - points: PointTrajectorySet the patches are sampled at
          - plan: MaskPlan over points.frames * points.points tokens
          - targets: Pixel targets, PatchSet or array T*N x j^2 (optional, the sampled patches by default)

        :Returns:
          Tuple (loss, reconstructions) with reconstructions of shape |masked| x j^2.
        """
        total = points.frames * points.points

        if plan.total_tokens != total:
            raise UsageError('Mask plan covers {} tokens, clip has {}.'.format(plan.total_tokens, total))

        model = self.model
        patches = model.extract_patches(clip, points)

        batch = model.assemble_tokens(patches, points, plan.keep)
        encoded = model.encode(batch)
        projected = self.enc_to_dec(encoded.encodings)

        offset = 1 if batch.has_class_token else 0
        visible = nx.take_rows(projected, np.arange(offset, projected.shape[0]))

        slots = self.restore_order(visible, plan) + self.decoder_embed(points)

        if offset:
            slots = nx.concat_rows([nx.take_rows(projected, [0]), slots])

        decoded, _ = self.decoder(slots)
        reconstructions = self.recon(nx.take_rows(decoded, plan.masked + offset))

        if targets is None:
            targets = patches.flat()
        elif isinstance(targets, PatchSet):
            targets = targets.flat()

        targets = np.asarray(targets, dtype=np.float32).reshape(total, -1)
        loss = nx.mse(reconstructions, nx.Tensor(targets[plan.masked]))

        return loss, reconstructions

    __call__ = forward

    def reconstruct(self, clip, points, plan):
        """
        Patch stacks for inspecting a reconstruction, each T x N x j x j:
        'original', 'masked' (hidden patches zeroed) and 'reconstructed' (hidden
        patches replaced by the decoder output).
        """
        with nx.no_grad():
            loss, recon = self.forward(clip, points, plan)

        original = self.model.extract_patches(clip, points).patches
        shape = original.shape

        flat_masked = original.reshape(plan.total_tokens, -1).copy()
        flat_masked[plan.masked] = 0.0

        flat_recon = original.reshape(plan.total_tokens, -1).copy()
        flat_recon[plan.masked] = np.clip(recon.data, 0.0, 1.0)

        return {'original': original,
                'masked': flat_masked.reshape(shape),
                'reconstructed': flat_recon.reshape(shape),
                'loss': loss.item()}

    def __str__(self):
        return '<AnatomicalMAE:%s,%s>' % (self.model.config, self.decoder_config)


def mae_forward(mae, clip, points, plan, targets=None):
    "Masked reconstruction loss and pixel predictions of one window under `plan`."
    return mae.forward(clip, points, plan, targets)


# Token and attention cost comparison

def attention_cost(tokens, width, depth):
    "Attention cost estimate depth * M^2 * k."
    return int(depth) * int(tokens) ** 2 * int(width)


def token_cost_profile(configs, height=224, width=224, mask_ratio=viact.DEFAULT_MASK_RATIO):
    """
    Token counts and attention-cost estimates of anatomical tokenization against
    tokenizing the whole video into a j x j grid.

    :Args:
      - configs: Sequence of (scale name, ModelConfig)
      - height, width: Frame size of the full-video comparator
      - mask_ratio: Ratio for the encoder-visible counts

    :Returns:
      List of records, one per config.
    """
    rows = []

    for scale, config in configs:
        j = config.patch_size

        if height % j != 0 or width % j != 0:
            raise UsageError('Frame {}x{} is not divisible by patch size {}.'.format(height, width, j))

        tokens_full = config.frames * (height // j) * (width // j)
        tokens_anat = config.frames * config.points
        visible_anat = tokens_anat - masked_count(tokens_anat, mask_ratio)
        visible_full = tokens_full - masked_count(tokens_full, mask_ratio)

        row = OrderedDict()
        row['scale'] = scale
        row['embed_dim'] = config.embed_dim
        row['depth'] = config.depth
        row['mask_ratio'] = mask_ratio
        row['tokens_full'] = tokens_full
        row['tokens_anat'] = tokens_anat
        row['token_ratio'] = round(tokens_anat / float(tokens_full), 4)
        row['tokens_visible'] = visible_anat
        row['tokens_visible_full'] = visible_full
        row['attn_cost_estimate'] = attention_cost(tokens_anat, config.embed_dim, config.depth)
        row['attn_cost_full'] = attention_cost(tokens_full, config.embed_dim, config.depth)
        row['attn_cost_visible'] = attention_cost(visible_anat, config.embed_dim, config.depth)
        row['attn_cost_visible_full'] = attention_cost(visible_full, config.embed_dim, config.depth)

        log.debug('Profile {}: {} anatomical vs {} full tokens.'.format(scale, tokens_anat, tokens_full))
        rows.append(row)

    return rows
