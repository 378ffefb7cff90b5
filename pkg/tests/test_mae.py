import numpy as np
import pytest

from viact import numerics as nx
from viact.exceptions import UsageError
from viact.geometry import Clip, PointTrajectorySet
from viact.mae import (MaskPlan, DecoderConfig, sample_mask, masked_count, attention_cost, mae_forward,
                       token_cost_profile)
from viact.model import ModelConfig, ViACT


class TestMask(object):

    def test_counts(self, rng):
        plan = sample_mask(18 * 84, 0.9, rng)

        assert len(plan.masked) == 1360
        assert len(plan.keep) == 152
        assert np.array_equal(np.union1d(plan.keep, plan.masked), np.arange(1512))

    def test_sorted_and_deterministic(self):
        a = sample_mask(100, 0.75, np.random.default_rng(3))
        b = sample_mask(100, 0.75, np.random.default_rng(3))

        np.testing.assert_array_equal(a.masked, b.masked)
        assert np.all(np.diff(a.masked) > 0)

    def test_invalid_ratios(self, rng):
        for ratio in (0.0, 1.0, -0.1):
            with pytest.raises(UsageError):
                sample_mask(100, ratio, rng)

        with pytest.raises(UsageError):
            sample_mask(3, 0.2, rng)

    def test_plan_rejects_repeated_indices(self):
        with pytest.raises(UsageError):
            MaskPlan(5, 0.4, [1, 1])

    def test_masked_count_floors(self):
        assert masked_count(1512, 0.8) == 1209
        assert masked_count(1512, 0.95) == 1436


class TestDecoderConfig(object):

    def test_wider_than_encoder_is_rejected(self, micro_config):
        with pytest.raises(UsageError):
            DecoderConfig(dec_dim=16, dec_heads=2).validate(micro_config)

    def test_round_trip(self):
        config = DecoderConfig.preset('desk')
        assert DecoderConfig.from_dict(config.as_dict()) == config


class TestAnatomicalMAE(object):

    def test_restore_order_places_mask_tokens(self, micro_mae):
        plan = MaskPlan(6, 0.5, [4, 0, 2])
        micro_mae.mask_token.data[...] = -1.0
        visible = nx.Tensor(np.repeat(plan.keep[:, np.newaxis], 4, axis=1))

        restored = micro_mae.restore_order(visible, plan).data

        np.testing.assert_array_equal(restored[:, 0], [-1, 1, -1, 3, -1, 5])

    def test_forward_shapes_and_gradients(self, micro_mae, micro_clip, micro_points, rng):
        plan = sample_mask(6, 0.5, rng)

        loss, recon = micro_mae(micro_clip, micro_points, plan)
        assert recon.shape == (3, 4)
        assert loss.item() > 0.0

        micro_mae.zero_grad()
        nx.backward(loss)

        assert micro_mae.model.tokenizer.patch_embed.weight.grad is not None
        assert micro_mae.recon.weight.grad is not None
        # heads play no part in reconstruction
        assert micro_mae.model.track_out.weight.grad is None

    def test_loss_only_sees_masked_targets(self, micro_mae, micro_clip, micro_points):
        plan = MaskPlan(6, 0.5, [1, 3, 4])
        targets = micro_mae.model.extract_patches(micro_clip, micro_points).flat().copy()

        with nx.no_grad():
            base, _ = mae_forward(micro_mae, micro_clip, micro_points, plan, targets)
            targets[plan.keep] = 0.5
            kept, _ = mae_forward(micro_mae, micro_clip, micro_points, plan, targets)
            targets[plan.masked[0]] += 0.5
            changed, _ = mae_forward(micro_mae, micro_clip, micro_points, plan, targets)

        assert kept.item() == base.item()
        assert changed.item() != base.item()

    def test_pixels_outside_patches_do_not_matter(self, micro_mae, micro_clip, micro_points):
        plan = MaskPlan(6, 0.5, [0, 2, 5])
        frames = micro_clip.frames.copy()
        # points lie in [2, 5] with 2 x 2 patches, border pixels are never sampled
        frames[:, 0, :] = 1.0 - frames[:, 0, :]
        frames[:, :, 7] = 1.0 - frames[:, :, 7]

        with nx.no_grad():
            a, _ = micro_mae(micro_clip, micro_points, plan)
            b, _ = micro_mae(Clip(frames), micro_points, plan)

        assert a.item() == b.item()

    def test_encoder_sees_visible_tokens_only(self, rng):
        config = ModelConfig(embed_dim=8, heads=2, depth=1, patch_size=2)
        model = ViACT(config)
        clip = Clip(rng.uniform(size=(18, 32, 32)))
        points = PointTrajectorySet(rng.uniform(4.0, 28.0, size=(18, 84, 2)))
        plan = sample_mask(18 * 84, 0.9, rng)

        patches = model.extract_patches(clip, points)
        batch = model.assemble_tokens(patches, points, plan.keep)

        assert len(batch) == 153
        np.testing.assert_array_equal(batch.origin[1:, 0] * 84 + batch.origin[1:, 1], plan.keep)

    def test_decoder_parameters_exclude_model(self, micro_mae):
        names = list(micro_mae.decoder_parameters())

        assert names
        assert not any(name.startswith('model.') for name in names)
        assert 'mask_token' in names

    def test_reconstruct_keeps_visible_patches(self, micro_mae, micro_clip, micro_points):
        plan = MaskPlan(6, 0.5, [0, 1, 2])
        result = micro_mae.reconstruct(micro_clip, micro_points, plan)

        np.testing.assert_array_equal(result['reconstructed'][1], result['original'][1])
        assert np.all(result['masked'][0] == 0.0)
        assert result['reconstructed'].min() >= 0.0

    def test_plan_size_must_match(self, micro_mae, micro_clip, micro_points):
        with pytest.raises(UsageError):
            micro_mae(micro_clip, micro_points, MaskPlan(8, 0.5, [0, 1, 2, 3]))


class TestTokenCost(object):

    def test_profile_values(self):
        rows = token_cost_profile([('tiny', ModelConfig.preset('tiny'))])
        row = rows[0]

        assert row['tokens_full'] == 3528
        assert row['tokens_anat'] == 1512
        assert row['token_ratio'] == 0.4286
        assert row['tokens_visible'] == 152
        assert row['tokens_visible_full'] == 353
        assert row['attn_cost_estimate'] == 12 * 1512 ** 2 * 192

    def test_cost_is_quadratic_in_tokens(self):
        assert attention_cost(200, 8, 2) == 4 * attention_cost(100, 8, 2)
        assert attention_cost(100, 16, 2) == 2 * attention_cost(100, 8, 2)

    def test_scales_share_token_counts(self):
        configs = [(name, ModelConfig.preset(name)) for name in ('tiny', 'small', 'base')]
        rows = token_cost_profile(configs)

        assert [row['tokens_anat'] for row in rows] == [1512] * 3
        assert rows[2]['attn_cost_estimate'] == 4 * rows[0]['attn_cost_estimate']

    def test_frame_must_divide_by_patch(self):
        with pytest.raises(UsageError):
            token_cost_profile([('tiny', ModelConfig.preset('tiny'))], height=100, width=224)
