import numpy as np
import pytest

import viact
from viact import numerics as nx
from viact.exceptions import CheckpointError, UsageError
from viact.geometry import PointTrajectorySet
from viact.model import (ModelConfig, ViACT, sincos_embedding, point_sincos, relative_coords, normalize_map,
                         tracking_loss, classification_loss, ef_loss)


# a key bias moves every score of a softmax row equally, its gradient is zero
SHIFT_INVARIANT = ('encoder.blocks.0.attn.key.bias',)


class TestModelConfig(object):

    def test_presets(self):
        tiny = ModelConfig.preset('tiny')

        assert (tiny.embed_dim, tiny.heads, tiny.depth, tiny.mlp_hidden) == (192, 3, 12, 768)
        assert ModelConfig.preset('base').mlp_hidden == 3072
        assert tiny.tokens == 18 * 84 + 1

    def test_invalid_values(self):
        with pytest.raises(UsageError):
            ModelConfig(embed_dim=10, heads=3)

        with pytest.raises(UsageError):
            ModelConfig(pos_embed='grid')

        with pytest.raises(UsageError):
            ModelConfig(embed_dim=9, heads=3, pos_embed=viact.POS_POINT_SINCOS)

        with pytest.raises(UsageError):
            ModelConfig.preset('huge')

    def test_dict_round_trip_and_mismatch(self, micro_config):
        copy = ModelConfig.from_dict(micro_config.as_dict())

        assert copy == micro_config
        assert micro_config.mismatch(ModelConfig.preset('micro', heads=4)) == 'heads'


class TestPositionalEmbedding(object):

    def test_sincos_values(self):
        np.testing.assert_allclose(sincos_embedding(0.0, 4), [0.0, 1.0, 0.0, 1.0])
        np.testing.assert_allclose(sincos_embedding(1.0, 4), [np.sin(1.0), np.cos(1.0), np.sin(0.01), np.cos(0.01)])

    def test_point_sincos_sums_axes(self):
        expected = sincos_embedding(3.0, 6) + sincos_embedding(5.0, 6)
        np.testing.assert_allclose(point_sincos([3.0, 5.0], 6), expected)

    def test_odd_width_is_rejected(self):
        with pytest.raises(UsageError):
            sincos_embedding(1.0, 5)

    def test_apex_variant_is_relative_to_first_frame_apex(self):
        points = PointTrajectorySet([[[1.0, 2.0], [4.0, 6.0]], [[2.0, 2.0], [5.0, 8.0]]], apex_index=1)
        coords = relative_coords(points, viact.POS_APEX_SINCOS)

        np.testing.assert_allclose(coords[0, 1], [0.0, 0.0])
        np.testing.assert_allclose(coords[1, 1], [1.0, 2.0])
        np.testing.assert_allclose(coords[1, 0], [-2.0, -4.0])

    def test_apex_variant_needs_apex(self, micro_clip, rng):
        model = ViACT(ModelConfig.preset('micro', pos_embed=viact.POS_APEX_LINEAR))
        points = PointTrajectorySet(rng.uniform(2.0, 5.0, size=(2, 3, 2)))

        with pytest.raises(UsageError):
            model.forward(micro_clip, points)


class TestForward(object):

    def test_shapes(self, micro_model, micro_clip, micro_points):
        output = micro_model.forward(micro_clip, micro_points, keep_attention=True)

        assert output.encodings.shape == (7, 8)
        assert len(output.attention) == 1
        assert output.attention[0].shape == (2, 7, 7)
        assert micro_model.tracking_head(output, 2, 3).shape == (2, 3, 2)
        assert micro_model.classification_head(output).shape == (1,)

        ef = micro_model.ef_head(output).item()
        assert 0.0 < ef < 1.0

    def test_attention_rows_sum_to_one(self, micro_model, micro_clip, micro_points):
        output = micro_model.forward(micro_clip, micro_points, keep_attention=True)
        np.testing.assert_allclose(output.attention[0].sum(axis=-1), 1.0, atol=1e-5)

    def test_origin_is_frame_major(self, micro_model, micro_clip, micro_points):
        output = micro_model.forward(micro_clip, micro_points)

        np.testing.assert_array_equal(output.origin[0], [-1, -1])
        np.testing.assert_array_equal(output.origin[1:], [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]])

    def test_depth_zero_is_final_norm(self, micro_clip, micro_points):
        model = ViACT(ModelConfig.preset('micro', depth=0))
        patches = model.extract_patches(micro_clip, micro_points)
        tokens = model.assemble_tokens(patches, micro_points)

        output = model.encode(tokens, keep_attention=True)
        expected = nx.layer_norm(tokens.tokens, model.encoder.norm.gamma, model.encoder.norm.beta)

        np.testing.assert_allclose(output.encodings.data, expected.data, atol=1e-6)
        assert output.attention == []

    def test_point_permutation_permutes_encodings(self, micro_model, micro_clip, micro_points):
        order = np.array([2, 0, 1])
        plain = micro_model.forward(micro_clip, micro_points).encodings.data
        permuted = micro_model.forward(micro_clip, micro_points.permuted(order)).encodings.data

        np.testing.assert_allclose(permuted[0], plain[0], atol=1e-5)

        for t in range(2):
            for i in range(3):
                np.testing.assert_allclose(permuted[1 + 3 * t + i], plain[1 + 3 * t + order[i]], atol=1e-5)

    def test_point_permutation_keeps_logit(self, micro_model, micro_clip, micro_points):
        order = np.array([1, 2, 0])
        plain = micro_model.classification_head(micro_model.forward(micro_clip, micro_points)).item()
        permuted = micro_model.classification_head(micro_model.forward(micro_clip, micro_points.permuted(order)))

        assert permuted.item() == pytest.approx(plain, abs=1e-5)

    def test_apex_embedding_ignores_joint_shift(self, rng):
        from viact.geometry import Clip

        model = ViACT(ModelConfig.preset('micro', pos_embed=viact.POS_APEX_LINEAR), seed=2)

        frames = rng.uniform(size=(2, 12, 12))
        shifted = np.zeros((2, 15, 16))
        shifted[:, 3:, 4:] = frames

        # eighths are exact in float32
        coords = rng.integers(16, 64, size=(2, 3, 2)) / 8.0
        points = PointTrajectorySet(coords, apex_index=1)
        moved = PointTrajectorySet(coords + [4.0, 3.0], apex_index=1)

        plain = model.forward(Clip(frames), points).encodings.data
        np.testing.assert_allclose(model.forward(Clip(shifted), moved).encodings.data, plain, atol=1e-5)

    def test_too_many_frames(self, micro_model, rng):
        from viact.geometry import Clip

        clip = Clip(rng.uniform(size=(3, 8, 8)))
        points = PointTrajectorySet(np.full((3, 3, 2), 4.0))

        with pytest.raises(UsageError):
            micro_model.forward(clip, points)

    def test_seed_determines_weights(self, micro_config):
        a = ViACT(micro_config, seed=7).state_dict()
        b = ViACT(micro_config, seed=7).state_dict()
        c = ViACT(micro_config, seed=8).state_dict()

        assert list(a) == list(b)
        assert all(np.array_equal(a[name], b[name]) for name in a)
        assert not np.array_equal(a['tokenizer.patch_embed.weight'], c['tokenizer.patch_embed.weight'])


class TestGradients(object):

    def combined_loss(self, model, clip, points, target):
        output = model.forward(clip, points)
        delta = model.tracking_head(output, points.frames, points.points)

        loss = tracking_loss(delta, points, target)
        loss = loss + classification_loss(model.classification_head(output), 1)
        loss = loss + ef_loss(model.ef_head(output), 0.6)

        return loss

    def test_end_to_end_gradcheck(self, micro_model, micro_clip, micro_points, rng):
        for p in micro_model.named_parameters().values():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)

        with nx.no_grad():
            output = micro_model.forward(micro_clip, micro_points)
            delta = micro_model.tracking_head(output, 2, 3).data

        # every residual starts one pixel away so no finite difference crosses the kink of |x|
        target = micro_points.shifted(0.0)
        target.coords[...] = micro_points.coords + delta + 1.0

        params = [p for name, p in micro_model.named_parameters().items() if name not in SHIFT_INVARIANT]

        errors = nx.gradient_errors(lambda *_: self.combined_loss(micro_model, micro_clip, micro_points, target),
                                    params, h=1e-2)

        assert max(errors) < 2e-2

    def test_all_parameters_receive_gradient(self, micro_model, micro_clip, micro_points):
        target = micro_points.shifted(3.0)

        micro_model.zero_grad()
        nx.backward(self.combined_loss(micro_model, micro_clip, micro_points, target))

        for name, p in micro_model.named_parameters().items():
            if name in SHIFT_INVARIANT:
                continue
            assert p.grad is not None, name
            assert np.any(p.grad != 0), name


class TestStateDict(object):

    def test_round_trip(self, micro_config):
        source = ViACT(micro_config, seed=1)
        target = ViACT(micro_config, seed=2)

        target.load_state_dict(source.state_dict())

        for name, value in source.state_dict().items():
            np.testing.assert_array_equal(target.state_dict()[name], value)

    def test_shape_mismatch_names_parameter(self, micro_config):
        state = ViACT(micro_config).state_dict()
        state['class_out.weight'] = np.zeros((4, 1))

        with pytest.raises(CheckpointError) as err:
            ViACT(micro_config).load_state_dict(state)

        assert err.value.field == 'class_out.weight'


class TestTrackAndAttention(object):

    def test_track_keeps_frame_count(self, micro_model, micro_clip, micro_points):
        tracked = micro_model.track(micro_clip, micro_points, refine_passes=1)

        assert tracked.coords.shape == (2, 3, 2)
        assert tracked.apex_index == micro_points.apex_index

    def test_track_any_point_count(self, micro_model, micro_clip, rng):
        for count in (1, 3, 7):
            queries = PointTrajectorySet(rng.uniform(2.0, 5.0, size=(1, count, 2)))
            assert micro_model.track(micro_clip, queries).coords.shape == (2, count, 2)

    def test_attention_maps(self, micro_model, micro_clip, micro_points):
        output = micro_model.forward(micro_clip, micro_points, keep_attention=True)
        maps = micro_model.attention_maps(output, head=1)

        assert maps.shape == (2, 3)
        assert maps.min() == pytest.approx(0.0)
        assert maps.max() == pytest.approx(1.0)

    def test_attention_maps_need_retained_weights(self, micro_model, micro_clip, micro_points):
        with pytest.raises(UsageError):
            micro_model.attention_maps(micro_model.forward(micro_clip, micro_points))

    def test_constant_map_normalises_to_zero(self):
        np.testing.assert_array_equal(normalize_map(np.full((2, 2), 0.3)), np.zeros((2, 2)))


class TestHeads(object):

    def test_class_head_fits_separable_encodings(self, micro_model, rng):
        width = micro_model.config.embed_dim
        direction = rng.normal(size=width)
        direction /= np.linalg.norm(direction)

        # a hyperplane through the origin with margin 0.5 on both sides
        encodings = rng.normal(size=(40, width))
        side = np.sign(encodings @ direction)
        encodings += (0.5 * side)[:, np.newaxis] * direction
        labels = (side > 0).astype(np.float64)

        head = micro_model.class_out
        optimizer = nx.AdamW(head.named_parameters(), weight_decay=0.0)
        before = micro_model.state_dict()

        for _ in range(300):
            optimizer.zero_grad()
            nx.backward(nx.bce_with_logit(head(nx.Tensor(encodings)), labels))
            optimizer.step(0.05)

        predicted = head(nx.Tensor(encodings)).data[:, 0] > 0
        np.testing.assert_array_equal(predicted, labels > 0)

        after = micro_model.state_dict()
        assert all(np.array_equal(after[name], before[name]) for name in before if not name.startswith('class_out.'))

    def test_zero_heads(self, micro_model, micro_clip, micro_points):
        output = micro_model.forward(micro_clip, micro_points)
        for name in ('class_out', 'ef_out'):
            getattr(micro_model, name).weight.data[...] = 0.0

        assert micro_model.classification_head(output).item() == 0.0
        assert micro_model.ef_head(output).item() == pytest.approx(0.5)


class TestLosses(object):

    def test_tracking_loss_is_summed(self):
        initial = PointTrajectorySet(np.zeros((1, 2, 2)))
        target = PointTrajectorySet([[[1.0, -1.0], [2.0, 0.0]]])

        assert tracking_loss(nx.Tensor(np.zeros((1, 2, 2))), initial, target).item() == pytest.approx(4.0)

    def test_ef_target_must_be_fraction(self):
        with pytest.raises(UsageError):
            ef_loss(nx.Tensor([0.5]), 55.0)
