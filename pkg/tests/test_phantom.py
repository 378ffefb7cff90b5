import numpy as np
import pytest

import viact
from viact.exceptions import GenerationError, UsageError
from viact.metrics import me
from viact.phantom import (PhantomSpec, CONTOUR_POINTS, EF_RANGE, band_mask, band_centroid, contour_points,
                           generate_texture, deformation, render_sample, split_sizes, cohort_specs, assign_splits)


class TestPhantomSpec(object):

    def test_points_must_fill_rows(self):
        with pytest.raises(UsageError):
            PhantomSpec(points=30)

    def test_invalid_values(self):
        for values in ({'label': 2}, {'ef_fraction': 1.0}, {'amplitude': -1.0}, {'height': 8}):
            with pytest.raises(UsageError):
                PhantomSpec(**values)

    def test_rows_and_apex(self):
        single = PhantomSpec(points=21)
        triple = PhantomSpec(points=63)

        assert single.apex_index == 10
        assert triple.rows == 3
        assert triple.apex_index == 31
        np.testing.assert_allclose(triple.row_offsets, [-6.0, 0.0, 6.0])

    def test_dict_round_trip(self, small_spec):
        assert PhantomSpec.from_dict(small_spec.as_dict()) == small_spec


class TestTexture(object):

    def test_deterministic_in_seed(self, small_spec):
        np.testing.assert_array_equal(generate_texture(small_spec), generate_texture(small_spec))
        assert not np.array_equal(generate_texture(small_spec), generate_texture(small_spec.replace(seed=4)))

    def test_band_is_brighter_than_background(self, small_spec):
        texture = generate_texture(small_spec)
        band = band_mask(small_spec)

        assert texture.min() >= 0.0 and texture.max() <= 1.0
        assert texture[band > 0.9].mean() > 3.0 * texture[band < 0.1].mean()

    def test_class_one_is_brighter(self, small_spec):
        band = band_mask(small_spec) > 0.9

        dim = generate_texture(small_spec)[band].mean()
        bright = generate_texture(small_spec.replace(label=1))[band].mean()

        assert bright > dim

    def test_apex_is_at_the_top(self, small_spec):
        points = contour_points(small_spec)

        assert points.shape == (21, 2)
        assert points[small_spec.apex_index, 1] == points[:, 1].min()


class TestMotion(object):

    def test_first_frame_is_identity(self, small_spec):
        points = contour_points(small_spec)
        np.testing.assert_allclose(deformation(0, small_spec)(points), points)

    def test_inverse(self, small_spec, rng):
        phi = deformation(4, small_spec)
        points = rng.uniform(0, 63, size=(10, 2))

        np.testing.assert_allclose(phi.inverse(phi(points)), points, atol=1e-9)

    def test_contracts_toward_band_centroid(self, small_spec):
        centroid = band_centroid(small_spec)

        np.testing.assert_allclose(deformation(9, small_spec)(centroid), centroid, atol=1e-9)
        assert centroid[0] == pytest.approx(small_spec.center_x)
        assert centroid[1] < small_spec.center_y

    def test_largest_displacement_over_dense_layout(self):
        # four point rows at the strongest contraction a cohort can draw
        spec = PhantomSpec(points=84, ef_fraction=EF_RANGE[1])
        start = contour_points(spec)

        largest = max(np.linalg.norm(deformation(t, spec)(start) - start, axis=-1).max()
                      for t in range(viact.DEFAULT_FRAMES))

        assert 4.0 < largest <= 6.0

    def test_collapse_is_rejected(self, small_spec):
        with pytest.raises(GenerationError):
            deformation(5, small_spec.replace(amplitude=40.0))


class TestRenderSample(object):

    def test_shapes_and_range(self, small_spec):
        sample = render_sample(small_spec, 'one')

        assert sample.clip.frames.shape == (10, 64, 64)
        assert sample.points.coords.shape == (10, 21, 2)
        assert sample.points.apex_index == 10
        assert sample.clip.frames.min() >= 0.0 and sample.clip.frames.max() <= 1.0
        assert sample.labels == {'label': 0, 'ef_fraction': 0.6}

    def test_deterministic(self, small_spec):
        a, b = render_sample(small_spec), render_sample(small_spec)

        np.testing.assert_array_equal(a.clip.frames, b.clip.frames)
        np.testing.assert_array_equal(a.points.coords, b.points.coords)

    def test_trajectories_follow_deformation(self, small_spec):
        sample = render_sample(small_spec)
        start = contour_points(small_spec)

        for t in range(small_spec.frames):
            np.testing.assert_allclose(sample.points.coords[t], deformation(t, small_spec)(start), atol=1e-4)

    def test_zero_amplitude_is_static(self, small_spec):
        sample = render_sample(small_spec.replace(amplitude=0.0, noise=0.0))

        for t in range(1, small_spec.frames):
            np.testing.assert_array_equal(sample.clip.frames[t], sample.clip.frames[0])
            np.testing.assert_array_equal(sample.points.coords[t], sample.points.coords[0])

    def test_identity_tracker_is_not_enough(self):
        sample = render_sample(PhantomSpec(seed=1))
        displacement = np.linalg.norm(sample.points.coords - sample.points.coords[:1], axis=-1)

        assert me(sample.points.static(), sample.points) > 1.0
        assert displacement.max() <= 6.0

    def test_large_amplitude_fails(self, small_spec):
        with pytest.raises(GenerationError):
            render_sample(small_spec.replace(amplitude=40.0))


class TestCohort(object):

    def test_split_sizes(self):
        assert split_sizes(10) == (7, 2, 1)
        assert split_sizes(100) == (70, 15, 15)

    def test_specs_are_balanced(self):
        specs = cohort_specs(20, 9)
        labels = [spec.label for spec in specs.values()]

        assert labels.count(0) == labels.count(1) == 10
        assert all(0.3 <= spec.ef_fraction <= 0.75 for spec in specs.values())
        assert list(specs) == ['sample_{:03d}'.format(n) for n in range(20)]

    def test_small_cohort_is_rejected(self):
        with pytest.raises(UsageError):
            cohort_specs(9, 0)

    def test_splits_partition_ids(self):
        ids = ['sample_{:03d}'.format(n) for n in range(20)]
        splits = assign_splits(ids, 2)

        assert [len(splits[name]) for name in (viact.SPLIT_TRAIN, viact.SPLIT_VAL, viact.SPLIT_TEST)] == [14, 3, 3]
        assert sorted(sum(splits.values(), [])) == ids
        assert assign_splits(ids, 2) == splits

    def test_generated_cohort(self, small_cohort):
        assert len(small_cohort) == 10
        assert len(small_cohort.split(viact.SPLIT_TRAIN)) == 7

        with pytest.raises(UsageError):
            small_cohort.split('holdout')

    def test_rendering_does_not_depend_on_workers(self, small_cohort):
        from viact.phantom import generate_cohort

        again = generate_cohort(10, 5, PhantomSpec(height=64, width=64, frames=10, points=CONTOUR_POINTS), workers=1)

        for sample_id, sample in small_cohort.samples.items():
            np.testing.assert_array_equal(again.samples[sample_id].clip.frames, sample.clip.frames)
