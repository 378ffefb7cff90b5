import math

import numpy as np
import pytest

import viact
from viact.exceptions import UsageError
from viact.geometry import Clip, PointTrajectorySet
from viact.mae import AnatomicalMAE, DecoderConfig
from viact.model import ModelConfig, ViACT
from viact.phantom import render_sample
from viact.storage import Checkpoint, write_checkpoint, read_checkpoint
from viact.training import (Schedule, MetricReport, Trainer, effective_lr, sample_window, first_window, track_long,
                            fit_schedule, pretrain_sweep, repeat_runs, summarize)


class CountingTracker(object):

    "Stands in for ViACT.track: frame t of a window is predicted at query + t."

    def __init__(self, frames):
        self.config = ModelConfig(embed_dim=8, heads=2, depth=0, patch_size=2, frames=frames, points=3)
        self.calls = []

    def track(self, clip, queries, refine_passes=0):
        self.calls.append((clip.frames.copy(), queries.coords[0].copy()))
        offsets = np.arange(clip.frame_count, dtype=np.float32)[:, np.newaxis, np.newaxis]
        return PointTrajectorySet(queries.coords[:1] + offsets, queries.apex_index)


def ramp_clip(frames):
    "Clip whose frame t is filled with t / frames."
    values = np.arange(frames, dtype=np.float64) / frames
    return Clip(np.repeat(values, 16).reshape(frames, 4, 4))


class TestSchedule(object):

    def test_examples(self):
        schedule = Schedule(base_lr=1.5e-4, batch_size=160, warmup_epochs=5, total_epochs=50, steps_per_epoch=4)
        peak = 1.5e-4 * 160 / 256

        assert schedule.peak_lr == pytest.approx(peak)
        assert effective_lr(0, schedule) == 0.0
        assert effective_lr(10, schedule) == pytest.approx(peak / 2)
        assert effective_lr(20, schedule) == peak
        assert effective_lr(110, schedule) == pytest.approx(peak / 2)
        assert effective_lr(200, schedule) == pytest.approx(0.0, abs=1e-9)
        assert effective_lr(500, schedule) == 0.0

    def test_continuous_and_non_negative(self):
        schedule = Schedule(base_lr=1e-3, batch_size=256, warmup_epochs=3, total_epochs=10, steps_per_epoch=7)
        values = [effective_lr(step, schedule) for step in range(schedule.total_steps + 2)]

        assert min(values) >= 0.0
        assert max(abs(a - b) for a, b in zip(values, values[1:])) <= 1e-3 / 21 + 1e-12

    def test_invalid(self):
        with pytest.raises(UsageError):
            Schedule(warmup_epochs=6, total_epochs=5)

        with pytest.raises(UsageError):
            effective_lr(-1, Schedule())

    def test_fit_schedule(self):
        schedule = fit_schedule(Schedule(batch_size=16), 70)
        assert schedule.steps_per_epoch == 5


class TestReport(object):

    def test_round_trip(self, tmp_path):
        report = MetricReport('track', 3)
        report.add(1, 5, 1e-4, 2.5, {'me': 1.25, 'me_identity': 2.0})
        report.add(2, 10, 5e-5, 1.5, {'me': 1.0, 'me_identity': 2.0})

        path = str(tmp_path / 'report.jsonl')
        report.write(path)
        again = MetricReport.read(path)

        assert again.records == report.records
        assert again.column('val_me') == [1.25, 1.0]
        assert list(report.last())[:6] == ['task', 'seed', 'epoch', 'step', 'lr', 'loss']


class TestWindows(object):

    def test_short_clip_is_skipped_with_warning(self, small_spec, rng):
        sample = render_sample(small_spec, 'short')

        with pytest.warns(UserWarning):
            assert sample_window(sample, 5, (1, 2, 3), rng) is None

    def test_window_follows_stride(self, small_spec):
        sample = render_sample(small_spec)
        clip, points = sample_window(sample, 4, (3,), np.random.default_rng(0))

        assert clip.frame_count == 4
        starts = [t for t in range(small_spec.frames) if np.array_equal(sample.points.coords[t], points.coords[0])]
        np.testing.assert_array_equal(points.coords[3], sample.points.coords[starts[0] + 9])

    def test_first_window(self, small_spec):
        sample = render_sample(small_spec)
        clip, points = first_window(sample, 4)

        np.testing.assert_array_equal(clip.frames, sample.clip.frames[:4])


class TestTrackLong(object):

    def test_single_block(self):
        tracker = CountingTracker(18)
        queries = np.ones((3, 2), dtype=np.float32)

        out = track_long(tracker, ramp_clip(18), queries)

        assert len(tracker.calls) == 1
        assert out.frames == 18

    def test_two_blocks_hand_over_queries(self):
        tracker = CountingTracker(18)
        queries = np.arange(6, dtype=np.float32).reshape(3, 2)

        out = track_long(tracker, ramp_clip(35), queries)

        assert len(tracker.calls) == 2
        np.testing.assert_array_equal(tracker.calls[1][1], queries + 17)
        np.testing.assert_array_equal(tracker.calls[1][0][0], ramp_clip(35).frames[17])

        expected = queries[np.newaxis] + np.arange(35, dtype=np.float32)[:, np.newaxis, np.newaxis]
        np.testing.assert_array_equal(out.coords, expected)

    def test_last_block_is_padded(self):
        tracker = CountingTracker(18)
        clip = ramp_clip(30)

        out = track_long(tracker, clip, np.zeros((3, 2), dtype=np.float32))

        window = tracker.calls[1][0]
        assert window.shape[0] == 18
        np.testing.assert_array_equal(window[-1], clip.frames[-1])
        assert out.frames == 30
        assert out.coords[29, 0, 0] == 29.0

    def test_block_covering_clip_equals_track(self, micro_model, micro_clip, micro_points):
        direct = micro_model.track(micro_clip, micro_points)
        chained = track_long(micro_model, micro_clip, micro_points)

        np.testing.assert_array_equal(chained.coords, direct.coords)

    def test_needs_two_frames(self, micro_model):
        with pytest.raises(UsageError):
            track_long(micro_model, ramp_clip(1), np.zeros((3, 2)))


class TestSummaries(object):

    def test_classification(self):
        results = [{'logit': 2.0, 'label': 1, 'loss': 0.1}, {'logit': -1.0, 'label': 1, 'loss': 1.3}]
        values = summarize(viact.TASK_CLASSIFY, results)

        assert values['accuracy'] == 0.5
        assert values['loss'] == pytest.approx(0.7)

    def test_tracking_reports_identity_baseline(self):
        gt = np.zeros((2, 2, 2))
        gt[1] = 3.0
        values = summarize(viact.TASK_TRACK, [{'pred': gt.copy(), 'gt': gt}])

        assert values['me'] == 0.0
        assert values['me_identity'] == pytest.approx(0.5 * 3.0 * math.sqrt(2.0))

    def test_repeat_runs(self):
        summary = repeat_runs(lambda seed: {'me': float(seed), 'rmse': 1.0}, [1, 2, 3])

        assert summary['me']['mean'] == pytest.approx(2.0)
        assert summary['me']['std'] == pytest.approx(math.sqrt(2.0 / 3.0))
        assert summary['rmse']['runs'] == [1.0, 1.0, 1.0]


class TestTrainer(object):

    def schedule(self, cohort):
        schedule = Schedule(base_lr=0.05, batch_size=4, warmup_epochs=1, total_epochs=3)
        return fit_schedule(schedule, len(cohort.split(viact.SPLIT_TRAIN)))

    def pretrainer(self, config, cohort, seed=0):
        model = ViACT(config, seed=seed)
        mae = AnatomicalMAE(model, DecoderConfig.preset('micro'), seed=seed)
        return Trainer(viact.TASK_PRETRAIN, model, self.schedule(cohort), seed, mae)

    def test_pretrain_needs_mae(self, desk_config):
        with pytest.raises(UsageError):
            Trainer(viact.TASK_PRETRAIN, ViACT(desk_config), Schedule())

    def test_unknown_task(self, desk_config):
        with pytest.raises(UsageError):
            Trainer('segment', ViACT(desk_config), Schedule())

    def test_runs_are_deterministic(self, desk_config, small_cohort):
        train, val = small_cohort.split(viact.SPLIT_TRAIN), small_cohort.split(viact.SPLIT_VAL)
        reports = []

        for _ in range(2):
            trainer = Trainer(viact.TASK_TRACK, ViACT(desk_config, seed=1), self.schedule(small_cohort), 1)
            reports.append(trainer.fit(train, val, epochs=2).records)

        assert reports[0] == reports[1]
        assert set(reports[0][0]) >= {'val_me', 'val_me_identity'}

    def test_resume_is_exact(self, desk_config, small_cohort, tmp_path):
        train, val = small_cohort.split(viact.SPLIT_TRAIN), small_cohort.split(viact.SPLIT_VAL)

        straight = self.pretrainer(desk_config, small_cohort)
        straight.fit(train, val, epochs=2)

        first = self.pretrainer(desk_config, small_cohort)
        first.fit(train, val, epochs=1)

        path = str(tmp_path / 'epoch1.ckpt')
        write_checkpoint(path, Checkpoint.from_trainer(first))

        resumed = self.pretrainer(desk_config, small_cohort, seed=0)
        resumed.restore(read_checkpoint(path))
        resumed.fit(train, val, epochs=1)

        assert resumed.report.records == straight.report.records[1:]

        for name, value in straight.mae.named_parameters().items():
            np.testing.assert_array_equal(resumed.mae.named_parameters()[name].data, value.data)

    def test_plugins_are_called(self, desk_config, small_cohort):
        class Recorder(object):
            def __init__(self):
                self.events = []

            def before_train(self, trainer):
                self.events.append('before_train')

            def after_epoch(self, trainer, epoch, record):
                self.events.append(('epoch', epoch, record['epoch']))

            def after_train(self, trainer):
                self.events.append('after_train')

        recorder = Recorder()
        trainer = Trainer(viact.TASK_CLASSIFY, ViACT(desk_config), self.schedule(small_cohort), 0,
                          options={'plugins': [recorder]})
        trainer.fit(small_cohort.split(viact.SPLIT_TRAIN), epochs=1)

        assert recorder.events == ['before_train', ('epoch', 1, 1), 'after_train']

    def test_classification_metrics(self, desk_config, small_cohort):
        trainer = Trainer(viact.TASK_CLASSIFY, ViACT(desk_config), self.schedule(small_cohort), 0)
        values = trainer.evaluate(small_cohort.split(viact.SPLIT_VAL))

        assert set(values) == {'loss', 'accuracy', 'weighted_f1'}
        assert 0.0 <= values['accuracy'] <= 1.0

    def test_mask_ratio_sweep(self, desk_config, small_cohort):
        schedule = Schedule(base_lr=0.05, batch_size=8, warmup_epochs=0, total_epochs=1)
        reports = pretrain_sweep(small_cohort, lambda: ViACT(desk_config), schedule, ratios=(0.8, 0.9),
                                 decoder_config=DecoderConfig.preset('micro'))

        assert list(reports) == [0.8, 0.9]
        assert all(len(report) == 1 for report in reports.values())
