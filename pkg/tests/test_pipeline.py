import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairload.errors import DataError, LengthError, ParameterError
from fairload.pipeline import (CYCLE_LENGTH, Dataset, GaitEvents, PipelineParams, RawTrial,
                               build_dataset, butterworth_lowpass, denormalize,
                               detect_gait_events, lowpass_trial, normalize, resample_cycle,
                               segment_cycles)
from fairload.selftest import _sine_gain, analytic_gain, reversal_asymmetry
from fairload.synthgait import GeneratorConfig, generate_dataset


# ---------------------------------------------------------------- filter

def test_constant_signal_passes_unchanged():
    out = butterworth_lowpass(np.full(200, 5.0), 80, 6)
    assert np.max(np.abs(out - 5.0)) < 1e-9


@pytest.mark.parametrize("freq, tol", [(1.0, 0.01), (20.0, 0.05)])
def test_sine_attenuation_matches_squared_biquad_magnitude(freq, tol):
    assert abs(_sine_gain(freq) / analytic_gain(freq) - 1) < tol


def test_one_hz_is_passed_nearly_intact():
    assert abs(_sine_gain(1.0) - 1) < 0.01


def test_filter_is_zero_phase():
    assert reversal_asymmetry() < 1e-9


def test_filter_rejects_short_signal():
    with pytest.raises(LengthError):
        butterworth_lowpass(np.ones(12), 80, 6)
    assert butterworth_lowpass(np.ones(13), 80, 6).shape == (13,)


@pytest.mark.parametrize("cutoff", [0.0, -1.0, 40.0, 55.0])
def test_filter_rejects_cutoff_outside_nyquist(cutoff):
    with pytest.raises(ParameterError):
        butterworth_lowpass(np.ones(100), 80, cutoff)


def test_filter_rejects_non_finite_input():
    x = np.ones(100)
    x[50] = np.nan
    with pytest.raises(DataError):
        butterworth_lowpass(x, 80, 6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(13, 300), elements=st.floats(-1e3, 1e3)),
       st.floats(-5, 5), st.floats(0.1, 10))
def test_filter_is_linear_and_length_preserving(x, shift, scale):
    y = butterworth_lowpass(x, 80, 6)
    assert y.shape == x.shape
    # affine inputs map to affine outputs since the DC gain is one
    z = butterworth_lowpass(scale * x + shift, 80, 6)
    assert np.allclose(z, scale * y + shift, atol=1e-6 * (1 + np.abs(x).max() * scale))


# ---------------------------------------------------------------- events

def _noiseless(n_subjects=1, **kw):
    cfg = GeneratorConfig(n_male=n_subjects, n_female=n_subjects, n_channels=12,
                          noise_std=0.0, **kw)
    return generate_dataset(cfg)


def _detect(trial):
    f = lowpass_trial(trial)
    return detect_gait_events(f.channel("right_shank", 3), f.channel("left_shank", 3), 80)


def test_noiseless_events_match_ground_truth_exactly():
    trials, truth = _noiseless(2, cycles_per_trial=6)
    for trial in trials:
        assert _detect(trial).cycles == truth.trials[trial.trial_id].events.cycles


def test_detection_on_flat_signal_finds_nothing():
    assert len(detect_gait_events(np.zeros(400), np.zeros(400), 80)) == 0


def test_detection_requires_matching_lengths():
    with pytest.raises(DataError):
        detect_gait_events(np.zeros(10), np.zeros(11), 80)


def test_events_are_ordered_and_non_overlapping():
    trials, _ = _noiseless(1)
    for trial in trials:
        ev = _detect(trial)
        ev.validate(trial.samples.shape[0])
        for (a, *_, b), (c, *_) in zip(ev.cycles, ev.cycles[1:]):
            assert b <= c


def test_event_validation_rejects_disorder():
    with pytest.raises(DataError):
        GaitEvents([(0, 5, 3, 8, 10)]).validate()
    with pytest.raises(DataError):
        GaitEvents([(0, 2, 4, 6, 8)]).validate(n_samples=8)


def test_high_threshold_suppresses_detection():
    from fairload.pipeline import DetectionParams
    trials, _ = _noiseless(1)
    f = lowpass_trial(trials[0])
    ev = detect_gait_events(f.channel("right_shank", 3), f.channel("left_shank", 3), 80,
                            DetectionParams(min_peak_height=50.0))
    assert len(ev) == 0


# ---------------------------------------------------------------- resampling

def test_resample_preserves_endpoints_exactly():
    x = np.random.default_rng(0).standard_normal((97, 4))
    y = resample_cycle(x)
    assert y.shape == (CYCLE_LENGTH, 4)
    assert np.array_equal(y[0], x[0]) and np.array_equal(y[-1], x[-1])


def test_resample_of_linear_ramp_is_linear():
    x = np.linspace(0, 1, 50)[:, None] * np.array([1.0, -3.0])
    y = resample_cycle(x)
    assert np.allclose(y, np.linspace(0, 1, 128)[:, None] * np.array([1.0, -3.0]), atol=1e-12)


def test_resample_rejects_single_sample():
    with pytest.raises(LengthError):
        resample_cycle(np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 200), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6)))
def test_resample_stays_within_channel_range(x):
    y = resample_cycle(x)
    assert y.shape == (128, x.shape[1])
    assert np.all(y <= x.max(axis=0) + 1e-6) and np.all(y >= x.min(axis=0) - 1e-6)


# ---------------------------------------------------------------- dataset

def test_build_dataset_counts_one_cycle_per_embedded_cycle():
    trials, truth = _noiseless(1, cycles_per_trial=5)
    ds = build_dataset(trials)
    assert len(ds) == sum(len(t.events) for t in truth.trials.values())
    assert ds.data.shape[1:] == (128, 12)
    assert set(ds.trial_ids) == {t.trial_id for t in trials}


def test_segment_cycles_slices_between_heel_strikes():
    trials, truth = _noiseless(1)
    ev = truth.trials[trials[0].trial_id].events
    segs = segment_cycles(trials[0], ev)
    assert [s.shape[0] for s in segs] == [c[-1] - c[0] for c in ev.cycles]


def test_trial_with_no_cycles_is_skipped(caplog):
    trials, _ = _noiseless(1)
    flat = RawTrial(np.zeros((400, 12)), "M00", "male", 4.5, "flat",
                    trials[0].sensors)
    ds = build_dataset([flat] + trials)
    assert "flat" not in ds.trial_ids
    assert "no gait cycles" in caplog.text


def test_build_dataset_rejects_conflicting_sex():
    trials, _ = _noiseless(1)
    bad = RawTrial(trials[0].samples, trials[0].subject_id, "female", 4.5, "x",
                   trials[0].sensors)
    with pytest.raises(DataError):
        build_dataset([trials[0], bad])


def test_raw_trial_validation():
    with pytest.raises(DataError):
        RawTrial(np.zeros((10, 7)), "s", "male", 1.0, "t")
    with pytest.raises(DataError):
        RawTrial(np.zeros((10, 72)), "s", "other", 1.0, "t")


@pytest.fixture(scope="module")
def small_dataset():
    trials, _ = generate_dataset(GeneratorConfig(n_male=2, n_female=2, n_channels=12,
                                                 cycles_per_trial=3))
    return build_dataset(trials)


def test_normalize_gives_zero_mean_unit_std(small_dataset):
    z = normalize(small_dataset)
    flat = z.data.reshape(-1, z.n_channels)
    assert np.allclose(flat.mean(axis=0), 0, atol=1e-10)
    assert np.allclose(flat.std(axis=0), 1, atol=1e-10)
    assert np.allclose(denormalize(z), small_dataset.data)


def test_normalize_reuses_supplied_stats(small_dataset):
    a = small_dataset.select_subjects(["M00", "F00"])
    b = small_dataset.select_subjects(["M01", "F01"])
    za = normalize(a)
    zb = normalize(b, za.channel_stats)
    mean, std = za.channel_stats
    assert np.allclose(zb.data, (b.data - mean) / std)


def test_normalize_keeps_constant_channel_finite(small_dataset):
    d = small_dataset.data.copy()
    d[:, :, 0] = 3.0
    ds = Dataset(d, small_dataset.subject_ids, small_dataset.sexes, small_dataset.weights,
                 small_dataset.trial_ids, small_dataset.cycle_index, small_dataset.subjects,
                 small_dataset.channel_names)
    z = normalize(ds)
    assert np.all(z.data[:, :, 0] == 0) and z.channel_stats[1][0] == 1.0


def test_dataset_round_trips_through_disk(small_dataset, tmp_path):
    z = normalize(small_dataset)
    z.save(tmp_path / "ds")
    back = Dataset.load(tmp_path / "ds")
    assert np.array_equal(back.data, z.data.astype("<f4").astype(float))
    assert back.subject_ids == z.subject_ids and back.subjects == z.subjects
    assert np.allclose(back.channel_stats[0], z.channel_stats[0])


def test_load_detects_truncated_payload(small_dataset, tmp_path):
    small_dataset.save(tmp_path / "ds")
    raw = (tmp_path / "ds" / "cycles.f32").read_bytes()
    (tmp_path / "ds" / "cycles.f32").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        Dataset.load(tmp_path / "ds")


def test_select_subjects_keeps_only_requested(small_dataset):
    sub = small_dataset.select_subjects(["F01"])
    assert set(sub.subject_ids) == {"F01"} and sub.subjects == [("F01", "female")]


def test_pipeline_params_cycle_length_is_configurable():
    trials, _ = _noiseless(1)
    ds = build_dataset(trials[:1], PipelineParams(cycle_length=64))
    assert ds.cycle_length == 64
