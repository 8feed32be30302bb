import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from darnet.dataio import EegTrial
from darnet.preprocess import (
    FilterParameterError,
    PreprocessConfig,
    bandpass,
    bandpass_sos,
    downsample,
    notch,
    notch_ba,
    plan_split,
    preprocess_trial,
    read_split_plan,
    rereference,
    window_count,
    write_split_plan,
)


def sine_trial(freq, rate=128.0, seconds=20.0, channels=2):
    t = np.arange(int(rate * seconds)) / rate
    x = np.sin(2 * np.pi * freq * t)
    return EegTrial("s", "t", rate, np.repeat(x[:, None], channels, axis=1), 0)


def central_rms(x):
    n = len(x)
    mid = x[n // 4 : 3 * n // 4]
    return np.sqrt(np.mean(mid**2))


def zero_phase_gain(freq, rate, b=None, a=None, sos=None):
    """|H(f)|^2: forward-backward filtering squares the magnitude response."""
    if sos is not None:
        _, h = signal.sosfreqz(sos, worN=[freq], fs=rate)
    else:
        _, h = signal.freqz(b, a, worN=[freq], fs=rate)
    return abs(h[0]) ** 2


def test_bandpass_passes_10hz():
    t = sine_trial(10.0)
    out = bandpass(t, 0.1, 50.0)
    ratio = central_rms(out.data[:, 0]) / central_rms(t.data[:, 0])
    expected = zero_phase_gain(10.0, 128.0, sos=bandpass_sos(128.0, 0.1, 50.0))
    assert ratio == pytest.approx(expected, abs=2e-3)
    assert abs(1 - ratio) < 0.01
    assert out.samples == t.samples


def test_bandpass_removes_dc():
    t = EegTrial("s", "t", 128.0, np.full((128 * 60, 2), 5.0), 0)
    out = bandpass(t, 0.1, 50.0)
    assert zero_phase_gain(1e-6, 128.0, sos=bandpass_sos(128.0, 0.1, 50.0)) < 1e-6
    assert central_rms(out.data[:, 0]) < 0.05 * 5.0


def test_bandpass_zero_and_bad_cutoff():
    z = EegTrial("s", "t", 128.0, np.zeros((500, 3)), 0)
    np.testing.assert_array_equal(bandpass(z, 0.1, 50).data, 0)
    with pytest.raises(FilterParameterError):
        bandpass(z, 0.1, 64.0)
    with pytest.raises(FilterParameterError):
        bandpass(z, 10, 5)


def test_notch_removes_50hz_and_spares_10hz():
    b, a = notch_ba(128.0, 50.0)
    t50 = sine_trial(50.0)
    r50 = central_rms(notch(t50, 50.0).data[:, 0]) / central_rms(t50.data[:, 0])
    assert zero_phase_gain(50.0, 128.0, b, a) < 1e-6
    assert r50 < 0.10
    t10 = sine_trial(10.0)
    r10 = central_rms(notch(t10, 50.0).data[:, 0]) / central_rms(t10.data[:, 0])
    assert r10 == pytest.approx(zero_phase_gain(10.0, 128.0, b, a), abs=2e-3)
    assert 1 - r10 < 0.02


def test_notch_zero_and_nyquist():
    z = EegTrial("s", "t", 128.0, np.zeros((300, 2)), 0)
    np.testing.assert_array_equal(notch(z, 50.0).data, 0)
    with pytest.raises(FilterParameterError):
        notch(z, 64.0)


def test_rereference_modes():
    rng = np.random.default_rng(0)
    t = EegTrial("s", "t", 128.0, rng.normal(size=(50, 2)), 0)
    np.testing.assert_array_equal(rereference(t, (0,)).data[:, 0], 0)
    same = EegTrial("s", "t", 128.0, np.repeat(rng.normal(size=(50, 1)), 2, axis=1), 0)
    np.testing.assert_array_equal(rereference(same, "mean").data, 0)
    wide = EegTrial("s", "t", 128.0, rng.normal(size=(50, 7)), 0)
    assert np.max(np.abs(rereference(wide, "mean").data.mean(axis=1))) < 1e-12
    with pytest.raises(ValueError):
        rereference(t, ())
    mastoids = EegTrial("s", "t", 128.0, rng.normal(size=(50, 4)), 0, reference_channels=[2, 3])
    np.testing.assert_array_equal(rereference(mastoids, "reference").data, rereference(mastoids, (2, 3)).data)
    with pytest.raises(ValueError, match="no reference channels"):
        rereference(t, "reference")


def test_downsample():
    t = EegTrial("s", "t", 256.0, np.arange(200.0).reshape(100, 2), 0)
    d = downsample(t, 128.0)
    assert d.samples == 50 and d.sample_rate_hz == 128.0
    np.testing.assert_array_equal(d.data, t.data[::2])
    assert downsample(t, 256.0) == t
    with pytest.raises(FilterParameterError):
        downsample(t, 100.0)


def test_nyquist_tone_does_not_alias():
    x = np.where(np.arange(256 * 20) % 2 == 0, 1.0, -1.0)
    t = EegTrial("s", "t", 256.0, np.stack([x, -x], axis=1), 0)
    out = downsample(bandpass(t, 0.1, 50.0), 128.0)
    spec = np.fft.rfft(out.data[:, 0])
    # Parseval: RMS from the DFT coefficients
    rms = np.sqrt((2 * np.sum(np.abs(spec[1:]) ** 2) + np.abs(spec[0]) ** 2) / len(out.data) ** 2)
    assert rms < 1e-3


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    low=st.floats(0.05, 5.0),
    width=st.floats(5.0, 40.0),
    scale=st.floats(1e-3, 1e3),
)
def test_filters_stay_bounded(seed, low, width, scale):
    rng = np.random.default_rng(seed)
    t = EegTrial("s", "t", 256.0, rng.uniform(-scale, scale, size=(600, 3)), 0)
    cfg = PreprocessConfig(bandpass_low_hz=low, bandpass_high_hz=low + width, notch_hz=50.0, target_rate_hz=128.0)
    out = preprocess_trial(t, cfg)
    assert np.all(np.isfinite(out.data))
    assert np.max(np.abs(out.data)) < 100 * scale


def test_config_validation():
    with pytest.raises(FilterParameterError):
        PreprocessConfig(bandpass_high_hz=70.0, target_rate_hz=128.0).validate(256.0)
    with pytest.raises(FilterParameterError):
        PreprocessConfig(target_rate_hz=100.0).validate(256.0)


def long_trial(seconds, rate=128.0, label=0, trial_id="T1", seed=0):
    rng = np.random.default_rng(seed)
    return EegTrial("S1", trial_id, rate, rng.normal(size=(int(seconds * rate), 3)), label)


def test_split_counts_for_ten_second_trial():
    plan = plan_split([long_trial(10)], 1.0, val_fraction_of_train=0.0)
    assert len(plan.train_windows) == 17
    assert len(plan.test_windows) == 1
    assert plan.window_samples == 128


def test_split_counts_without_overlap():
    plan = plan_split([long_trial(10)], 1.0, train_overlap=0.0, test_overlap=0.0, val_fraction_of_train=0.0)
    assert len(plan.train_windows) == 9
    assert len(plan.test_windows) == 1


def test_split_point_one_second_windows_floor():
    plan = plan_split([long_trial(10)], 0.1)
    assert plan.window_samples == 12


@settings(max_examples=60, deadline=None)
@given(region=st.integers(0, 2000), n=st.integers(4, 300), stride=st.integers(1, 300))
def test_window_count_formula(region, n, stride):
    brute = sum(1 for s in range(0, region) if s % stride == 0 and s + n <= region)
    assert window_count(region, n, stride) == brute


def test_split_is_seeded_and_disjoint():
    trials = [long_trial(30, label=i % 2, trial_id=f"T{i}", seed=i) for i in range(4)]
    a = plan_split(trials, 1.0, seed=3)
    b = plan_split(trials, 1.0, seed=3)
    c = plan_split(trials, 1.0, seed=4)
    keys = lambda ws: [w.key for w in ws]
    assert keys(a.val_windows) == keys(b.val_windows)
    assert keys(a.val_windows) != keys(c.val_windows)
    assert not set(keys(a.train_windows)) & set(keys(a.val_windows))
    pool = len(a.train_windows) + len(a.val_windows)
    assert len(a.val_windows) == round(0.1 * pool)


def test_split_is_leakage_free():
    trials = [long_trial(s, label=i % 2, trial_id=f"T{i}", seed=i) for i, s in enumerate([10.3, 12.0, 25.9, 40.1])]
    plan = plan_split(trials, 1.0)
    for trial in trials:
        fit_idx = set()
        for w in plan.train_windows + plan.val_windows:
            if w.trial_id == trial.trial_id:
                fit_idx.update(range(w.start_sample, w.start_sample + w.n_samples))
        test_idx = set()
        for w in plan.test_windows:
            if w.trial_id == trial.trial_id:
                test_idx.update(range(w.start_sample, w.start_sample + w.n_samples))
        assert fit_idx and test_idx
        assert not fit_idx & test_idx
        boundary = int(0.9 * trial.samples)
        assert max(fit_idx) < boundary <= min(test_idx)


def test_short_trial_skipped(caplog):
    trials = [long_trial(1.5, trial_id="short"), long_trial(20, trial_id="ok")]
    plan = plan_split(trials, 1.0)
    assert plan.skipped_trials == ["S1/short"]
    assert {w.trial_id for w in plan.test_windows} == {"ok"}
    assert "skipped" in caplog.text


def test_split_plan_file_round_trip(tmp_path):
    from dataclasses import replace

    from darnet.dataio import write_trial

    # two subjects reuse the same trial ids; files and windows must not be confused
    trials = []
    paths = {}
    for subject in ("S1", "S2"):
        for i in range(2):
            t = long_trial(20, label=i % 2, trial_id=f"T{i}", seed=i + (10 if subject == "S2" else 0))
            t = replace(t, subject_id=subject, data=t.data.astype(np.float32))
            (tmp_path / subject).mkdir(exist_ok=True)
            write_trial(t, tmp_path / subject / f"{t.trial_id}.eegt")
            paths[(subject, t.trial_id)] = f"{subject}/{t.trial_id}.eegt"
            trials.append(t)
    plan = plan_split(trials, 1.0, seed=9)
    write_split_plan(plan, tmp_path / "plan.csv", paths)
    back = read_split_plan(tmp_path / "plan.csv")
    for (name, a), (_, b) in zip(plan.partitions(), back.partitions()):
        assert [w.key for w in a] == [w.key for w in b], name
        for wa, wb in zip(a, b):
            np.testing.assert_array_equal(wa.data, wb.data)
    only = read_split_plan(tmp_path / "plan.csv", subject_id="S2")
    assert only.subjects() == ["S2"]
    assert back.window_seconds == 1.0
