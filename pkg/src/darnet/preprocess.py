"""Signal conditioning and leakage-safe windowing.

Canonical order: rereference -> notch -> bandpass -> downsample. Each trial
is then cut so that the first ``train_fraction`` of its samples feeds the
train/validation windows and the remainder feeds the test windows only.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from darnet.dataio import EegTrial

log = logging.getLogger(__name__)

NOTCH_Q = 30.0
BUTTER_ORDER = 4
TRAIN, VAL, TEST = "train", "val", "test"


class FilterParameterError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    bandpass_low_hz: float = 0.1
    bandpass_high_hz: float = 50.0
    notch_hz: float | None = 50.0
    target_rate_hz: float = 128.0
    # "none", "mean", "reference" (per-trial reference_channels), or a tuple of channel indices
    rereference: str | tuple[int, ...] = "none"

    def validate(self, sample_rate_hz: float) -> None:
        if not 0 < self.bandpass_low_hz < self.bandpass_high_hz:
            raise FilterParameterError(
                f"need 0 < low < high, got low={self.bandpass_low_hz}, high={self.bandpass_high_hz}"
            )
        if self.bandpass_high_hz >= self.target_rate_hz / 2:
            raise FilterParameterError(
                f"high cutoff {self.bandpass_high_hz} Hz must lie below the target Nyquist {self.target_rate_hz / 2} Hz"
            )
        decimation_factor(sample_rate_hz, self.target_rate_hz)


def bandpass(trial: EegTrial, low_hz: float = 0.1, high_hz: float = 50.0) -> EegTrial:
    """Zero-phase 4th-order Butterworth band-pass applied per channel."""
    return trial.replace_data(_bandpass_array(trial.data, trial.sample_rate_hz, low_hz, high_hz))


def bandpass_sos(sample_rate_hz: float, low_hz: float, high_hz: float) -> np.ndarray:
    nyq = sample_rate_hz / 2
    if not 0 < low_hz < high_hz:
        raise FilterParameterError(f"need 0 < low < high, got {low_hz}, {high_hz}")
    if high_hz >= nyq:
        raise FilterParameterError(f"high cutoff {high_hz} Hz is at or above Nyquist ({nyq} Hz)")
    return signal.butter(BUTTER_ORDER, [low_hz, high_hz], btype="bandpass", fs=sample_rate_hz, output="sos")


def _bandpass_array(data: np.ndarray, rate: float, low_hz: float, high_hz: float) -> np.ndarray:
    return forward_backward(bandpass_sos(rate, low_hz, high_hz), data, rate)


def forward_backward(sos: np.ndarray, data: np.ndarray, rate: float) -> np.ndarray:
    """Zero-phase filtering along axis 0.

    The channel mean is removed and re-added through the filter's DC gain, the
    signal is mirrored by up to one second at each end, and both passes start
    from rest. Seeding the state from the edge sample instead rings for
    seconds behind a 0.1 Hz high-pass edge.
    """
    x = np.asarray(data, dtype=np.float64)
    mean = x.mean(axis=0, keepdims=True)
    pad = min(int(round(rate)), x.shape[0] - 1)
    xp = np.pad(x - mean, ((pad, pad), (0, 0)), mode="reflect") if pad > 0 else x - mean
    y = signal.sosfilt(sos, xp, axis=0)
    y = signal.sosfilt(sos, y[::-1], axis=0)[::-1]
    _, h0 = signal.sosfreqz(sos, worN=[0.0])
    return y[pad : pad + x.shape[0]] + mean * abs(h0[0]) ** 2


def notch_ba(sample_rate_hz: float, freq_hz: float, q: float = NOTCH_Q) -> tuple[np.ndarray, np.ndarray]:
    nyq = sample_rate_hz / 2
    if not 0 < freq_hz < nyq:
        raise FilterParameterError(f"notch frequency {freq_hz} Hz must lie in (0, {nyq}) Hz")
    return signal.iirnotch(freq_hz, q, fs=sample_rate_hz)


def notch(trial: EegTrial, freq_hz: float = 50.0) -> EegTrial:
    """Zero-phase second-order IIR notch (Q = 30)."""
    b, a = notch_ba(trial.sample_rate_hz, freq_hz)
    return trial.replace_data(forward_backward(signal.tf2sos(b, a), trial.data, trial.sample_rate_hz))


def rereference(trial: EegTrial, mode: str | tuple[int, ...] | list[int] = "mean") -> EegTrial:
    """Subtract a reference signal from every channel.

    ``mode`` is ``"none"``, ``"mean"`` (global channel mean), ``"reference"``
    (the trial's own ``reference_channels``, e.g. mastoids listed in the
    manifest) or an explicit sequence of channel indices.
    """
    x = np.asarray(trial.data, dtype=np.float64)
    if mode == "reference":
        if not trial.reference_channels:
            raise ValueError(f"trial {trial.subject_id}/{trial.trial_id} lists no reference channels")
        mode = tuple(trial.reference_channels)
    if isinstance(mode, str):
        if mode == "none":
            return trial.replace_data(x)
        if mode != "mean":
            raise ValueError(f"unknown rereference mode {mode!r}")
        ref = x.mean(axis=1, keepdims=True)
    else:
        idx = list(mode)
        if not idx:
            raise ValueError("channel_subset rereference needs at least one channel")
        if any(not 0 <= i < trial.channels for i in idx):
            raise ValueError(f"reference channels {idx} out of range for {trial.channels} channels")
        ref = x[:, idx].mean(axis=1, keepdims=True)
    return trial.replace_data(x - ref)


def decimation_factor(sample_rate_hz: float, target_rate_hz: float) -> int:
    if target_rate_hz <= 0:
        raise FilterParameterError("target rate must be positive")
    ratio = sample_rate_hz / target_rate_hz
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise FilterParameterError(
            f"sample rate {sample_rate_hz} Hz is not an integer multiple of target {target_rate_hz} Hz"
        )
    return k


def downsample(trial: EegTrial, target_rate_hz: float) -> EegTrial:
    """Keep every k-th sample; band-limit first (the pipeline does)."""
    k = decimation_factor(trial.sample_rate_hz, target_rate_hz)
    if k == 1:
        return trial.replace_data(trial.data)
    return trial.replace_data(trial.data[::k], sample_rate_hz=trial.sample_rate_hz / k)


def preprocess_trial(trial: EegTrial, config: PreprocessConfig) -> EegTrial:
    config.validate(trial.sample_rate_hz)
    out = rereference(trial, config.rereference)
    if config.notch_hz is not None:
        out = notch(out, config.notch_hz)
    out = bandpass(out, config.bandpass_low_hz, config.bandpass_high_hz)
    return downsample(out, config.target_rate_hz)


# --- windowing / split -------------------------------------------------------


@dataclass(eq=False)
class DecisionWindow:
    data: np.ndarray  # T x N view into the trial
    label: int
    subject_id: str
    trial_id: str
    start_sample: int

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject_id, self.trial_id, self.start_sample)


def window_samples(window_seconds: float, rate_hz: float) -> int:
    n = int(math.floor(window_seconds * rate_hz + 1e-9))
    if n < 4:
        raise ValueError(f"{window_seconds}s at {rate_hz} Hz gives {n} samples; need >= 4")
    return n


def window_stride(n_window: int, overlap: float) -> int:
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    return max(1, int(math.floor(n_window * (1 - overlap) + 1e-9)))


def window_count(region_samples: int, n_window: int, stride: int) -> int:
    return max(0, (region_samples - n_window) // stride + 1)


def window_starts(region_start: int, region_end: int, n_window: int, stride: int) -> list[int]:
    n = window_count(region_end - region_start, n_window, stride)
    return [region_start + i * stride for i in range(n)]


@dataclass
class SplitPlan:
    train_windows: list[DecisionWindow]
    val_windows: list[DecisionWindow]
    test_windows: list[DecisionWindow]
    window_seconds: float
    window_samples: int
    train_fraction_per_trial: float = 0.9
    val_fraction_of_train: float = 0.1
    train_overlap: float = 0.5
    test_overlap: float = 0.5
    seed: int = 0
    skipped_trials: list[str] = field(default_factory=list)
    # trial_id -> sample index where its test region begins
    boundaries: dict[str, int] = field(default_factory=dict)

    def partitions(self):
        yield TRAIN, self.train_windows
        yield VAL, self.val_windows
        yield TEST, self.test_windows

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, windows in self.partitions():
            for w in windows:
                seen.setdefault(w.subject_id, None)
        return list(seen)

    def for_subject(self, subject_id: str) -> SplitPlan:
        def pick(ws):
            return [w for w in ws if w.subject_id == subject_id]

        return SplitPlan(
            pick(self.train_windows),
            pick(self.val_windows),
            pick(self.test_windows),
            self.window_seconds,
            self.window_samples,
            self.train_fraction_per_trial,
            self.val_fraction_of_train,
            self.train_overlap,
            self.test_overlap,
            self.seed,
            list(self.skipped_trials),
            dict(self.boundaries),
        )


def plan_split(
    trials: list[EegTrial],
    window_seconds: float,
    *,
    train_fraction_per_trial: float = 0.9,
    val_fraction_of_train: float = 0.1,
    train_overlap: float = 0.5,
    test_overlap: float = 0.5,
    seed: int = 0,
) -> SplitPlan:
    """Cut trials into decision windows without train/test overlap.

    Within every trial the first ``train_fraction_per_trial`` of the samples
    produce training windows and the rest produce test windows. The training
    windows (pooled over trials) are then split at random into train and
    validation sets.
    """
    if not trials:
        raise ValueError("no trials to split")
    if not 0 < train_fraction_per_trial < 1:
        raise ValueError("train_fraction_per_trial must lie in (0, 1)")
    if not 0 <= val_fraction_of_train < 1:
        raise ValueError("val_fraction_of_train must lie in [0, 1)")
    rates = {t.sample_rate_hz for t in trials}
    if len(rates) != 1:
        raise ValueError(f"trials have mixed sample rates {sorted(rates)}")
    rate = rates.pop()
    n_win = window_samples(window_seconds, rate)
    train_stride = window_stride(n_win, train_overlap)
    test_stride = window_stride(n_win, test_overlap)

    pool: list[DecisionWindow] = []
    test: list[DecisionWindow] = []
    skipped: list[str] = []
    boundaries: dict[str, int] = {}
    for trial in trials:
        boundary = int(math.floor(train_fraction_per_trial * trial.samples))
        train_starts = window_starts(0, boundary, n_win, train_stride)
        test_starts = window_starts(boundary, trial.samples, n_win, test_stride)
        if not train_starts or not test_starts:
            log.warning(
                "trial %s/%s too short (%d samples) for %d-sample windows; skipped",
                trial.subject_id, trial.trial_id, trial.samples, n_win,
            )
            skipped.append(f"{trial.subject_id}/{trial.trial_id}")
            continue
        boundaries[f"{trial.subject_id}/{trial.trial_id}"] = boundary
        for s in train_starts:
            pool.append(DecisionWindow(trial.data[s : s + n_win], trial.label, trial.subject_id, trial.trial_id, s))
        for s in test_starts:
            test.append(DecisionWindow(trial.data[s : s + n_win], trial.label, trial.subject_id, trial.trial_id, s))
    if skipped:
        log.warning("%d of %d trials skipped as too short", len(skipped), len(trials))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    n_val = int(round(val_fraction_of_train * len(pool)))
    if val_fraction_of_train > 0 and len(pool) >= 2:
        n_val = min(max(n_val, 1), len(pool) - 1)
    val_idx = set(order[:n_val].tolist())
    train_w = [w for i, w in enumerate(pool) if i not in val_idx]
    val_w = [w for i, w in enumerate(pool) if i in val_idx]
    return SplitPlan(
        train_w, val_w, test, window_seconds, n_win,
        train_fraction_per_trial, val_fraction_of_train, train_overlap, test_overlap, seed,
        skipped, boundaries,
    )


def stack_windows(windows: list[DecisionWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(X, y)`` with ``X`` shaped ``n x T x N``."""
    if not windows:
        raise ValueError("no windows to stack")
    x = np.stack([np.asarray(w.data, dtype=np.float64) for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


# --- split-plan files --------------------------------------------------------

PLAN_FIELDS = ["subject_id", "trial_id", "trial_path", "label", "start_sample", "n_samples", "partition"]


def write_split_plan(
    plan: SplitPlan, path: str | os.PathLike, trial_paths: dict[tuple[str, str], str]
) -> None:
    """Write the plan as CSV; ``trial_paths`` maps (subject_id, trial_id) to its file (relative to the plan)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(
            f"# window_seconds={plan.window_seconds!r} seed={plan.seed} "
            f"train_fraction={plan.train_fraction_per_trial!r} skipped={','.join(plan.skipped_trials)}\n"
        )
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLAN_FIELDS)
        for part, windows in plan.partitions():
            for w in windows:
                writer.writerow(
                    [w.subject_id, w.trial_id, trial_paths[(w.subject_id, w.trial_id)], w.label, w.start_sample, w.n_samples, part]
                )


def read_split_plan(path: str | os.PathLike, subject_id: str | None = None) -> SplitPlan:
    """Rebuild a :class:`SplitPlan`, loading window data from the referenced trial files."""
    from darnet.dataio import read_trial

    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
        meta = dict(kv.split("=", 1) for kv in first.lstrip("# ").split())
        rows = list(csv.DictReader(fh))
    cache: dict[tuple[str, str], EegTrial] = {}
    parts: dict[str, list[DecisionWindow]] = {TRAIN: [], VAL: [], TEST: []}
    n_win = None
    for row in rows:
        if subject_id is not None and row["subject_id"] != subject_id:
            continue
        tid = row["trial_id"]
        key = (row["subject_id"], tid)
        if key not in cache:
            tpath = Path(row["trial_path"])
            if not tpath.is_absolute():
                tpath = path.parent / tpath
            cache[key] = read_trial(tpath, subject_id=row["subject_id"], trial_id=tid)
        trial = cache[key]
        s, n = int(row["start_sample"]), int(row["n_samples"])
        if s + n > trial.samples:
            raise ValueError(f"{path}: window {tid}@{s} runs past the end of its trial")
        n_win = n
        parts[row["partition"]].append(DecisionWindow(trial.data[s : s + n], int(row["label"]), row["subject_id"], tid, s))
    if n_win is None:
        raise ValueError(f"{path}: no windows" + (f" for subject {subject_id}" if subject_id else ""))
    skipped = [s for s in meta.get("skipped", "").split(",") if s]
    return SplitPlan(
        parts[TRAIN], parts[VAL], parts[TEST],
        window_seconds=float(meta["window_seconds"]),
        window_samples=n_win,
        train_fraction_per_trial=float(meta.get("train_fraction", 0.9)),
        seed=int(meta.get("seed", 0)),
        skipped_trials=skipped,
    )
