"""EEG trial storage, dataset manifests and a synthetic EEG generator.

Trial files use a small little-endian binary layout::

    offset  size  field
    0       4     magic b"EEGT"
    4       2     format version (u16, currently 1)
    6       2     channels (u16)
    8       8     sample rate in Hz (f64)
    16      8     samples (u64)
    24      1     label (u8, 0 = left, 1 = right)
    25      7     reserved, zero
    32      ...   samples x channels float32, time-major

Manifests are JSON documents; see ``README.md`` for the schema.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EEGT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHdQB7s")
SCENES = ("audio_only", "audio_visual")


class TrialFormatError(ValueError):
    """File is not a trial file (bad magic or unsupported version)."""


class TrialSchemaError(ValueError):
    """Trial header disagrees with what the caller expected."""


class TrialDataError(ValueError):
    """Trial payload is truncated or holds non-finite values."""


class ManifestError(ValueError):
    pass


@dataclass(eq=False)
class EegTrial:
    """One continuous recording, ``data`` is ``samples x channels`` in microvolts."""

    subject_id: str
    trial_id: str
    sample_rate_hz: float
    data: np.ndarray
    label: int
    reference_channels: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise TrialSchemaError(f"trial data must be 2-D (samples x channels), got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 2:
            raise TrialSchemaError(f"trial needs >= 1 sample and >= 2 channels, got shape {self.data.shape}")
        if not self.sample_rate_hz > 0:
            raise TrialSchemaError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.label not in (0, 1):
            raise TrialSchemaError(f"label must be 0 or 1, got {self.label!r}")
        if not np.all(np.isfinite(self.data)):
            raise TrialDataError(f"trial {self.trial_id!r} contains non-finite samples")
        for ch in self.reference_channels:
            if not 0 <= ch < self.channels:
                raise TrialSchemaError(f"reference channel {ch} out of range for {self.channels} channels")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def samples(self) -> int:
        return self.data.shape[0]

    @property
    def duration_s(self) -> float:
        return self.samples / self.sample_rate_hz

    def replace_data(self, data: np.ndarray, sample_rate_hz: float | None = None) -> EegTrial:
        return EegTrial(
            subject_id=self.subject_id,
            trial_id=self.trial_id,
            sample_rate_hz=self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            data=data,
            label=self.label,
            reference_channels=list(self.reference_channels),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EegTrial):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.trial_id == other.trial_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.label == other.label
            and list(self.reference_channels) == list(other.reference_channels)
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


def encode_trial(trial: EegTrial) -> bytes:
    if not np.all(np.isfinite(trial.data)):
        raise TrialDataError(f"refusing to encode trial {trial.trial_id!r}: non-finite samples")
    if trial.channels > 0xFFFF:
        raise TrialSchemaError(f"too many channels for the trial format: {trial.channels}")
    payload = np.ascontiguousarray(trial.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise TrialDataError(f"trial {trial.trial_id!r} overflows float32")
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, trial.channels, float(trial.sample_rate_hz), trial.samples, trial.label, bytes(7)
    )
    return header + payload.tobytes()


def decode_trial(
    raw: bytes,
    *,
    channels: int | None = None,
    sample_rate_hz: float | None = None,
    subject_id: str = "",
    trial_id: str = "",
    reference_channels: list[int] | None = None,
    source: str = "<bytes>",
) -> EegTrial:
    if len(raw) < HEADER.size:
        raise TrialFormatError(f"{source}: file shorter than the {HEADER.size}-byte header")
    magic, version, n_ch, rate, n_samples, label, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TrialFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TrialFormatError(f"{source}: unsupported format version {version}")
    if channels is not None and n_ch != channels:
        raise TrialSchemaError(f"{source}: header has {n_ch} channels, expected {channels}")
    if sample_rate_hz is not None and rate != sample_rate_hz:
        raise TrialSchemaError(f"{source}: header sample rate {rate} Hz, expected {sample_rate_hz} Hz")
    expected = n_samples * n_ch * 4
    actual = len(raw) - HEADER.size
    if actual != expected:
        raise TrialDataError(f"{source}: payload holds {actual} bytes, expected {expected} bytes")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n_samples, n_ch)
    if not np.all(np.isfinite(data)):
        raise TrialDataError(f"{source}: payload contains non-finite values")
    try:
        return EegTrial(
            subject_id=subject_id,
            trial_id=trial_id,
            sample_rate_hz=rate,
            data=data.astype(np.float32),
            label=label,
            reference_channels=list(reference_channels or []),
        )
    except (TrialSchemaError, TrialDataError) as exc:
        raise type(exc)(f"{source}: {exc}") from None


def write_trial(trial: EegTrial, path: str | os.PathLike) -> None:
    """Write ``trial`` to ``path``; nothing is written if the trial is invalid."""
    blob = encode_trial(trial)
    path = Path(path)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write trial file {path}: {exc}") from exc


def read_trial(
    path: str | os.PathLike,
    channels: int | None = None,
    sample_rate_hz: float | None = None,
    *,
    subject_id: str = "",
    trial_id: str | None = None,
    reference_channels: list[int] | None = None,
) -> EegTrial:
    """Read a trial file, optionally checking the header against expectations.

    ``trial_id`` defaults to the file stem since the binary format does not
    carry identifiers.
    """
    path = Path(path)
    raw = path.read_bytes()
    return decode_trial(
        raw,
        channels=channels,
        sample_rate_hz=sample_rate_hz,
        subject_id=subject_id,
        trial_id=path.stem if trial_id is None else trial_id,
        reference_channels=reference_channels,
        source=str(path),
    )


# --- manifests -------------------------------------------------------------


@dataclass
class TrialEntry:
    trial_id: str
    path: str
    label: int


@dataclass
class SubjectEntry:
    subject_id: str
    trials: list[TrialEntry]
    reference_channels: list[int] = field(default_factory=list)


@dataclass
class DatasetManifest:
    name: str
    scene: str
    subjects: list[SubjectEntry]
    sample_rate_hz: float
    channels: int | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.scene not in SCENES:
            raise ManifestError(f"scene must be one of {SCENES}, got {self.scene!r}")
        if not self.sample_rate_hz > 0:
            raise ManifestError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "scene": self.scene,
            "sample_rate_hz": self.sample_rate_hz,
            "channels": self.channels,
            "subjects": [
                {
                    "subject_id": s.subject_id,
                    "reference_channels": list(s.reference_channels),
                    "trials": [{"trial_id": t.trial_id, "path": t.path, "label": t.label} for t in s.trials],
                }
                for s in self.subjects
            ],
        }
        return out

    @classmethod
    def from_dict(cls, doc: dict, root: Path | None = None) -> DatasetManifest:
        try:
            subjects = [
                SubjectEntry(
                    subject_id=str(s["subject_id"]),
                    reference_channels=[int(c) for c in s.get("reference_channels", [])],
                    trials=[TrialEntry(str(t["trial_id"]), str(t["path"]), int(t["label"])) for t in s["trials"]],
                )
                for s in doc["subjects"]
            ]
            return cls(
                name=str(doc["name"]),
                scene=str(doc["scene"]),
                subjects=subjects,
                sample_rate_hz=float(doc["sample_rate_hz"]),
                channels=None if doc.get("channels") is None else int(doc["channels"]),
                root=root,
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: missing or invalid field {exc}") from None


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return DatasetManifest.from_dict(doc, root=path.parent)


def load_trials(manifest: DatasetManifest) -> dict[str, list[EegTrial]]:
    """Read every trial of the manifest, grouped by subject, checking consistency."""
    by_subject: dict[str, list[EegTrial]] = {}
    channels = manifest.channels
    for subject in manifest.subjects:
        trials = []
        for entry in subject.trials:
            path = manifest.resolve(entry.path)
            if not path.is_file():
                raise ManifestError(f"manifest {manifest.name!r}: trial file not found: {path}")
            trial = read_trial(
                path,
                channels=channels,
                sample_rate_hz=manifest.sample_rate_hz,
                subject_id=subject.subject_id,
                trial_id=entry.trial_id,
                reference_channels=subject.reference_channels,
            )
            if trial.label != entry.label:
                raise ManifestError(f"{path}: file label {trial.label} disagrees with manifest label {entry.label}")
            channels = trial.channels
            trials.append(trial)
        by_subject[subject.subject_id] = trials
    return by_subject


# --- synthetic EEG ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 2
    trials_per_subject: int = 8
    trial_seconds: float = 60.0
    channels: int = 8
    sample_rate_hz: float = 128.0
    spatial_contrast: float = 1.0
    temporal_contrast: float = 0.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 1 or self.trials_per_subject < 2:
            raise ValueError("need >= 1 subject and >= 2 trials per subject (one per class)")
        if self.channels < 2:
            raise ValueError("need >= 2 channels")
        if self.trial_seconds <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("trial_seconds and sample_rate_hz must be positive")
        if self.spatial_contrast < 0 or self.temporal_contrast < 0:
            raise ValueError("contrasts must be non-negative")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")


def channel_groups(channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Left and right channel groups carrying the attention signature."""
    size = max(1, channels // 4)
    return np.arange(0, size), np.arange(size, 2 * size)


def synthesize_trial(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """Return ``samples x channels`` float64 data for one synthetic trial.

    The attended group (left for class 0, right for class 1) receives a shared
    latent source of variance ``(spatial_contrast * noise_std)**2`` and a
    4-8 Hz oscillation whose amplitude follows a slow random envelope.
    """
    n = int(round(spec.trial_seconds * spec.sample_rate_hz))
    t = np.arange(n) / spec.sample_rate_hz
    data = rng.normal(0.0, spec.noise_std, size=(n, spec.channels))
    left, right = channel_groups(spec.channels)
    group = left if label == 0 else right

    latent = rng.normal(0.0, 1.0, size=n)
    data[:, group] += (spec.spatial_contrast * spec.noise_std) * latent[:, None]

    freq = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    env_freq = rng.uniform(0.1, 0.5)
    envelope = 1.0 + 0.5 * np.sin(2 * np.pi * env_freq * t + rng.uniform(0.0, 2 * np.pi))
    theta = envelope * np.sin(2 * np.pi * freq * t + phase)
    data[:, group] += (spec.temporal_contrast * spec.noise_std) * theta[:, None]
    return data


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike, name: str = "synthetic") -> DatasetManifest:
    """Write a balanced synthetic dataset plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    subject_seeds = root.spawn(spec.n_subjects)
    subjects = []
    for s_idx, s_seed in enumerate(subject_seeds):
        subject_id = f"S{s_idx + 1:02d}"
        entries = []
        for t_idx, t_seed in enumerate(s_seed.spawn(spec.trials_per_subject)):
            label = t_idx % 2
            data = synthesize_trial(spec, label, np.random.default_rng(t_seed))
            trial_id = f"{subject_id}_T{t_idx + 1:02d}"
            rel = f"{subject_id}/{trial_id}.eegt"
            (out_dir / subject_id).mkdir(exist_ok=True)
            trial = EegTrial(subject_id, trial_id, spec.sample_rate_hz, data.astype(np.float32), label)
            write_trial(trial, out_dir / rel)
            entries.append(TrialEntry(trial_id, rel, label))
        subjects.append(SubjectEntry(subject_id, entries))
    manifest = DatasetManifest(
        name=name,
        scene="audio_only",
        subjects=subjects,
        sample_rate_hz=spec.sample_rate_hz,
        channels=spec.channels,
        root=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
