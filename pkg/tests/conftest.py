import numpy as np
import pytest

from darnet.dataio import EegTrial, SyntheticSpec, generate_synthetic, load_trials

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_trial(samples=256, channels=4, rate=128.0, label=0, seed=0, subject="S01", trial="T01"):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(samples, channels)).astype(np.float32)
    return EegTrial(subject, trial, rate, data, label)


@pytest.fixture
def trial():
    return make_trial()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """One subject, four 20-second trials with a strong spatial signature."""
    out = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(n_subjects=1, trials_per_subject=4, trial_seconds=20, channels=8,
                         sample_rate_hz=128, spatial_contrast=2.0, seed=11)
    manifest = generate_synthetic(spec, out)
    return out, manifest, load_trials(manifest)
