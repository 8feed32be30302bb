import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from darnet import csp as csp_mod
from darnet.dataio import EegTrial
from darnet.evaluation import (
    AggregateReport,
    PipelineConfig,
    SubjectMetrics,
    ablate,
    derive_seed,
    evaluate,
    format_cell,
    parse_report_csv,
    render_csv,
    render_report,
    run_subject,
    sweep,
)
from darnet.model import VARIANTS, DarnetConfig, build_model
from darnet.preprocess import DecisionWindow
from darnet.training import TrainConfig

FAST = PipelineConfig(
    model=DarnetConfig(c_in=8, d_model=8, n_heads=2),
    train=TrainConfig(max_epochs=3, patience=3),
)


def random_windows(n, channels=4, t=16, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2 if labels is None else labels
    return [
        DecisionWindow(rng.standard_normal((t, channels)).astype(np.float32), int(y), "S01", f"T{i:04d}", 0)
        for i, y in enumerate(labels)
    ]


def identity_csp(channels=4):
    return csp_mod.fit_from_covariances(np.eye(channels), np.eye(channels) * 2)


def test_constant_predictor_hits_base_rate():
    model = build_model(DarnetConfig(c_in=4, d_model=8, n_heads=2), seed=0)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(torch.tensor([10.0, -10.0]))
    labels = np.array([0] * 7 + [1] * 13)
    m = evaluate(model, identity_csp(), random_windows(20, labels=labels))
    assert m.accuracy == 7 / 20 and m.n_correct == 7


def test_exact_ties_go_to_class_zero():
    model = build_model(DarnetConfig(c_in=4, d_model=8, n_heads=2), seed=0)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
    m = evaluate(model, identity_csp(), random_windows(10, labels=np.zeros(10, int)))
    assert m.accuracy == 1.0


def test_flipped_labels_complement_accuracy():
    model = build_model(DarnetConfig(c_in=4, d_model=8, n_heads=2), seed=3)
    windows = random_windows(50, seed=2)
    flipped = [replace(w, label=1 - w.label) for w in windows]
    a = evaluate(model, identity_csp(), windows).accuracy
    b = evaluate(model, identity_csp(), flipped).accuracy
    assert a + b == pytest.approx(1.0, abs=1e-15)


def test_random_init_is_near_chance():
    model = build_model(DarnetConfig(c_in=4, d_model=8, n_heads=2), seed=7)
    m = evaluate(model, identity_csp(), random_windows(1000, seed=5))
    assert m.n_test_windows == 1000
    assert 0.44 <= m.accuracy <= 0.56


def test_metric_validation_and_empty_set():
    with pytest.raises(ValueError):
        SubjectMetrics("S01", 1.0, 0, 0)
    with pytest.raises(ValueError):
        SubjectMetrics("S01", 1.0, 3, 4)
    with pytest.raises(ValueError):
        evaluate(build_model(DarnetConfig(c_in=4, d_model=8, n_heads=2)), identity_csp(), [])


def test_derive_seed_is_stable():
    assert derive_seed(0, "S01", 1.0) == derive_seed(0, "S01", 1.0)
    assert derive_seed(0, "S01", 1.0) != derive_seed(0, "S02", 1.0)
    assert derive_seed(1, "S01", 1.0) != derive_seed(0, "S01", 1.0)


def test_aggregate_statistics():
    subs = [SubjectMetrics(f"S{i}", 1.0, 10, c) for i, c in enumerate([9, 7, 8, 10])]
    rep = AggregateReport("d", "s", "full", 1.0, subs)
    accs = [0.9, 0.7, 0.8, 1.0]
    assert rep.mean_accuracy == pytest.approx(sum(accs) / 4, abs=1e-12)
    mu = sum(accs) / 4
    assert rep.sd_accuracy == pytest.approx(math.sqrt(sum((a - mu) ** 2 for a in accs) / 3), abs=1e-12)
    assert AggregateReport("d", "s", "full", 1.0, subs[:1]).sd_accuracy == 0.0


def test_format_cell():
    assert format_cell(0.916, 0.0483) == "91.6 ± 4.83"


def test_empty_render_is_header_only():
    table, csv_text = render_report([])
    assert csv_text == "dataset,scene,variant,window_s,subject,n_windows,accuracy\n"
    assert table.splitlines()[0].split() == ["dataset", "scene", "model"]
    assert len(table.splitlines()) == 2


def test_csv_round_trip():
    rng = np.random.default_rng(0)
    reports = []
    for w in (0.1, 1.0, 2.0):
        subs = []
        for s in range(5):
            n = int(rng.integers(50, 600))
            subs.append(SubjectMetrics(f"S{s:02d}", w, n, int(rng.integers(0, n + 1))))
        reports.append(AggregateReport("KUL", "audio_only", "full", w, subs))
    back = parse_report_csv(render_csv(reports))
    assert len(back) == 3
    for a, b in zip(reports, back):
        assert a.window_seconds == b.window_seconds
        for x, y in zip(a.subjects, b.subjects):
            assert round(x.accuracy, 6) == round(y.accuracy, 6)
            assert x.n_test_windows == y.n_test_windows
        assert b.mean_accuracy == pytest.approx(np.mean([s.accuracy for s in b.subjects]), abs=1e-12)
        assert b.sd_accuracy == pytest.approx(np.std([s.accuracy for s in b.subjects], ddof=1), abs=1e-12)
    assert render_csv(back) == render_csv(reports)


def test_table_layout():
    subs = [SubjectMetrics("S01", 1.0, 100, 90), SubjectMetrics("S02", 1.0, 100, 80)]
    reports = [
        AggregateReport("syn", "a", "full", 1.0, subs),
        AggregateReport("syn", "a", "full", 2.0, []),
    ]
    table = render_report(reports)[0].splitlines()
    assert table[0].split()[-2:] == ["1s", "2s"]
    assert "85.0 ± 7.07" in table[2] and table[2].rstrip().endswith("-")


def test_sweep_single_cell(small_dataset):
    _, _, data = small_dataset
    reports = sweep(data, [1.0], FAST, master_seed=3)
    assert len(reports) == 1
    rep = reports[0]
    assert len(rep.subjects) == 1 and not rep.failures
    assert rep.mean_accuracy == rep.subjects[0].accuracy
    assert rep.subjects[0].window_seconds == 1.0


def test_sweep_records_failures_and_continues(small_dataset):
    _, _, data = small_dataset
    short = {"S99": [EegTrial("S99", "T01", 128.0, np.random.default_rng(0).normal(size=(64, 8)).astype(np.float32), 0)]}
    reports = sweep({**data, **short}, [1.0], FAST, master_seed=3)
    assert [s.subject_id for s in reports[0].subjects] == ["S01"]
    assert len(reports[0].failures) == 1 and reports[0].failures[0].startswith("S99")


def test_ablate_single_variant_matches_run_subject(small_dataset):
    _, _, data = small_dataset
    rep = ablate(data, 1.0, FAST, variants=["no_fusion"], master_seed=5)
    direct = run_subject(data["S01"], 1.0, FAST, "no_fusion", seed=derive_seed(5, "S01", 1.0))
    assert len(rep) == 1
    assert rep[0].subjects[0] == direct.metrics


def test_variants_share_test_windows(small_dataset):
    _, _, data = small_dataset
    seed = derive_seed(0, "S01", 1.0)
    runs = [run_subject(data["S01"], 1.0, replace(FAST, train=TrainConfig(max_epochs=1, patience=1)), v, seed)
            for v in VARIANTS]
    keys = [[w.key for w in r.split.test_windows] for r in runs]
    assert all(k == keys[0] for k in keys)
    projections = [r.csp.projection for r in runs]
    assert all(np.array_equal(p, projections[0]) for p in projections)
    assert [r.metrics.variant for r in runs] == list(VARIANTS)


def test_unknown_variant_rejected(small_dataset):
    _, _, data = small_dataset
    with pytest.raises(ValueError, match="unknown variant"):
        ablate(data, 1.0, FAST, variants=["nope"])
