"""Per-subject evaluation, window-length sweeps, ablations and report tables."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from darnet import csp as csp_mod
from darnet.dataio import EegTrial
from darnet.model import VARIANTS, Darnet, DarnetConfig, build_model
from darnet.preprocess import DecisionWindow, SplitPlan, plan_split, stack_windows
from darnet.training import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

CSV_FIELDS = ["dataset", "scene", "variant", "window_s", "subject", "n_windows", "accuracy"]


@dataclass
class SubjectMetrics:
    subject_id: str
    window_seconds: float
    n_test_windows: int
    n_correct: int
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.n_test_windows < 1:
            raise ValueError("a subject needs at least one test window")
        if not 0 <= self.n_correct <= self.n_test_windows:
            raise ValueError("n_correct out of range")

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_test_windows


@dataclass
class AggregateReport:
    dataset: str
    scene: str
    variant: str
    window_seconds: float
    subjects: list[SubjectMetrics]
    failures: list[str] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([s.accuracy for s in self.subjects], dtype=np.float64)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.subjects else float("nan")

    @property
    def sd_accuracy(self) -> float:
        """Sample SD over subjects (divisor n - 1); 0 for a single subject."""
        if len(self.subjects) < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))


def predict(model: Darnet, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions for ``n x c_in x T`` features; exact ties go to class 0."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(features, dtype=dtype)
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i : i + batch_size])
            out.append((logits[:, 1] > logits[:, 0]).long().numpy())
    return np.concatenate(out)


def evaluate(
    model: Darnet,
    csp: csp_mod.CspTransform,
    test_windows: list[DecisionWindow],
    window_seconds: float = float("nan"),
) -> SubjectMetrics:
    if not test_windows:
        raise ValueError("cannot evaluate on an empty test set")
    subjects = {w.subject_id for w in test_windows}
    x, y = stack_windows(test_windows)
    pred = predict(model, csp_mod.transform_batch(csp, x))
    return SubjectMetrics(
        subject_id=subjects.pop() if len(subjects) == 1 else "+".join(sorted(subjects)),
        window_seconds=window_seconds,
        n_test_windows=len(y),
        n_correct=int((pred == y).sum()),
        variant=model.config.variant,
    )


# --- pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything downstream of preprocessing for one subject-level run."""

    model: DarnetConfig = field(default_factory=lambda: DarnetConfig(c_in=8, d_model=8, n_heads=2))
    train: TrainConfig = field(default_factory=TrainConfig)
    n_components: int | None = None
    epsilon: float | None = None
    train_fraction_per_trial: float = 0.9
    val_fraction_of_train: float = 0.1
    train_overlap: float = 0.5
    test_overlap: float = 0.5
    shuffle_train_labels: bool = False
    dataset: str = "synthetic"
    scene: str = "audio_only"


def derive_seed(master_seed: int, *parts: object) -> int:
    key = ":".join([str(master_seed), *map(str, parts)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


@dataclass
class SubjectRun:
    split: SplitPlan
    csp: csp_mod.CspTransform
    model: Darnet
    report: TrainReport
    metrics: SubjectMetrics


def prepare_subject(
    trials: list[EegTrial], window_seconds: float, pipeline: PipelineConfig, seed: int
) -> tuple[SplitPlan, csp_mod.CspTransform]:
    """Window the trials and fit CSP on the training region only."""
    split = plan_split(
        trials,
        window_seconds,
        train_fraction_per_trial=pipeline.train_fraction_per_trial,
        val_fraction_of_train=pipeline.val_fraction_of_train,
        train_overlap=pipeline.train_overlap,
        test_overlap=pipeline.test_overlap,
        seed=seed,
    )
    n_channels = trials[0].channels
    n_comp = pipeline.n_components or min(pipeline.model.c_in, n_channels - n_channels % 2)
    fitted = csp_mod.fit(split.train_windows + split.val_windows, n_comp, pipeline.epsilon)
    return split, fitted


def train_and_evaluate(
    split: SplitPlan,
    fitted: csp_mod.CspTransform,
    pipeline: PipelineConfig,
    variant: str,
    seed: int,
) -> SubjectRun:
    cfg = replace(pipeline.model, c_in=fitted.n_components).with_variant(variant)
    tx, ty = stack_windows(split.train_windows)
    vx, vy = stack_windows(split.val_windows)
    if pipeline.shuffle_train_labels:
        rng = np.random.default_rng(derive_seed(seed, "label-shuffle"))
        ty = rng.permutation(ty)
        vy = rng.permutation(vy)
    model = build_model(cfg, seed=seed)
    best, report = train(
        model,
        csp_mod.transform_batch(fitted, tx),
        ty,
        csp_mod.transform_batch(fitted, vx),
        vy,
        replace(pipeline.train, seed=seed),
    )
    metrics = evaluate(best, fitted, split.test_windows, split.window_seconds)
    return SubjectRun(split, fitted, best, report, metrics)


def run_subject(
    trials: list[EegTrial],
    window_seconds: float,
    pipeline: PipelineConfig,
    variant: str = "full",
    seed: int = 0,
) -> SubjectRun:
    split, fitted = prepare_subject(trials, window_seconds, pipeline, seed)
    return train_and_evaluate(split, fitted, pipeline, variant, seed)


def _run_cells(
    data: dict[str, list[EegTrial]],
    windows_seconds: list[float],
    variants: list[str],
    pipeline: PipelineConfig,
    master_seed: int,
    threads: int,
) -> list[AggregateReport]:
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    cells = [(w, s) for w in windows_seconds for s in data]

    def job(cell):
        w, subject = cell
        seed = derive_seed(master_seed, subject, w)
        out: dict[str, SubjectMetrics | str] = {}
        try:
            split, fitted = prepare_subject(data[subject], w, pipeline, seed)
        except Exception as exc:  # recorded, sweep continues
            log.error("cell %s @ %ss failed during preparation: %s", subject, w, exc)
            return {v: f"{subject}: {exc}" for v in variants}
        for v in variants:
            try:
                run = train_and_evaluate(split, fitted, pipeline, v, seed)
                out[v] = run.metrics
                log.info("%s %s %.2fs acc=%.4f", subject, v, w, run.metrics.accuracy)
            except Exception as exc:
                log.error("cell %s/%s @ %ss failed: %s", subject, v, w, exc)
                out[v] = f"{subject}: {exc}"
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, cells))
    else:
        results = [job(c) for c in cells]

    reports = []
    for w in windows_seconds:
        for v in variants:
            rep = AggregateReport(pipeline.dataset, pipeline.scene, v, w, [])
            for (cw, _), res in zip(cells, results):
                if cw != w:
                    continue
                item = res[v]
                if isinstance(item, SubjectMetrics):
                    rep.subjects.append(item)
                else:
                    rep.failures.append(item)
            reports.append(rep)
    return reports


def sweep(
    data: dict[str, list[EegTrial]],
    windows_seconds: list[float],
    pipeline: PipelineConfig,
    variant: str = "full",
    master_seed: int = 0,
    threads: int = 1,
) -> list[AggregateReport]:
    """One report per window length; each subject is re-windowed, re-fitted and retrained."""
    return _run_cells(data, list(windows_seconds), [variant], pipeline, master_seed, threads)


def ablate(
    data: dict[str, list[EegTrial]],
    window_seconds: float,
    pipeline: PipelineConfig,
    variants: list[str] = list(VARIANTS),
    master_seed: int = 0,
    threads: int = 1,
) -> list[AggregateReport]:
    """One report per variant; splits, CSP fits and seeds are shared across variants."""
    return _run_cells(data, [window_seconds], list(variants), pipeline, master_seed, threads)


# --- reporting ---------------------------------------------------------------


def format_cell(mean: float, sd: float) -> str:
    return f"{mean * 100:.1f} ± {sd * 100:.2f}"


def _fmt_window(w: float) -> str:
    return f"{w:g}s"


def render_table(reports: list[AggregateReport]) -> str:
    windows = sorted({r.window_seconds for r in reports})
    rows: dict[tuple[str, str, str], dict[float, AggregateReport]] = {}
    for r in reports:
        rows.setdefault((r.dataset, r.scene, r.variant), {})[r.window_seconds] = r
    header = ["dataset", "scene", "model"] + [_fmt_window(w) for w in windows]
    body = []
    for key, cells in rows.items():
        line = list(key)
        for w in windows:
            r = cells.get(w)
            line.append(format_cell(r.mean_accuracy, r.sd_accuracy) if r is not None and r.subjects else "-")
        body.append(line)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{n}}}" for n in widths)
    lines = [fmt.format(*header), "  ".join("-" * n for n in widths)]
    lines += [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"


def render_csv(reports: list[AggregateReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        for s in r.subjects:
            w.writerow([r.dataset, r.scene, r.variant, repr(float(r.window_seconds)), s.subject_id,
                        s.n_test_windows, f"{s.accuracy:.6f}"])
    return buf.getvalue()


def render_report(reports: list[AggregateReport]) -> tuple[str, str]:
    """Table-style text grid (rows = model, columns = window lengths) and the CSV."""
    return render_table(reports), render_csv(reports)


def parse_report_csv(text: str) -> list[AggregateReport]:
    groups: dict[tuple[str, str, str, float], AggregateReport] = {}
    for row in csv.DictReader(io.StringIO(text)):
        w = float(row["window_s"])
        key = (row["dataset"], row["scene"], row["variant"], w)
        rep = groups.setdefault(key, AggregateReport(row["dataset"], row["scene"], row["variant"], w, []))
        n = int(row["n_windows"])
        rep.subjects.append(
            SubjectMetrics(row["subject"], w, n, int(round(float(row["accuracy"]) * n)), row["variant"])
        )
    return list(groups.values())
