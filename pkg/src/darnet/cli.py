"""``darnet`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from darnet import csp as csp_mod
from darnet.dataio import SyntheticSpec, generate_synthetic, load_trials, read_manifest, write_manifest, write_trial
from darnet.evaluation import (
    PipelineConfig,
    ablate,
    evaluate,
    parse_report_csv,
    render_report,
    sweep,
)
from darnet.model import VARIANTS, DarnetConfig, build_model, load_checkpoint, save_checkpoint
from darnet.preprocess import PreprocessConfig, plan_split, preprocess_trial, read_split_plan, stack_windows, write_split_plan
from darnet.training import TrainConfig, train

log = logging.getLogger("darnet")

COMMANDS = ("synth-gen", "preprocess", "fit-csp", "train", "evaluate", "ablate", "sweep", "report", "selftest")

SELFTEST_MIN_ACCURACY = 0.90
SELFTEST_NULL_BAND = (0.4, 0.6)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        hint = ""
        if "invalid choice" in message:
            bad = message.split("'")[1] if "'" in message else ""
            close = difflib.get_close_matches(bad, COMMANDS, n=1)
            if close:
                hint = f"\ndid you mean '{close[0]}'?"
        sys.stderr.write(f"{self.prog}: error: {message}{hint}\n")
        sys.exit(1)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _reref(text: str):
    if text in ("none", "mean", "reference"):
        return text
    if text.startswith("subset:"):
        idx = tuple(int(x) for x in text[len("subset:"):].split(",") if x)
        if not idx:
            raise argparse.ArgumentTypeError("subset needs at least one channel index")
        return idx
    raise argparse.ArgumentTypeError(f"expected none, mean, reference or subset:i,j,..., got {text!r}")


def _notch(text: str):
    return None if text.lower() == "none" else float(text)


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed; all randomness derives from it")
    common.add_argument("--threads", type=int, default=1, help="parallel sweep/ablate cells (1 = bit-exact)")
    common.add_argument("--log-level", default="INFO", help="overridden by $DARNET_LOG")

    model_opts = Parser(add_help=False)
    model_opts.add_argument("--config", type=Path, help="model config JSON (model.cfg)")
    model_opts.add_argument("--d-model", type=int, default=None)
    model_opts.add_argument("--heads", type=int, default=None)
    model_opts.add_argument("--variant", choices=VARIANTS, default=None)

    train_opts = Parser(add_help=False)
    train_opts.add_argument("--lr", type=float, default=5e-4)
    train_opts.add_argument("--wd", type=float, default=3e-4)
    train_opts.add_argument("--batch", type=int, default=32)
    train_opts.add_argument("--epochs", type=int, default=100)
    train_opts.add_argument("--patience", type=int, default=10)
    train_opts.add_argument("--decoupled-wd", action="store_true", help="decoupled instead of L2 weight decay")

    p = Parser(prog="darnet", description="DARNet auditory attention decoding pipeline")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}", parser_class=Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic EEG dataset")
    s.add_argument("--subjects", type=int, default=2)
    s.add_argument("--trials", type=int, default=8)
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--rate", type=float, default=128.0)
    s.add_argument("--spatial-contrast", type=float, default=1.0)
    s.add_argument("--temporal-contrast", type=float, default=0.0)
    s.add_argument("--noise-std", type=float, default=1.0)
    s.add_argument("--name", default="synthetic")
    s.add_argument("--out-dir", type=Path, required=True)

    s = sub.add_parser("preprocess", parents=[common], help="filter, resample and window a dataset")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--low", type=float, default=0.1)
    s.add_argument("--high", type=float, default=50.0)
    s.add_argument("--notch", type=_notch, default=50.0, help="Hz, or 'none'")
    s.add_argument("--target-rate", type=float, default=128.0)
    s.add_argument("--reref", type=_reref, default="none", help="none | mean | reference (manifest reference_channels) | subset:i,j,...")
    s.add_argument("--window-seconds", type=float, default=1.0)
    s.add_argument("--train-fraction", type=float, default=0.9)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--test-overlap", type=float, default=0.5)

    s = sub.add_parser("fit-csp", parents=[common], help="fit CSP on the training windows of a split plan")
    s.add_argument("--split-plan", type=Path, required=True)
    s.add_argument("--components", type=int, default=None)
    s.add_argument("--epsilon", type=float, default=None)
    s.add_argument("--subject", default=None, help="fit on one subject (required for multi-subject plans)")
    s.add_argument("--pooled", action="store_true", help="fit one transform across all subjects")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train", parents=[common, model_opts, train_opts], help="train DARNet")
    s.add_argument("--split-plan", type=Path, required=True)
    s.add_argument("--csp", type=Path, required=True)
    s.add_argument("--subject", default=None)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test windows")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--csp", type=Path, required=True)
    s.add_argument("--split-plan", type=Path, required=True)
    s.add_argument("--subject", default=None)
    s.add_argument("--dataset", default="synthetic")
    s.add_argument("--scene", default="audio_only")
    s.add_argument("--out", type=Path, required=True)

    for name, helptext in (("sweep", "train/evaluate across window lengths"), ("ablate", "run the ablation variants")):
        s = sub.add_parser(name, parents=[common, model_opts, train_opts], help=helptext)
        s.add_argument("--manifest", type=Path, required=True, help="preprocessed dataset manifest")
        s.add_argument("--components", type=int, default=None)
        s.add_argument("--epsilon", type=float, default=None)
        s.add_argument("--out", type=Path, required=True)
        if name == "sweep":
            s.add_argument("--windows", type=_floats, default=[0.1, 1.0, 2.0], help="comma-separated seconds")
        else:
            s.add_argument("--window-seconds", type=float, default=1.0)
            s.add_argument("--variants", default=",".join(VARIANTS))

    s = sub.add_parser("report", parents=[common], help="render report tables from result CSVs")
    s.add_argument("--inputs", type=Path, nargs="+", required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("selftest", parents=[common], help="tiny end-to-end pipeline on synthetic data")
    s.add_argument("--null", action="store_true", help="zero contrasts; expects chance-level accuracy")
    s.add_argument("--out", type=Path, default=None, help="keep artifacts here instead of a temp dir")
    return p


# --- helpers -----------------------------------------------------------------


def _model_config(args, c_in: int) -> DarnetConfig:
    if args.config is not None:
        cfg = DarnetConfig.from_json(args.config.read_text(encoding="utf-8"))
        cfg = replace(cfg, c_in=c_in)
    else:
        cfg = DarnetConfig(c_in=c_in)
    updates = {}
    if args.d_model is not None:
        updates["d_model"] = args.d_model
    if args.heads is not None:
        updates["n_heads"] = args.heads
    if updates:
        cfg = replace(cfg, **updates)
    if args.variant is not None:
        cfg = cfg.with_variant(args.variant)
    return cfg


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.wd,
        batch_size=args.batch,
        max_epochs=args.epochs,
        patience=min(args.patience, args.epochs),
        seed=args.seed,
        decoupled_weight_decay=args.decoupled_wd,
    )


def _load_plan(path: Path, subject: str | None, pooled: bool = False):
    plan = read_split_plan(path, subject_id=subject)
    subjects = plan.subjects()
    if subject is None and len(subjects) > 1 and not pooled:
        raise UsageError(f"split plan covers {len(subjects)} subjects; pass --subject (one of {subjects}) or --pooled")
    return plan


# --- commands ----------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    spec = SyntheticSpec(
        n_subjects=args.subjects,
        trials_per_subject=args.trials,
        trial_seconds=args.seconds,
        channels=args.channels,
        sample_rate_hz=args.rate,
        spatial_contrast=args.spatial_contrast,
        temporal_contrast=args.temporal_contrast,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out_dir, name=args.name)
    print(f"wrote {sum(len(s.trials) for s in manifest.subjects)} trials to {args.out_dir / 'manifest.json'}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = read_manifest(args.manifest)
    config = PreprocessConfig(args.low, args.high, args.notch, args.target_rate, args.reref)
    data = load_trials(manifest)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    processed, paths = [], {}
    for subject, entry in zip(data, manifest.subjects):
        (out / subject).mkdir(exist_ok=True)
        for trial, t_entry in zip(data[subject], entry.trials):
            p = preprocess_trial(trial, config)
            rel = f"{subject}/{trial.trial_id}.eegt"
            write_trial(p, out / rel)
            t_entry.path = rel
            paths[(subject, trial.trial_id)] = rel
            processed.append(p)
    manifest.sample_rate_hz = config.target_rate_hz
    write_manifest(manifest, out / "manifest.json")
    plan = plan_split(
        processed,
        args.window_seconds,
        train_fraction_per_trial=args.train_fraction,
        val_fraction_of_train=args.val_fraction,
        train_overlap=args.overlap,
        test_overlap=args.test_overlap,
        seed=args.seed,
    )
    write_split_plan(plan, out / "split_plan.csv", paths)
    print(
        f"{len(processed)} trials -> {len(plan.train_windows)} train / {len(plan.val_windows)} val / "
        f"{len(plan.test_windows)} test windows; {len(plan.skipped_trials)} trials skipped"
    )
    return 0


def cmd_fit_csp(args) -> int:
    plan = _load_plan(args.split_plan, args.subject, args.pooled)
    fitted = csp_mod.fit(plan.train_windows + plan.val_windows, args.components, args.epsilon)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    csp_mod.save_csp(fitted, args.out)
    print(f"CSP {fitted.n_channels} -> {fitted.n_components} components written to {args.out}")
    return 0


def cmd_train(args) -> int:
    plan = _load_plan(args.split_plan, args.subject)
    fitted = csp_mod.load_csp(args.csp)
    cfg = _model_config(args, fitted.n_components)
    tcfg = _train_config(args)
    tx, ty = stack_windows(plan.train_windows)
    vx, vy = stack_windows(plan.val_windows)
    model = build_model(cfg, seed=args.seed)
    best, report = train(
        model, csp_mod.transform_batch(fitted, tx), ty, csp_mod.transform_batch(fitted, vx), vy, tcfg
    )
    save_checkpoint(best, args.out)
    (args.out / "train_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "epochs.csv").write_text(report.epochs_csv(), encoding="utf-8")
    print(f"best epoch {report.best_epoch} of {report.stopped_epoch}, val loss {report.val_loss[report.best_epoch - 1]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    plan = _load_plan(args.split_plan, args.subject)
    fitted = csp_mod.load_csp(args.csp)
    model = load_checkpoint(args.ckpt)
    from darnet.evaluation import AggregateReport

    metrics = evaluate(model, fitted, plan.test_windows, plan.window_seconds)
    rep = AggregateReport(args.dataset, args.scene, model.config.variant, plan.window_seconds, [metrics])
    _write_reports([rep], args.out)
    print(f"{metrics.subject_id}: accuracy {metrics.accuracy:.4f} on {metrics.n_test_windows} windows")
    return 0


def _write_reports(reports, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    table, csv_text = render_report(reports)
    (out / "results.csv").write_text(csv_text, encoding="utf-8")
    (out / "table.txt").write_text(table, encoding="utf-8")
    failures = [f for r in reports for f in r.failures]
    if failures:
        (out / "failures.txt").write_text("\n".join(failures) + "\n", encoding="utf-8")
    sys.stdout.write(table)


def _pipeline(args, data) -> PipelineConfig:
    first = next(iter(data.values()))[0]
    n = first.channels
    c_in = args.components or (n - n % 2)
    return PipelineConfig(
        model=_model_config(args, c_in),
        train=_train_config(args),
        n_components=args.components,
        epsilon=args.epsilon,
        dataset=args.dataset_name,
        scene=args.scene,
    )


def _load_dataset(args):
    manifest = read_manifest(args.manifest)
    args.dataset_name, args.scene = manifest.name, manifest.scene
    return load_trials(manifest)


def cmd_sweep(args) -> int:
    data = _load_dataset(args)
    pipe = _pipeline(args, data)
    variant = args.variant or pipe.model.variant
    reports = sweep(data, args.windows, pipe, variant=variant, master_seed=args.seed, threads=args.threads)
    _write_reports(reports, args.out)
    return 2 if any(r.failures for r in reports) else 0


def cmd_ablate(args) -> int:
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    data = _load_dataset(args)
    pipe = _pipeline(args, data)
    reports = ablate(data, args.window_seconds, pipe, variants, master_seed=args.seed, threads=args.threads)
    _write_reports(reports, args.out)
    return 2 if any(r.failures for r in reports) else 0


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        reports.extend(parse_report_csv(path.read_text(encoding="utf-8")))
    _write_reports(reports, args.out)
    return 0


def run_selftest(seed: int = 0, null: bool = False, workdir: Path | None = None) -> tuple[bool, float, str]:
    """Generate -> preprocess -> fit-csp -> train -> evaluate through the on-disk formats.

    Returns ``(passed, accuracy, message)``.
    """
    contrast = 0.0 if null else 2.0
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="darnet-selftest-")
        workdir = Path(tmp.name)
    try:
        raw, proc = workdir / "raw", workdir / "processed"
        common = ["--seed", str(seed), "--log-level", logging.getLevelName(log.getEffectiveLevel())]
        steps = [
            ["synth-gen", "--subjects", "1", "--trials", "8", "--seconds", "60", "--channels", "8",
             "--rate", "256", "--spatial-contrast", str(contrast), "--noise-std", "1", "--out-dir", str(raw)],
            ["preprocess", "--manifest", str(raw / "manifest.json"), "--out-dir", str(proc),
             "--target-rate", "128", "--window-seconds", "1"],
            ["fit-csp", "--split-plan", str(proc / "split_plan.csv"), "--components", "8",
             "--out", str(workdir / "csp.bin")],
            ["train", "--split-plan", str(proc / "split_plan.csv"), "--csp", str(workdir / "csp.bin"),
             "--d-model", "8", "--heads", "2", "--epochs", "30", "--out", str(workdir / "ckpt")],
            ["evaluate", "--ckpt", str(workdir / "ckpt"), "--csp", str(workdir / "csp.bin"),
             "--split-plan", str(proc / "split_plan.csv"), "--out", str(workdir / "report")],
        ]
        for argv in steps:
            code = _dispatch(build_parser().parse_args(argv + common))
            if code != 0:
                return False, float("nan"), f"stage {argv[0]} exited {code}"
        rows = parse_report_csv((workdir / "report" / "results.csv").read_text(encoding="utf-8"))
        acc = rows[0].subjects[0].accuracy
    finally:
        if tmp is not None:
            tmp.cleanup()
    if null:
        lo, hi = SELFTEST_NULL_BAND
        ok = lo <= acc <= hi
        return ok, acc, "chance-level as expected" if ok else f"null data scored {acc:.3f}, outside [{lo}, {hi}]"
    ok = acc >= SELFTEST_MIN_ACCURACY
    return ok, acc, "learned the planted signature" if ok else f"accuracy below {SELFTEST_MIN_ACCURACY}"


def cmd_selftest(args) -> int:
    start = time.perf_counter()
    ok, acc, msg = run_selftest(seed=args.seed, null=args.null, workdir=args.out)
    elapsed = time.perf_counter() - start
    print(f"{'PASS' if ok else 'FAIL'} accuracy={acc:.4f} ({msg}; {elapsed:.1f}s)")
    return 0 if ok else 2


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "preprocess": cmd_preprocess,
    "fit-csp": cmd_fit_csp,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def _dispatch(args) -> int:
    log.info("resolved config: %s", json.dumps({k: str(v) for k, v in sorted(vars(args).items())}))
    return HANDLERS[args.command](args)


def _configure_logging(level_name: str) -> None:
    level_name = os.environ.get("DARNET_LOG", level_name).upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise UsageError(f"unknown log level {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _configure_logging(args.log_level)
        return _dispatch(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"darnet: error: {exc}\n")
        return 1
    except Exception as exc:
        log.debug("traceback", exc_info=True)
        sys.stderr.write(f"darnet: {args.command} failed: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
