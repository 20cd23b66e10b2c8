"""Experiment pipeline: generate -> train -> evaluate -> analyze -> saliency -> report.

Every stage derives its RNG stream from (master seed, stage name), writes its
artifacts under the run directory, and records a manifest listing them. All
numeric output uses 9 significant digits so files are byte-stable across
reruns with the same seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    AnalysisConfig,
    ExperimentConfig,
    config_hash,
    config_from_dict,
    load_config,
)
from .errors import InvalidInputError, MissingArtifactError, PpgageError
from .experiments import decile_mae, stage_seed
from .net.checkpoint import load_checkpoint, save_checkpoint
from .net.saliency import saliency as compute_saliency
from .net.train import train as train_model
from .net.train import predict
from .survival import (
    GapStratum,
    SerialGroup,
    SurvivalRecord,
    agreement_metrics,
    cox_fit,
    hr_curve,
    km_estimate,
    log_rank,
    serial_groups,
    stratify_gap,
)
from .synthetic import (
    CohortSpec,
    load_dataset,
    records_to_arrays,
    sample_cohort,
    save_dataset,
    split_dataset,
    synth_waveform,
)

log = logging.getLogger("ppgage")

SPLIT_NAMES = ("train", "selection", "holdout")


def fmt(value: float) -> str:
    """Canonical 9-significant-digit rendering for all numeric output."""
    return f"{value:.9g}"


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n"
            )


def _write_manifest(out: Path, stage: str, config: ExperimentConfig, artifacts: dict, t0: float) -> None:
    manifest = {
        "stage": stage,
        "config_hash": config_hash(config),
        "tool_version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    for path in artifacts.values():
        if not Path(path).exists():
            raise MissingArtifactError(f"stage {stage} did not produce {path}")
    with open(out / f"manifest_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} is missing; run `ppgage {hint}` first")
    return path


def _split_assignment(config: ExperimentConfig, records):
    parts = split_dataset(records, seed=stage_seed(config.seed, "split"))
    assignment = {}
    for name, part in zip(SPLIT_NAMES, parts):
        for record in part:
            assignment[record.subject_id] = name
    return parts, assignment


# ---------------------------------------------------------------- stages


def run_generate(config: ExperimentConfig) -> Path:
    t0 = time.time()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dataclasses.replace(config.cohort, seed=stage_seed(config.seed, "generate"))
    records = sample_cohort(spec)
    dataset = out / "dataset.jsonl"
    save_dataset(dataset, records)
    log.info("generated %d records for %d subjects", len(records), spec.n_subjects)
    _write_manifest(out, "generate", config, {"dataset": dataset}, t0)
    return dataset


def run_train(config: ExperimentConfig, resume: bool = False) -> Path:
    t0 = time.time()
    out = Path(config.out_dir)
    dataset = _require(out / "dataset.jsonl", "generate")
    records = load_dataset(dataset)
    train_recs, sel_recs, _ = split_dataset(records, seed=stage_seed(config.seed, "split"))
    train_x, train_y = records_to_arrays(train_recs)
    sel_x, sel_y = records_to_arrays(sel_recs)

    checkpoint = out / "checkpoint.ppgage"
    start_state = None
    if resume:
        start_state = load_checkpoint(_require(checkpoint, "train"))
    state = train_model(
        train_x,
        train_y,
        sel_x,
        sel_y,
        config.net,
        config.train,
        seed=stage_seed(config.seed, "train"),
        start_state=start_state,
    )
    save_checkpoint(checkpoint, state)
    metrics = out / "metrics_train.csv"
    write_csv(
        metrics,
        ["epoch", "train_total", "train_sample_mae", "train_dist_mae", "selection_mae"],
        [
            [row.epoch, row.train_total, row.train_sample_mae, row.train_dist_mae, row.selection_mae]
            for row in state.log
        ],
    )
    log.info("trained %d epochs; best selection MAE %.3f", state.next_epoch, state.best_selection_mae)
    _write_manifest(out, "train", config, {"checkpoint": checkpoint, "metrics_train": metrics}, t0)
    return checkpoint


def run_evaluate(config: ExperimentConfig) -> Path:
    t0 = time.time()
    out = Path(config.out_dir)
    records = load_dataset(_require(out / "dataset.jsonl", "generate"))
    state = load_checkpoint(_require(out / "checkpoint.ppgage", "train"))
    _, assignment = _split_assignment(config, records)

    x, _ = records_to_arrays(records)
    preds = predict(state.best_params, x)
    predictions = out / "predictions.csv"
    rows = []
    for record, pred in zip(records, preds):
        rows.append(
            [
                record.subject_id,
                record.visit_index,
                assignment[record.subject_id],
                float(record.calendar_age),
                float(pred),
                float(pred - record.calendar_age),
            ]
        )
    write_csv(
        predictions,
        ["subject_id", "visit", "split", "calendar_age", "predicted_age", "gap"],
        rows,
    )

    metric_rows = []
    for name in SPLIT_NAMES:
        mask = [r["split"] == name for r in _prediction_dicts(rows)]
        split_preds = preds[np.asarray(mask)]
        split_ages = np.asarray([row[3] for row, m in zip(rows, mask) if m])
        pearson, mae = agreement_metrics(split_preds, split_ages)
        metric_rows.append([name, int(mask.count(True)), float(pearson), float(mae)])
        if name == "holdout":
            deciles = decile_mae(split_preds, split_ages)
    metrics = out / "metrics_eval.csv"
    write_csv(metrics, ["split", "n", "pearson_r", "mae_years"], metric_rows)
    deciles_path = out / "decile_mae.csv"
    write_csv(
        deciles_path,
        ["decile", "mae_years"],
        [[d + 1, float(v)] for d, v in enumerate(deciles)],
    )
    _write_manifest(
        out,
        "evaluate",
        config,
        {"predictions": predictions, "metrics_eval": metrics, "decile_mae": deciles_path},
        t0,
    )
    return predictions


def _prediction_dicts(rows):
    return [{"split": row[2]} for row in rows]


def _load_predictions(path: Path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            rows.append(
                {
                    "subject_id": int(parts[0]),
                    "visit": int(parts[1]),
                    "split": parts[2],
                    "calendar_age": float(parts[3]),
                    "predicted_age": float(parts[4]),
                    "gap": float(parts[5]),
                }
            )
    return rows


def _resolve_threshold(mode: str, gaps: np.ndarray) -> float:
    if mode == "sd":
        return float(np.std(gaps))
    return float(mode)


def run_analyze(config: ExperimentConfig) -> dict[str, Path]:
    t0 = time.time()
    out = Path(config.out_dir)
    records = load_dataset(_require(out / "dataset.jsonl", "generate"))
    pred_rows = _load_predictions(_require(out / "predictions.csv", "evaluate"))

    gap_by_visit: dict[tuple[int, int], float] = {
        (r["subject_id"], r["visit"]): r["gap"] for r in pred_rows
    }
    split_by_subject = {r["subject_id"]: r["split"] for r in pred_rows}

    def keep(subject_id: int) -> bool:
        if config.analysis.split == "all":
            return True
        if config.analysis.split == "holdout":
            return split_by_subject[subject_id] == "holdout"
        return split_by_subject[subject_id] != "train"

    first_visits = [
        r for r in records if r.visit_index == 0 and keep(r.subject_id)
    ]
    gaps = np.asarray([gap_by_visit[(r.subject_id, 0)] for r in first_visits])
    survivors = [
        SurvivalRecord(
            time=max(r.event_time, 1e-9),
            event=r.event_flag,
            covariates={
                "gap": gap,
                "age": r.calendar_age,
                "sex": r.covariates.get("sex", 0.0),
                "bmi": r.covariates.get("bmi", 0.0),
                "smoking": r.covariates.get("smoking", 0.0),
            },
        )
        for r, gap in zip(first_visits, gaps)
    ]
    adjust = list(config.analysis.adjust)
    threshold = _resolve_threshold(config.analysis.threshold_mode, gaps)
    artifacts: dict[str, Path] = {}

    # Continuous per-year HR plus the three-way stratification table.
    hr_rows = []
    fit = cox_fit(survivors, ["gap"] + adjust)
    hr_rows.append(
        ["event", "gap_per_year", float(fit.hazard_ratios[0]), float(fit.ci95[0, 0]), float(fit.ci95[0, 1]), float(fit.p_values[0])]
    )
    strata = stratify_gap(gaps, threshold)
    strata_records = []
    for record, stratum in zip(survivors, strata):
        cov = dict(record.covariates)
        cov["under"] = float(stratum is GapStratum.UNDERESTIMATION)
        cov["over"] = float(stratum is GapStratum.OVERESTIMATION)
        strata_records.append(SurvivalRecord(record.time, record.event, cov))
    counts = {s: strata.count(s) for s in GapStratum}
    if counts[GapStratum.UNDERESTIMATION] and counts[GapStratum.OVERESTIMATION]:
        strata_fit = cox_fit(strata_records, ["under", "over"] + adjust)
        hr_rows.append(
            ["event", "underestimation", float(strata_fit.hazard_ratios[0]), float(strata_fit.ci95[0, 0]), float(strata_fit.ci95[0, 1]), float(strata_fit.p_values[0])]
        )
        hr_rows.append(["event", "correct_reference", 1.0, 1.0, 1.0, 1.0])
        hr_rows.append(
            ["event", "overestimation", float(strata_fit.hazard_ratios[1]), float(strata_fit.ci95[1, 0]), float(strata_fit.ci95[1, 1]), float(strata_fit.p_values[1])]
        )
    else:
        log.warning(
            "degenerate strata (counts %s); stratified HRs skipped",
            {k.value: v for k, v in counts.items()},
        )
    hr_table = out / "hr_table.csv"
    write_csv(hr_table, ["outcome", "variable", "hr", "ci_low", "ci_high", "p_value"], hr_rows)
    artifacts["hr_table"] = hr_table

    # KM curve per stratum plus log-rank tests against the correct group.
    by_stratum = {s: [] for s in GapStratum}
    for record, stratum in zip(survivors, strata):
        by_stratum[stratum].append(record)
    logrank_rows = []
    for stratum in GapStratum:
        members = by_stratum[stratum]
        if not members:
            log.warning("stratum %s empty; KM curve skipped", stratum.value)
            continue
        curve = km_estimate(members)
        low, high = curve.confidence_band()
        km_path = out / f"km_{stratum.value}.csv"
        write_csv(
            km_path,
            ["time", "survival", "ci_low", "ci_high", "at_risk"],
            [
                [float(t), float(s), float(lo), float(hi), int(n)]
                for t, s, lo, hi, n in zip(curve.times, curve.survival, low, high, curve.at_risk)
            ],
        )
        artifacts[f"km_{stratum.value}"] = km_path
        if stratum is not GapStratum.CORRECT and by_stratum[GapStratum.CORRECT]:
            try:
                stat, p = log_rank(members, by_stratum[GapStratum.CORRECT])
                logrank_rows.append([f"{stratum.value}_vs_correct", float(stat), float(p)])
            except PpgageError as err:
                log.warning("log-rank %s skipped: %s", stratum.value, err)
    logrank_path = out / "logrank.csv"
    write_csv(logrank_path, ["comparison", "statistic", "p_value"], logrank_rows)
    artifacts["logrank"] = logrank_path

    # Continuous spline hazard curve.
    lo, hi, count = config.analysis.gap_grid
    curve = hr_curve(
        survivors,
        gaps,
        np.linspace(lo, hi, int(count)),
        n_knots=config.analysis.n_knots,
        adjust=tuple(adjust),
    )
    spline_path = out / "spline_hr.csv"
    write_csv(
        spline_path,
        ["gap", "hr", "ci_low", "ci_high"],
        [
            [float(g), float(h), float(lo_), float(hi_)]
            for g, h, lo_, hi_ in zip(curve.gaps, curve.hazard_ratio, curve.ci_low, curve.ci_high)
        ],
    )
    artifacts["spline_hr"] = spline_path

    # Serial two-visit groups (G4 is the reference).
    serial_subjects = sorted(
        {r.subject_id for r in records if r.visit_index == 1 and keep(r.subject_id)}
    )
    serial_rows = []
    if serial_subjects:
        first = np.asarray([gap_by_visit[(s, 0)] for s in serial_subjects])
        second = np.asarray([gap_by_visit[(s, 1)] for s in serial_subjects])
        groups, excluded = serial_groups(first, second, threshold)
        record_by_subject = {
            r.subject_id: r for r in records if r.visit_index == 0
        }
        serial_survivors = []
        for sid, group in zip(serial_subjects, groups):
            if group is None:
                continue
            base = record_by_subject[sid]
            cov = {
                "g1": float(group is SerialGroup.G1),
                "g2": float(group is SerialGroup.G2),
                "g3": float(group is SerialGroup.G3),
                "age": base.calendar_age,
                "sex": base.covariates.get("sex", 0.0),
                "bmi": base.covariates.get("bmi", 0.0),
            }
            serial_survivors.append(
                SurvivalRecord(max(base.event_time, 1e-9), base.event_flag, cov)
            )
        group_counts = {g: sum(1 for x in groups if x is g) for g in SerialGroup}
        nonref = [g for g in (SerialGroup.G1, SerialGroup.G2, SerialGroup.G3) if group_counts[g]]
        if nonref and group_counts[SerialGroup.G4]:
            names = [g.value.lower() for g in nonref] + adjust
            try:
                serial_fit = cox_fit(serial_survivors, names)
                for g in nonref:
                    i = names.index(g.value.lower())
                    serial_rows.append(
                        [g.value, group_counts[g], float(serial_fit.hazard_ratios[i]), float(serial_fit.ci95[i, 0]), float(serial_fit.ci95[i, 1]), float(serial_fit.p_values[i])]
                    )
            except PpgageError as err:
                log.warning("serial-group fit skipped: %s", err)
        serial_rows.append(["G4_reference", group_counts[SerialGroup.G4], 1.0, 1.0, 1.0, 1.0])
        if excluded:
            log.warning("excluded %d serial subjects with missing pairs", excluded)
    serial_path = out / "serial_hr.csv"
    write_csv(serial_path, ["group", "n", "hr", "ci_low", "ci_high", "p_value"], serial_rows)
    artifacts["serial_hr"] = serial_path

    threshold_path = out / "threshold.csv"
    write_csv(
        threshold_path,
        ["mode", "threshold_years", "n_under", "n_correct", "n_over"],
        [
            [
                config.analysis.threshold_mode,
                threshold,
                counts[GapStratum.UNDERESTIMATION],
                counts[GapStratum.CORRECT],
                counts[GapStratum.OVERESTIMATION],
            ]
        ],
    )
    artifacts["threshold"] = threshold_path
    _write_manifest(out, "analyze", config, artifacts, t0)
    return artifacts


def run_saliency(config: ExperimentConfig) -> dict[str, Path]:
    t0 = time.time()
    out = Path(config.out_dir)
    state = load_checkpoint(_require(out / "checkpoint.ppgage", "train"))
    morphology = dataclasses.replace(
        config.cohort.morphology, noise_sigma=0.0, drift_amplitude=0.0
    )
    rng = np.random.default_rng(0)  # unused: noise and drift are disabled
    artifacts = {}
    for age in config.analysis.probe_ages:
        waveform = synth_waveform(age, morphology, rng)
        smap = compute_saliency(state.best_params, waveform)
        sys_pos, dia_pos = morphology.peak_sample_positions(age)
        path = out / f"saliency_age{int(age)}.csv"
        write_csv(
            path,
            ["sample", "waveform", "saliency"],
            [[i, float(w), float(s)] for i, (w, s) in enumerate(zip(waveform, smap))],
        )
        log.info(
            "age %.0f: saliency argmax %d (generator peaks %.1f / %.1f)",
            age,
            int(np.argmax(smap)),
            sys_pos,
            dia_pos,
        )
        artifacts[f"saliency_age{int(age)}"] = path
    _write_manifest(out, "saliency", config, artifacts, t0)
    return artifacts


REPORT_SECTIONS = [
    ("dataset", "dataset.jsonl"),
    ("checkpoint", "checkpoint.ppgage"),
    ("metrics_train", "metrics_train.csv"),
    ("predictions", "predictions.csv"),
    ("metrics_eval", "metrics_eval.csv"),
    ("decile_mae", "decile_mae.csv"),
    ("hr_table", "hr_table.csv"),
    ("logrank", "logrank.csv"),
    ("spline_hr", "spline_hr.csv"),
    ("serial_hr", "serial_hr.csv"),
    ("threshold", "threshold.csv"),
]


def run_report(config: ExperimentConfig) -> Path:
    t0 = time.time()
    out = Path(config.out_dir)
    lines = [
        "ppgage run report",
        f"tool_version: {__version__}",
        f"config_hash: {config_hash(config)}",
        f"seed: {config.seed}",
        "",
        "[artifacts]",
    ]
    missing = []
    for name, rel in REPORT_SECTIONS:
        path = out / rel
        if path.exists():
            lines.append(f"{name}: {rel} ({path.stat().st_size} bytes)")
        else:
            missing.append(name)
            lines.append(f"{name}: MISSING {rel}")
    lines.append("")
    lines.append("[missing]")
    lines.append(",".join(missing) if missing else "none")

    for name, rel in REPORT_SECTIONS:
        path = out / rel
        if rel.endswith(".csv") and path.exists():
            lines.append("")
            lines.append(f"[{name}]")
            lines.extend(path.read_text(encoding="utf-8").strip().splitlines())

    report = out / "report.txt"
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if missing:
        log.warning("report lists missing artifacts: %s", ", ".join(missing))
    _write_manifest(out, "report", config, {"report": report}, t0)
    return report


# ---------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgage",
        description="Distribution-aware vascular-age pipeline on synthetic PPG cohorts",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "sample the synthetic cohort and write dataset.jsonl"),
        ("train", "train the regressor; writes checkpoint and per-epoch metrics"),
        ("evaluate", "predict ages for every record and write agreement metrics"),
        ("analyze", "fit the survival/statistics tables from the predictions"),
        ("saliency", "write saliency maps for the configured probe ages"),
        ("report", "aggregate artifacts into a single text report"),
        ("all", "run every stage in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=str, default=None, help="output directory override")
        p.add_argument(
            "--loss", choices=["dist", "mae"], default=None, help="training loss override"
        )
        p.add_argument(
            "--threshold",
            choices=["9", "15", "sd"],
            default=None,
            help="stratification threshold preset",
        )
        if name in ("train", "all"):
            p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    if args.loss is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, loss=args.loss)
        )
    if args.threshold is not None:
        config = dataclasses.replace(
            config, analysis=dataclasses.replace(config.analysis, threshold_mode=args.threshold)
        )
    return config


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PPGAGE_LOG", "INFO").upper(),
        format="[%(levelname)s] %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "generate":
            run_generate(config)
        elif args.command == "train":
            run_train(config, resume=args.resume)
        elif args.command == "evaluate":
            run_evaluate(config)
        elif args.command == "analyze":
            run_analyze(config)
        elif args.command == "saliency":
            run_saliency(config)
        elif args.command == "report":
            run_report(config)
        elif args.command == "all":
            run_generate(config)
            run_train(config, resume=args.resume)
            run_evaluate(config)
            run_analyze(config)
            run_saliency(config)
            run_report(config)
    except PpgageError as err:
        print(f"PPGAGE_ERROR code={err.code} message={err}", file=sys.stderr)
        return err.exit_code
    except Exception as err:  # noqa: BLE001 - surface unexpected failures uniformly
        print(f"PPGAGE_ERROR code=INTERNAL message={err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
