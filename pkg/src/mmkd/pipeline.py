"""Pipeline stages behind the CLI: each consumes and produces run artifacts.

Stages work on an output directory with this layout:

    out/
      config.yaml                  echoed resolved configuration
      dataset/{train,val,test}.npz seeded synthetic splits (+ stats.json)
      encoders/teacher.npz         pretrained frozen teacher encoders
      teacher/                     checkpoint.npz, metrics.csv, summary.json
      student/                     distilled student artifacts
      baseline_plain/              ladder baselines (same layout)
      baseline_enhanced/
      eval/                        subsets.csv, sweep.csv, report.json, figures/
      ablations/{alpha,theta,dropout}/

Every stage is a pure function of (config, upstream artifacts, seed), so
rerunning with the same inputs reproduces the same outputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import build_classifier, load_model, params_checksum, save_model
from .encoders import EncoderSpec, TokenEncoder, pretrain_encoder, proxy_head_for
from .evaluation import (
    EvalRow,
    all_nonempty_subsets,
    count_fb_flops,
    dropout_sweep,
    evaluate_subsets,
    memory_proxy,
    model_param_count,
    read_subset_report,
    read_sweep_report,
    subset_label,
    summarize_dropout_ablation,
    write_subset_report,
    write_summary,
    write_sweep_report,
)
from .model import MultimodalClassifier
from .layers import load_tensors
from .rng import RngStream
from .synthdata import DatasetSpec, dataset_stats, generate_dataset, load_split, save_split
from .training import (
    BASELINE_ENHANCED_ROLE,
    BASELINE_PLAIN_ROLE,
    STUDENT_ROLE,
    TEACHER_ROLE,
    TrainPlan,
    TrainResult,
    distill_student,
    metric_columns,
    train_student_variant,
    train_teacher,
)

MODEL_NAMES = ("teacher", "student", "baseline_enhanced", "baseline_plain")

VARIANTS = {
    # name -> (init role, missing_strategy, modality_dropout, distillation)
    "student": (STUDENT_ROLE, True, True, True),
    "baseline_enhanced": (BASELINE_ENHANCED_ROLE, True, True, False),
    "baseline_plain": (BASELINE_PLAIN_ROLE, False, False, False),
}


class MissingArtifactError(FileNotFoundError):
    """An upstream stage has not produced a required artifact yet."""


# ---------------------------------------------------------------------------
# in-memory building blocks (shared by file stages and the test batteries)


def pretrain_teacher_encoders(
    config: dict, spec: DatasetSpec, splits: dict, seed: int
) -> tuple[list[TokenEncoder], list[dict]]:
    pre = config["pretrain"]
    encoders, metas = [], []
    for m in range(spec.num_modalities):
        enc_spec = cfgmod.encoder_spec(config, "teacher", m, spec)
        encoder, meta = pretrain_encoder(
            enc_spec, splits["train"], splits["val"],
            spec.head_classes, spec.modalities[m].informativeness,
            epochs=int(pre["epochs"]), seed=seed,
            batch_size=int(pre["batch_size"]), lr=float(pre["lr"]),
        )
        encoders.append(encoder)
        metas.append(meta)
    return encoders, metas


def build_teacher(config: dict, spec: DatasetSpec,
                  encoders: list[TokenEncoder], seed: int) -> MultimodalClassifier:
    """Fresh teacher fusion block over already-pretrained frozen encoders."""
    fresh = build_classifier(
        [e.spec for e in encoders],
        cfgmod.fusion_config(config, "teacher"),
        int(config["reduction"]["theta"]),
        spec.head_classes,
        missing_strategy=True,
        init_stream=RngStream(seed, "init", (TEACHER_ROLE,)),
    )
    model = MultimodalClassifier(encoders, fresh.theta, fresh.fb)
    return model


def build_student_variant(config: dict, spec: DatasetSpec, seed: int,
                          variant: str) -> MultimodalClassifier:
    role, missing_strategy, _, _ = VARIANTS[variant]
    specs = [cfgmod.encoder_spec(config, "student", m, spec) for m in range(spec.num_modalities)]
    return build_classifier(
        specs,
        cfgmod.fusion_config(config, "student"),
        int(config["reduction"]["theta"]),
        spec.head_classes,
        missing_strategy=missing_strategy,
        init_stream=RngStream(seed, "init", (role,)),
    )


def run_teacher_pipeline(config: dict, splits: dict, spec: DatasetSpec, seed: int,
                         plan: TrainPlan | None = None
                         ) -> tuple[MultimodalClassifier, TrainResult, list[dict]]:
    encoders, metas = pretrain_teacher_encoders(config, spec, splits, seed)
    teacher = build_teacher(config, spec, encoders, seed)
    plan = plan or cfgmod.train_plan(config, "teacher", seed=seed)
    result = train_teacher(plan, splits["train"], splits["val"], teacher)
    return teacher, result, metas


def run_student_pipeline(config: dict, splits: dict, spec: DatasetSpec, seed: int,
                         variant: str, teacher: MultimodalClassifier | None = None,
                         plan: TrainPlan | None = None
                         ) -> tuple[MultimodalClassifier, TrainResult]:
    _, _, use_dropout, distill = VARIANTS[variant]
    student = build_student_variant(config, spec, seed, variant)
    if distill:
        if teacher is None:
            raise ValueError(f"variant {variant!r} requires a trained teacher")
        plan = plan or cfgmod.train_plan(config, "distill", seed=seed)
        result = distill_student(plan, splits["train"], splits["val"], teacher, student)
    else:
        plan = plan or cfgmod.train_plan(config, "distill", seed=seed, alpha=1.0)
        result = train_student_variant(
            plan, splits["train"], splits["val"], student,
            teacher=None, use_modality_dropout=use_dropout,
        )
    return student, result


# ---------------------------------------------------------------------------
# artifact helpers


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing upstream artifact: {what} ({path})")
    return path


def write_metrics_csv(path: Path, rows: list[dict], num_heads: int) -> None:
    cols = metric_columns(num_heads)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


def echo_config(config: dict, out: Path) -> None:
    cfgmod.dump_config(config, out / "config.yaml")


def load_dataset(out: Path) -> tuple[dict, DatasetSpec]:
    splits = {}
    spec = None
    for split in ("train", "val", "test"):
        path = _require(out / "dataset" / f"{split}.npz", f"dataset split {split!r} (run gen-data)")
        samples, spec, _ = load_split(path)
        splits[split] = samples
    return splits, spec


def _save_stage(out: Path, name: str, model: MultimodalClassifier,
                result: TrainResult, num_heads: int, extra: dict | None = None) -> None:
    stage_dir = out / name
    save_model(stage_dir / "checkpoint.npz", model, kind=name, extra_meta=extra or {})
    write_metrics_csv(stage_dir / "metrics.csv", result.metrics, num_heads)
    summary = dict(result.summary)
    summary["checkpoint_checksum"] = params_checksum(model.parameters())
    summary.update(extra or {})
    write_summary(stage_dir / "summary.json", summary)


# ---------------------------------------------------------------------------
# file-based stages


def stage_gen_data(config: dict, out: Path) -> None:
    echo_config(config, out)
    spec = cfgmod.dataset_spec(config)
    splits = generate_dataset(spec)
    (out / "dataset").mkdir(parents=True, exist_ok=True)
    for split, samples in splits.items():
        save_split(out / "dataset" / f"{split}.npz", samples, spec, split)
    stats = {split: _stats_json(samples) for split, samples in splits.items()}
    write_summary(out / "dataset" / "stats.json", stats)


def _stats_json(samples) -> dict:
    stats = dataset_stats(samples)
    return {
        "size": stats["size"],
        "availability_rates": {str(k): v for k, v in stats["availability_rates"].items()},
        "class_histograms": [
            {str(c): n for c, n in hist.items()} for hist in stats["class_histograms"]
        ],
    }


def stage_pretrain_encoders(config: dict, out: Path) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    seed = int(config["seed"])
    encoders, metas = pretrain_teacher_encoders(config, spec, splits, seed)
    params = {}
    for enc in encoders:
        params.update(enc.parameters())
    from .checkpoint import save_checkpoint

    save_checkpoint(
        out / "encoders" / "teacher.npz", "teacher_encoders",
        {"encoder_specs": [e.spec.to_dict() for e in encoders], "probes": metas},
        params,
    )
    write_summary(out / "encoders" / "summary.json", {"probes": metas})


def load_teacher_encoders(out: Path) -> tuple[list[TokenEncoder], list[dict]]:
    from .checkpoint import load_checkpoint

    path = _require(out / "encoders" / "teacher.npz",
                    "pretrained teacher encoders (run pretrain-encoders)")
    kind, meta, arrays = load_checkpoint(path)
    if kind != "teacher_encoders":
        raise MissingArtifactError(f"{path} is not a teacher encoder container")
    encoders = []
    params = {}
    for spec_dict in meta["encoder_specs"]:
        spec = EncoderSpec(**spec_dict)
        enc = TokenEncoder(spec, RngStream(0, "init").generator())
        encoders.append(enc)
        params.update(enc.parameters())
    load_tensors(params, arrays)
    return encoders, meta["probes"]


def stage_train_teacher(config: dict, out: Path) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    encoders, metas = load_teacher_encoders(out)
    seed = int(config["seed"])
    teacher = build_teacher(config, spec, encoders, seed)
    plan = cfgmod.train_plan(config, "teacher", seed=seed)
    result = train_teacher(plan, splits["train"], splits["val"], teacher)
    _save_stage(out, "teacher", teacher, result, spec.num_heads,
                extra={"encoder_probes": metas})


def load_trained_model(out: Path, name: str) -> MultimodalClassifier:
    path = _require(out / name / "checkpoint.npz", f"trained {name} (run its stage first)")
    model, _, _ = load_model(path)
    return model


def stage_distill_student(config: dict, out: Path, alpha: float | None = None,
                          tag: str = "student") -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    teacher = load_trained_model(out, "teacher")
    seed = int(config["seed"])
    plan = cfgmod.train_plan(config, "distill", seed=seed,
                             **({} if alpha is None else {"alpha": alpha}))
    student, result = run_student_pipeline(
        config, splits, spec, seed, "student", teacher=teacher, plan=plan,
    )
    teacher_sum_after = params_checksum(teacher.parameters())
    _save_stage(out, tag, student, result, spec.num_heads,
                extra={"alpha": plan.alpha, "teacher_checksum_after": teacher_sum_after})


def stage_train_baseline(config: dict, out: Path, variant: str) -> None:
    if variant not in ("plain", "enhanced"):
        raise ValueError(f"unknown baseline variant {variant!r}")
    echo_config(config, out)
    splits, spec = load_dataset(out)
    seed = int(config["seed"])
    name = f"baseline_{variant}"
    model, result = run_student_pipeline(config, splits, spec, seed, name)
    _save_stage(out, name, model, result, spec.num_heads)


def _available_models(out: Path) -> list[str]:
    return [n for n in MODEL_NAMES if (out / n / "checkpoint.npz").exists()]


def stage_evaluate(config: dict, out: Path) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    names = _available_models(out)
    if not names:
        raise MissingArtifactError("no trained model checkpoint found; train a model first")
    subsets = cfgmod.eval_subsets(config, spec.num_modalities)
    batch = int(config["evaluation"]["batch_size"])
    rows: list[EvalRow] = []
    for name in names:
        model = load_trained_model(out, name)
        rows.extend(evaluate_subsets(model, splits["test"], subsets, model_id=name,
                                     batch_size=batch))
    write_subset_report(out / "eval" / "subsets.csv", rows, spec.num_heads)
    summary = {
        "models": names,
        "subsets": [subset_label(s) for s in subsets],
        "full_subset_action_acc": {
            name: next(r.action_acc for r in rows
                       if r.model_id == name and len(r.subset) == spec.num_modalities)
            for name in names
        },
    }
    write_summary(out / "eval" / "summary.json", summary)


def stage_sweep(config: dict, out: Path) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    names = _available_models(out)
    if not names:
        raise MissingArtifactError("no trained model checkpoint found; train a model first")
    probabilities = [float(p) for p in config["evaluation"]["sweep_probabilities"]]
    batch = int(config["evaluation"]["batch_size"])
    rows: list[EvalRow] = []
    for name in names:
        model = load_trained_model(out, name)
        rows.extend(dropout_sweep(model, splits["test"], probabilities,
                                  cfgmod.eval_seed(config), model_id=name, batch_size=batch))
    write_sweep_report(out / "eval" / "sweep.csv", rows, spec.num_heads)
    from .plots import render_sweep_curves

    render_sweep_curves(rows, out / "eval" / "figures" / "sweep.png")


def stage_ablate_alpha(config: dict, out: Path, alphas: list[float]) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    teacher = load_trained_model(out, "teacher")
    seed = int(config["seed"])
    batch = int(config["evaluation"]["batch_size"])
    full = tuple(range(spec.num_modalities))
    records = []
    for alpha in alphas:
        plan = cfgmod.train_plan(config, "distill", seed=seed, alpha=float(alpha))
        student, result = run_student_pipeline(
            config, splits, spec, seed, "student", teacher=teacher, plan=plan)
        row = evaluate_subsets(student, splits["test"], [full],
                               model_id=f"alpha_{alpha}", batch_size=batch)[0]
        tag = f"alpha_{alpha}"
        _save_stage(out / "ablations" / "alpha", tag, student, result, spec.num_heads,
                    extra={"alpha": float(alpha)})
        records.append({"alpha": float(alpha), "test_action_acc": row.action_acc,
                        "test_head_accs": list(row.head_accs),
                        "final_val_action_acc": result.summary["final_val_action_acc"]})
    _write_ablation_csv(out / "ablations" / "alpha" / "summary.csv",
                        records, ["alpha", "test_action_acc", "final_val_action_acc"])
    write_summary(out / "ablations" / "alpha" / "summary.json", {"records": records})


def stage_ablate_theta(config: dict, out: Path, thetas: list[int]) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    encoders, _ = load_teacher_encoders(out)
    seed = int(config["seed"])
    batch = int(config["evaluation"]["batch_size"])
    full = tuple(range(spec.num_modalities))
    token_counts = [m.token_count for m in spec.modalities]
    records = []
    for theta in thetas:
        local = json.loads(json.dumps(config))
        local["reduction"]["theta"] = int(theta)
        teacher = build_teacher(local, spec, encoders, seed)
        plan = cfgmod.train_plan(local, "teacher", seed=seed)
        result = train_teacher(plan, splits["train"], splits["val"], teacher)
        row = evaluate_subsets(teacher, splits["test"], [full],
                               model_id=f"theta_{theta}", batch_size=batch)[0]
        fb_cfg = cfgmod.fusion_config(local, "teacher")
        records.append({
            "theta": int(theta),
            "tokens_per_modality": [min(k, int(theta)) for k in token_counts],
            "fb_flops": count_fb_flops(fb_cfg, token_counts, int(theta)),
            "memory_proxy": memory_proxy(fb_cfg, token_counts, int(theta),
                                         model_param_count(teacher)),
            "test_action_acc": row.action_acc,
            "final_val_action_acc": result.summary["final_val_action_acc"],
        })
    _write_ablation_csv(out / "ablations" / "theta" / "summary.csv", records,
                        ["theta", "fb_flops", "test_action_acc", "final_val_action_acc"])
    write_summary(out / "ablations" / "theta" / "summary.json", {"records": records})


def stage_ablate_dropout(config: dict, out: Path, rates: list[float]) -> None:
    echo_config(config, out)
    splits, spec = load_dataset(out)
    encoders, _ = load_teacher_encoders(out)
    seed = int(config["seed"])
    batch = int(config["evaluation"]["batch_size"])
    subsets = all_nonempty_subsets(spec.num_modalities)
    reports: dict[float, list[EvalRow]] = {}
    for rate in rates:
        teacher = build_teacher(config, spec, encoders, seed)
        plan = cfgmod.train_plan(config, "teacher", seed=seed, modality_dropout_p=float(rate))
        train_teacher(plan, splits["train"], splits["val"], teacher)
        reports[float(rate)] = evaluate_subsets(
            teacher, splits["test"], subsets, model_id=f"rate_{rate}", batch_size=batch)
    summaries = summarize_dropout_ablation(reports)
    _write_ablation_csv(out / "ablations" / "dropout" / "summary.csv", summaries,
                        ["train_dropout_rate", "average_accuracy",
                         "average_relative_drop", "average_rank"])
    write_summary(out / "ablations" / "dropout" / "summary.json", {"records": summaries})


def _write_ablation_csv(path: Path, records: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in records:
            writer.writerow([repr(rec[c]) if isinstance(rec[c], float) else rec[c]
                             for c in columns])


def stage_report(config: dict, out: Path) -> None:
    """Render figures and a consolidated JSON from existing eval CSVs."""
    echo_config(config, out)
    from .plots import render_ladder, render_subset_bars, render_sweep_curves

    figures = out / "eval" / "figures"
    report: dict = {"figures": []}
    subsets_path = out / "eval" / "subsets.csv"
    sweep_path = out / "eval" / "sweep.csv"
    if not subsets_path.exists() and not sweep_path.exists():
        raise MissingArtifactError("no eval CSVs found; run evaluate and/or sweep first")
    if subsets_path.exists():
        rows = read_subset_report(subsets_path)
        render_subset_bars(rows, figures / "subsets.png")
        report["figures"].append("figures/subsets.png")
        num_modalities = max(len(r.subset) for r in rows)
        full_rows = [r for r in rows if len(r.subset) == num_modalities]
        ladder = {r.model_id: r.action_acc for r in full_rows}
        if ladder:
            render_ladder(ladder, figures / "ladder.png")
            report["figures"].append("figures/ladder.png")
            report["full_subset_action_acc"] = ladder
    if sweep_path.exists():
        rows = read_sweep_report(sweep_path)
        render_sweep_curves(rows, figures / "sweep.png")
        report["figures"].append("figures/sweep.png")
        report["sweep_models"] = sorted({r.model_id for r in rows})
    write_summary(out / "eval" / "report.json", report)
