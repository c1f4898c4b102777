"""Evaluation protocols: subset tables, inference dropout sweeps, accounting.

All protocols run inference only and are reproducible bit for bit given a
model checkpoint and an evaluation seed. Sweep dropout draws come from the
"eval" stream addressed by (probability index, sample index), so the same
retained sets are applied to every model being compared.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import FusionConfig
from .model import MultimodalClassifier, accuracy, batched_predictions
from .rng import RngStream
from .synthdata import MultimodalSequence
from .training import modality_dropout

SUBSET_COLUMNS = ["model_id", "subset", "n_samples", "head_accs", "action_acc"]
SWEEP_COLUMNS = ["model_id", "probability", "n_samples", "head_accs", "action_acc"]


@dataclass(frozen=True)
class EvalRow:
    model_id: str
    subset: tuple[int, ...] | None  # None for sweep rows
    probability: float | None  # None for subset rows
    n_samples: int
    head_accs: tuple[float, ...]
    action_acc: float

    def __post_init__(self):
        if self.subset is not None and len(self.subset) == 0:
            raise ValueError("subset rows must name a nonempty modality set")
        if any(not 0.0 <= a <= 1.0 for a in (*self.head_accs, self.action_acc)):
            raise ValueError("accuracies must lie in [0, 1]")


def all_nonempty_subsets(num_modalities: int) -> list[tuple[int, ...]]:
    """The 2^M - 1 nonempty modality subsets, largest first."""
    subsets = []
    for mask in range(1, 2 ** num_modalities):
        subsets.append(tuple(m for m in range(num_modalities) if mask >> m & 1))
    subsets.sort(key=lambda s: (-len(s), s))
    return subsets


def evaluate_subsets(
    model: MultimodalClassifier,
    samples: list[MultimodalSequence],
    subsets: list[tuple[int, ...]],
    model_id: str = "model",
    batch_size: int = 256,
) -> list[EvalRow]:
    """Accuracy with availability forced to each subset.

    A sample is evaluated on `subset & availability`; when that intersection
    is empty the forward still runs with every modality slot substituted by
    the embedding layer's absent branch.
    """
    rows = []
    for subset in subsets:
        if not subset:
            raise ValueError("requested subset must be nonempty")
        forced = [frozenset(subset)] * len(samples)
        pred, truth = batched_predictions(model, samples, batch_size, present_sets=forced)
        head_accs, action = accuracy(pred, truth)
        rows.append(EvalRow(model_id, tuple(subset), None, len(samples), head_accs, action))
    return rows


def sweep_retained_sets(
    samples: list[MultimodalSequence],
    probability: float,
    prob_index: int,
    eval_seed: int,
) -> list[frozenset[int]]:
    """Model-independent retained sets for one sweep probability."""
    stream = RngStream(eval_seed, "eval", (prob_index,))
    return [
        modality_dropout(s.availability, probability, stream.child(i).generator())
        if probability > 0.0 else s.availability
        for i, s in enumerate(samples)
    ]


def dropout_sweep(
    model: MultimodalClassifier,
    samples: list[MultimodalSequence],
    probabilities: list[float],
    eval_seed: int,
    model_id: str = "model",
    batch_size: int = 256,
) -> list[EvalRow]:
    """Accuracy as inference-time sensor dropout probability increases."""
    rows = []
    for j, p in enumerate(probabilities):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"sweep probability {p} outside [0, 1)")
        retained = sweep_retained_sets(samples, p, j, eval_seed)
        pred, truth = batched_predictions(model, samples, batch_size, present_sets=retained)
        head_accs, action = accuracy(pred, truth)
        rows.append(EvalRow(model_id, None, p, len(samples), head_accs, action))
    return rows


def summarize_dropout_ablation(
    reports_by_rate: dict[float, list[EvalRow]],
) -> list[dict]:
    """Per training-dropout-rate summary over a shared subset grid.

    For each rate: mean action accuracy over subsets, mean relative accuracy
    drop versus that model's full-modality row, and mean rank across subsets
    (rank 1 is best; ties share the mean of their ranks).
    """
    if len(reports_by_rate) < 1:
        raise ValueError("at least one training rate is required")
    rates = sorted(reports_by_rate)
    subset_keys = [row.subset for row in reports_by_rate[rates[0]]]
    if any([row.subset for row in reports_by_rate[r]] != subset_keys for r in rates):
        raise ValueError("all rates must be evaluated on the same subset grid")
    full_subset = max(subset_keys, key=len)

    acc = {r: {row.subset: row.action_acc for row in reports_by_rate[r]} for r in rates}
    summaries = []
    for r in rates:
        full_acc = acc[r][full_subset]
        drops = [
            (full_acc - acc[r][s]) / full_acc if full_acc > 0 else 0.0
            for s in subset_keys
        ]
        ranks = []
        for s in subset_keys:
            scores = sorted((acc[q][s] for q in rates), reverse=True)
            mine = acc[r][s]
            # mean rank over the positions this exact score occupies
            positions = [i + 1 for i, v in enumerate(scores) if v == mine]
            ranks.append(sum(positions) / len(positions))
        summaries.append({
            "train_dropout_rate": r,
            "average_accuracy": float(np.mean([acc[r][s] for s in subset_keys])),
            "average_relative_drop": float(np.mean(drops)),
            "average_rank": float(np.mean(ranks)),
        })
    return summaries


# ---------------------------------------------------------------------------
# resource accounting


def fb_sequence_length(token_counts: list[int], theta: int) -> int:
    return 1 + sum(min(k, theta) for k in token_counts)


def count_fb_flops(config: FusionConfig, token_counts: list[int], theta: int) -> float:
    """Analytic fusion-block FLOP estimate for one sample.

    With n = 1 + sum_m min(k_m, theta) tokens and embed dim e, each layer
    costs roughly 4*n*e^2 + 2*n^2*e for attention (QKV/output projections
    plus the two score/value products) and 8*n*e^2 for the 4x MLP.
    """
    n = fb_sequence_length(token_counts, theta)
    e = config.embed_dim
    attn = 4.0 * n * e * e + 2.0 * n * n * e
    mlp = 2.0 * config.mlp_ratio * n * e * e
    return config.layers * (attn + mlp)


def memory_proxy(config: FusionConfig, token_counts: list[int], theta: int,
                 param_count: int | None = None) -> dict:
    """Hardware-independent memory stand-ins.

    Activation elements per sample per layer: 4*n*e for QKV plus the merged
    context, 2*mlp_ratio*n*e for the MLP hidden and its activation, and
    2*heads*n^2 for attention scores and weights; summed over layers.
    """
    n = fb_sequence_length(token_counts, theta)
    e = config.embed_dim
    per_layer = 4 * n * e + 2 * config.mlp_ratio * n * e + 2 * config.heads * n * n
    out = {"activation_elements": config.layers * per_layer, "sequence_length": n}
    if param_count is not None:
        out["param_count"] = param_count
    return out


def model_param_count(model: MultimodalClassifier) -> int:
    return sum(p.data.size for p in model.parameters().values())


# ---------------------------------------------------------------------------
# report files


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def subset_label(subset: tuple[int, ...]) -> str:
    return "+".join(str(m) for m in subset)


def write_subset_report(path, rows: list[EvalRow], num_heads: int) -> None:
    """CSV columns: model_id, subset, n_samples, acc_head_0.., action_acc."""
    _write_rows(path, rows, num_heads, subset_mode=True)


def write_sweep_report(path, rows: list[EvalRow], num_heads: int) -> None:
    """CSV columns: model_id, probability, n_samples, acc_head_0.., action_acc."""
    _write_rows(path, rows, num_heads, subset_mode=False)


def _write_rows(path, rows, num_heads, subset_mode: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = "subset" if subset_mode else "probability"
    header = ["model_id", key, "n_samples"]
    header += [f"acc_head_{h}" for h in range(num_heads)]
    header += ["action_acc"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            tag = subset_label(row.subset) if subset_mode else _format(row.probability)
            record = [row.model_id, tag, row.n_samples]
            record += [_format(a) for a in row.head_accs]
            record.append(_format(row.action_acc))
            writer.writerow(record)


def write_summary(path, summary: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def read_subset_report(path) -> list[EvalRow]:
    return _read_rows(path, subset_mode=True)


def read_sweep_report(path) -> list[EvalRow]:
    return _read_rows(path, subset_mode=False)


def _read_rows(path, subset_mode: bool) -> list[EvalRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        for record in csv.DictReader(fh):
            heads = tuple(
                float(v) for k, v in record.items() if k.startswith("acc_head_")
            )
            if subset_mode:
                subset = tuple(int(m) for m in record["subset"].split("+"))
                probability = None
            else:
                subset = None
                probability = float(record["probability"])
            rows.append(EvalRow(
                model_id=record["model_id"],
                subset=subset,
                probability=probability,
                n_samples=int(record["n_samples"]),
                head_accs=heads,
                action_acc=float(record["action_acc"]),
            ))
    return rows
