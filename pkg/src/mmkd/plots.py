"""Static figure rendering for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalRow, subset_label  # noqa: E402

_MODEL_ORDER = ("baseline_plain", "baseline_enhanced", "student", "teacher")
_LABELS = {
    "baseline_plain": "baseline",
    "baseline_enhanced": "baseline + dropout/tokens",
    "student": "distilled student",
    "teacher": "teacher",
}


def _ordered_models(models: set[str]) -> list[str]:
    known = [m for m in _MODEL_ORDER if m in models]
    return known + sorted(models - set(known))


def _save(fig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_sweep_curves(rows: list[EvalRow], path: Path) -> None:
    """Action accuracy against inference-time modality dropout probability."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for model in _ordered_models({r.model_id for r in rows}):
        pts = sorted((r.probability, r.action_acc) for r in rows if r.model_id == model)
        ax.plot([p for p, _ in pts], [a for _, a in pts], marker="o",
                label=_LABELS.get(model, model))
    ax.set_xlabel("inference modality dropout probability")
    ax.set_ylabel("action accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def render_subset_bars(rows: list[EvalRow], path: Path) -> None:
    """Grouped bars: action accuracy per modality subset per model."""
    subsets = sorted({r.subset for r in rows}, key=lambda s: (-len(s), s))
    models = _ordered_models({r.model_id for r in rows})
    acc = {(r.model_id, r.subset): r.action_acc for r in rows}
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(subsets) + 2, 4))
    for i, model in enumerate(models):
        xs = [j + i * width for j in range(len(subsets))]
        ax.bar(xs, [acc.get((model, s), 0.0) for s in subsets], width=width,
               label=_LABELS.get(model, model))
    ax.set_xticks([j + width * (len(models) - 1) / 2 for j in range(len(subsets))])
    ax.set_xticklabels([subset_label(s) for s in subsets])
    ax.set_xlabel("available modalities")
    ax.set_ylabel("action accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    _save(fig, path)


def render_ladder(full_subset_acc: dict[str, float], path: Path) -> None:
    """Full-availability accuracy of each trained model."""
    models = _ordered_models(set(full_subset_acc))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = range(len(models))
    ax.bar(xs, [full_subset_acc[m] for m in models], color="tab:blue")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([_LABELS.get(m, m) for m in models], rotation=20, ha="right")
    ax.set_ylabel("action accuracy (all modalities)")
    ax.set_ylim(0, 1)
    _save(fig, path)
