"""Run configuration: YAML schema, defaults, validation, dotted overrides.

One config file drives every pipeline stage. The desk-scale default keeps
the architectural relations from the full-size configuration (teacher twice
the student's embedding dim and encoder width, double the layers, attention
dropout only in the teacher) at sizes that train in CPU minutes.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .encoders import EncoderSpec
from .fusion import FusionConfig
from .synthdata import DatasetSpec, ModalityConfig
from .training import Schedule, TrainPlan

CONFIG_SCHEMA = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def default_config() -> dict:
    """Desk-scale defaults: minutes-scale CPU training per stage."""
    return {
        "schema_version": CONFIG_SCHEMA,
        "seed": 0,
        "dataset": {
            "head_classes": [12, 8],
            "modalities": [
                {"token_count": 48, "token_dim": 24, "noise_sigma": 0.55,
                 "informativeness": [1.0, 0.9]},
                {"token_count": 32, "token_dim": 24, "noise_sigma": 0.60,
                 "informativeness": [0.8, 0.9]},
                {"token_count": 16, "token_dim": 12, "noise_sigma": 0.60,
                 "informativeness": [0.7, 0.6]},
            ],
            "availability_missing_prob": [0.0, 0.25, 0.30],
            "train_size": 4000,
            "val_size": 500,
            "test_size": 1000,
            "paired_head": 1,
            "paired_modalities": [0, 1],
            "paired_split": [4, 2],
            "paired_leak": 0.3,
        },
        "encoders": {
            "teacher": {"width": 64, "depth": 2, "token_dim": 64, "heads": 4},
            "student": {"width": 32, "depth": 1, "token_dim": 32, "heads": 2},
        },
        "pretrain": {"epochs": 5, "batch_size": 64, "lr": 2e-3},
        "reduction": {"theta": 8},
        "fusion": {
            "teacher": {"embed_dim": 64, "layers": 2, "heads": 4, "attn_dropout": 0.15},
            "student": {"embed_dim": 32, "layers": 1, "heads": 4, "attn_dropout": 0.0},
        },
        "training": {
            "teacher": {
                "epochs": 12, "batch_size": 96, "modality_dropout_p": 0.5,
                "weight_decay": 0.05, "clip_norm": 1.0,
                "base_lr": 1e-5, "peak_lr": 3e-3, "warmup_epochs": 2,
            },
            "distill": {
                "epochs": 16, "batch_size": 96, "modality_dropout_p": 0.5,
                "alpha": 0.7, "weight_decay": 0.01, "clip_norm": 2.0,
                "base_lr": 1e-5, "peak_lr": 3e-3, "warmup_epochs": 2,
            },
        },
        "evaluation": {
            "subsets": "all",
            "sweep_probabilities": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            "eval_seed_offset": 1000,
            "batch_size": 256,
        },
    }


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply `--set dotted.path=value` overrides; values parse as YAML scalars."""
    config = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"override path {key!r} does not exist in the config")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist in the config")
        node[parts[-1]] = value
    return config


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict:
    """Load and validate a config; missing path means built-in defaults."""
    if path is None:
        config = default_config()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with path.open() as fh:
            config = yaml.safe_load(fh)
        if not isinstance(config, dict):
            raise ConfigError(f"config file {path} does not hold a mapping")
    config = apply_overrides(config, overrides or [])
    if seed is not None:
        config["seed"] = int(seed)
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    try:
        if config.get("schema_version") != CONFIG_SCHEMA:
            raise ConfigError(f"config schema_version must be {CONFIG_SCHEMA}")
        spec = dataset_spec(config)
        spec.validate()
        t_enc = config["encoders"]["teacher"]
        s_enc = config["encoders"]["student"]
        if t_enc["width"] < 2 * s_enc["width"]:
            raise ConfigError("teacher encoder width must be at least twice the student width")
        for role in ("teacher", "student"):
            fusion_config(config, role).validate()
            for m in range(spec.num_modalities):
                encoder_spec(config, role, m, spec).validate()
        if int(config["reduction"]["theta"]) < 1:
            raise ConfigError("reduction theta must be a positive integer")
        for stage in ("teacher", "distill"):
            train_plan(config, stage).validate()
        ev = config["evaluation"]
        if ev["subsets"] != "all":
            for subset in ev["subsets"]:
                if not subset or any(not 0 <= m < spec.num_modalities for m in subset):
                    raise ConfigError(f"evaluation subset {subset} is invalid")
        if any(not 0.0 <= p < 1.0 for p in ev["sweep_probabilities"]):
            raise ConfigError("sweep probabilities must lie in [0, 1)")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


# ---------------------------------------------------------------------------
# typed views


def dataset_spec(config: dict, seed: int | None = None) -> DatasetSpec:
    d = config["dataset"]
    mods = tuple(
        ModalityConfig(
            modality_id=i,
            token_count=int(m["token_count"]),
            token_dim=int(m["token_dim"]),
            noise_sigma=float(m["noise_sigma"]),
            informativeness=tuple(float(w) for w in m["informativeness"]),
        )
        for i, m in enumerate(d["modalities"])
    )
    return DatasetSpec(
        head_classes=tuple(int(c) for c in d["head_classes"]),
        modalities=mods,
        availability_missing_prob=tuple(float(p) for p in d["availability_missing_prob"]),
        train_size=int(d["train_size"]),
        val_size=int(d["val_size"]),
        test_size=int(d["test_size"]),
        seed=int(config["seed"] if seed is None else seed),
        paired_head=int(d.get("paired_head", 1)),
        paired_modalities=tuple(int(m) for m in d.get("paired_modalities", (0, 1))),
        paired_split=tuple(int(s) for s in d.get("paired_split", (4, 2))),
        paired_leak=float(d.get("paired_leak", 0.3)),
    )


def encoder_spec(config: dict, role: str, modality: int, spec: DatasetSpec) -> EncoderSpec:
    e = config["encoders"][role]
    mod = spec.modalities[modality]
    return EncoderSpec(
        modality_id=modality,
        input_dim=mod.token_dim,
        width=int(e["width"]),
        depth=int(e["depth"]),
        token_count=mod.token_count,
        token_dim=int(e["token_dim"]),
        heads=int(e.get("heads", 4)),
        trainable=True,
    )


def fusion_config(config: dict, role: str) -> FusionConfig:
    f = config["fusion"][role]
    return FusionConfig(
        embed_dim=int(f["embed_dim"]),
        layers=int(f["layers"]),
        heads=int(f["heads"]),
        attn_dropout=float(f["attn_dropout"]),
    )


def train_plan(config: dict, stage: str, seed: int | None = None, **overrides) -> TrainPlan:
    t = dict(config["training"]["teacher" if stage == "teacher" else "distill"])
    t.update(overrides)
    schedule = Schedule(
        base_lr=float(t["base_lr"]),
        peak_lr=float(t["peak_lr"]),
        warmup_epochs=float(t["warmup_epochs"]),
        total_epochs=float(t["epochs"]),
    )
    return TrainPlan(
        stage=stage,
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        modality_dropout_p=float(t["modality_dropout_p"]),
        alpha=float(t.get("alpha", 1.0)),
        weight_decay=float(t["weight_decay"]),
        clip_norm=float(t["clip_norm"]),
        schedule=schedule,
        seed=int(config["seed"] if seed is None else seed),
    )


def eval_subsets(config: dict, num_modalities: int) -> list[tuple[int, ...]]:
    from .evaluation import all_nonempty_subsets

    ev = config["evaluation"]
    if ev["subsets"] == "all":
        return all_nonempty_subsets(num_modalities)
    return [tuple(int(m) for m in subset) for subset in ev["subsets"]]


def eval_seed(config: dict) -> int:
    return int(config["seed"]) + int(config["evaluation"].get("eval_seed_offset", 1000))


def dump_config(config: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config, sort_keys=True))
