"""Versioned npz checkpoint containers shared by encoders and full models."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoders import EncoderSpec, TokenEncoder
from .fusion import FusionConfig, FusionParams
from .layers import load_tensors
from .model import MultimodalClassifier
from .reduction import reduced_token_count
from .rng import RngStream

CHECKPOINT_SCHEMA = 1


def save_checkpoint(path, kind: str, meta: dict, params: dict[str, Tensor]) -> None:
    header = json.dumps({"schema_version": CHECKPOINT_SCHEMA, "kind": kind, "meta": meta})
    arrays = {name: p.data for name, p in params.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header["schema_version"] != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {header['schema_version']}")
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    return header["kind"], header["meta"], arrays


def params_checksum(params: dict[str, Tensor]) -> str:
    """Stable digest over parameter names and exact bytes."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def build_classifier(
    encoder_specs: list[EncoderSpec],
    fusion_config: FusionConfig,
    theta: int,
    head_classes: tuple[int, ...],
    missing_strategy: bool,
    init_stream: RngStream,
) -> MultimodalClassifier:
    """Fresh classifier with deterministic initialization from `init_stream`."""
    encoders = [
        TokenEncoder(spec, init_stream.child(m).generator())
        for m, spec in enumerate(encoder_specs)
    ]
    fb = FusionParams(
        init_stream.child(100).generator(),
        fusion_config,
        input_dims=[s.token_dim for s in encoder_specs],
        token_counts=[reduced_token_count(s.token_count, theta) for s in encoder_specs],
        head_classes=head_classes,
        missing_strategy=missing_strategy,
    )
    return MultimodalClassifier(encoders, theta, fb)


def save_model(path, model: MultimodalClassifier, kind: str, extra_meta: dict | None = None) -> None:
    meta = {
        "encoder_specs": [e.spec.to_dict() for e in model.encoders],
        "fusion_config": model.fb.config.to_dict(),
        "theta": model.theta,
        "head_classes": list(model.head_classes),
        "missing_strategy": model.fb.missing_strategy,
        "extra": extra_meta or {},
    }
    save_checkpoint(path, kind, meta, model.parameters())


def load_model(path) -> tuple[MultimodalClassifier, str, dict]:
    kind, meta, arrays = load_checkpoint(path)
    specs = [EncoderSpec(**d) for d in meta["encoder_specs"]]
    model = build_classifier(
        specs,
        FusionConfig(**meta["fusion_config"]),
        int(meta["theta"]),
        tuple(meta["head_classes"]),
        bool(meta["missing_strategy"]),
        RngStream(0, "init"),
    )
    load_tensors(model.parameters(), arrays)
    return model, kind, meta["extra"]
