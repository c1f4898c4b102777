"""Toy per-modality feature extractors.

Each encoder is a shared-weight per-token MLP followed by one residual
self-attention layer over the token sequence, then a projection to the
output token dimension. The token count is preserved. Teacher encoders are
pretrained on a unimodal proxy task (classifying the head that modality is
most informative for) and then frozen; student encoders stay trainable and
are updated by the distillation stage.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from .autodiff import Tensor, cross_entropy, silu, layer_norm, mean, multi_head_attention
from .layers import Linear, make_attention, ones_param, zeros_param
from .optim import AdamW, clip_grad_norm
from .rng import RngStream
from .synthdata import MultimodalSequence

# "data" stream path namespace for pretraining; dataset generation owns 0..3
_PRETRAIN_PATH = 20


@dataclass(frozen=True)
class EncoderSpec:
    modality_id: int
    input_dim: int
    width: int
    depth: int
    token_count: int
    token_dim: int
    heads: int = 4
    trainable: bool = True

    def validate(self) -> None:
        if min(self.width, self.depth, self.token_count, self.token_dim, self.input_dim) < 1:
            raise ValueError(f"encoder spec for modality {self.modality_id} has non-positive sizes")
        if self.width % self.heads != 0:
            raise ValueError(f"encoder width {self.width} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)


class TokenEncoder:
    """Maps a raw (k, input_dim) stream to (k, token_dim) tokens."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.trainable = spec.trainable
        self.mlp: list[Linear] = []
        fan_in = spec.input_dim
        for _ in range(spec.depth):
            self.mlp.append(Linear(rng, fan_in, spec.width))
            fan_in = spec.width
        self.ln_g = ones_param(spec.width)
        self.ln_b = zeros_param(spec.width)
        self.attn = make_attention(rng, spec.width)
        self.out = Linear(rng, spec.width, spec.token_dim)
        self._set_requires_grad(self.trainable)

    def parameters(self) -> dict[str, Tensor]:
        prefix = f"enc{self.spec.modality_id}"
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.mlp):
            out.update(layer.tensors(f"{prefix}.mlp{i}"))
        out[f"{prefix}.ln_g"] = self.ln_g
        out[f"{prefix}.ln_b"] = self.ln_b
        for name, t in self.attn.tensors().items():
            out[f"{prefix}.attn.{name}"] = t
        out.update(self.out.tensors(f"{prefix}.out"))
        return out

    def _set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag

    def freeze(self) -> None:
        self.trainable = False
        self.spec = replace(self.spec, trainable=False)
        self._set_requires_grad(False)

    def __call__(self, stream) -> Tensor:
        return encode(self, stream)


def encode(encoder: TokenEncoder, stream) -> Tensor:
    """Encode a (k, d) or (batch, k, d) raw stream into output tokens."""
    x = stream if isinstance(stream, Tensor) else Tensor(stream)
    spec = encoder.spec
    if x.shape[-2:] != (spec.token_count, spec.input_dim):
        raise ValueError(
            f"stream shape {x.shape} does not match modality {spec.modality_id} "
            f"expectation (*, {spec.token_count}, {spec.input_dim})"
        )
    for layer in encoder.mlp:
        x = silu(layer(x))
    x = x + multi_head_attention(
        layer_norm(x, encoder.ln_g, encoder.ln_b), encoder.attn, spec.heads
    )
    return encoder.out(x)


def proxy_head_for(informativeness: tuple[float, ...]) -> int:
    """Primary proxy target: the head this modality is most informative for."""
    return int(np.argmax(informativeness))


def pretrain_encoder(
    spec: EncoderSpec,
    train_view: list[MultimodalSequence],
    val_view: list[MultimodalSequence],
    head_classes: tuple[int, ...],
    head_weights: tuple[float, ...],
    epochs: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 2e-3,
    clip: float = 1.0,
) -> tuple[TokenEncoder, dict]:
    """Train an encoder plus linear probes on a unimodal classification proxy.

    The proxy objective is cross-entropy over every label head, weighted by
    `head_weights` (normally this modality's informativeness); training on
    the dominant head alone was found to discard the features other heads
    need once the encoder is frozen. Returns the encoder with its trainable
    flag cleared and metadata with per-head probe accuracies on the
    validation view; `probe_accuracy` reports the primary (highest-weight)
    head. The dataset views must be restricted to samples that contain this
    modality.
    """
    if not spec.trainable:
        raise ValueError("pretrain_encoder requires a trainable spec")
    if len(head_classes) != len(head_weights):
        raise ValueError("one weight per label head is required")
    train_view = [s for s in train_view if spec.modality_id in s.availability]
    val_view = [s for s in val_view if spec.modality_id in s.availability]
    if not train_view:
        raise ValueError(f"no training samples contain modality {spec.modality_id}")

    m = spec.modality_id
    primary = int(np.argmax(head_weights))
    weights = np.asarray(head_weights, dtype=np.float64)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full_like(weights, 1.0 / weights.size)

    init_rng = RngStream(seed, "init", (_PRETRAIN_PATH, m)).generator()
    encoder = TokenEncoder(spec, init_rng)
    probes = [Linear(init_rng, spec.token_dim, c) for c in head_classes]
    params = dict(encoder.parameters())
    for h, probe in enumerate(probes):
        params.update(probe.tensors(f"probe{h}"))
    opt = AdamW(params, weight_decay=0.0)

    x_all = np.stack([s.streams[m] for s in train_view])
    y_all = np.asarray([s.label for s in train_view], dtype=np.int64)
    order_stream = RngStream(seed, "data", (_PRETRAIN_PATH, m))
    for epoch in range(epochs):
        order = order_stream.child(epoch).generator().permutation(len(train_view))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            pooled = mean(encode(encoder, x_all[idx]), axis=1)
            loss = None
            for h, probe in enumerate(probes):
                term = cross_entropy(probe(pooled), y_all[idx][:, h]) * float(weights[h])
                loss = term if loss is None else loss + term
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, clip)
            opt.step(lr)

    accuracies = _probe_accuracies(encoder, probes, val_view or train_view, m, batch_size)
    encoder.freeze()
    meta = {
        "modality_id": m,
        "proxy_head": primary,
        "epochs": epochs,
        "probe_accuracy": accuracies[primary],
        "probe_accuracies": accuracies,
        "probe_chance": 1.0 / head_classes[primary],
    }
    return encoder, meta


def _probe_accuracies(encoder, probes, samples, modality, batch_size) -> list[float]:
    correct = np.zeros(len(probes), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        pooled = mean(encode(encoder, np.stack([s.streams[modality] for s in chunk])), axis=1)
        truth = np.asarray([s.label for s in chunk])
        for h, probe in enumerate(probes):
            correct[h] += int((probe(pooled).data.argmax(axis=1) == truth[:, h]).sum())
    return [float(c) / len(samples) for c in correct]
