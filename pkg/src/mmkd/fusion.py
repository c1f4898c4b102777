"""Transformer fusion block with learned substitution tokens for absent modalities.

The embedding layer projects each modality's (reduced) tokens to a shared
dimension and adds two kinds of learned tokens: one per-modality token shared
by all of that modality's positions, and one token per position. When a
modality is absent its slot is filled by the learned tokens alone, so the
tensor entering the transformer stack has the same shape for every
availability pattern. A learnable CLS token is prepended, the stack runs l
pre-norm layers, and the block emits M+1 tokens: the CLS output plus the mean
of each modality's output positions. Classification uses a shared affine +
smooth-nonlinearity layer followed by independent per-head classifiers, with the M+1 per-head
logit vectors averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, concat, silu, mean, reshape, slice_axis
from .layers import Linear, TransformerLayer, attention_dropout_mask, token_param, uniform_param


@dataclass(frozen=True)
class FusionConfig:
    embed_dim: int = 768
    layers: int = 2
    heads: int = 8
    attn_dropout: float = 0.3
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.embed_dim < 1 or self.layers < 0 or self.heads < 1:
            raise ValueError("fusion config sizes must be positive (layers may be 0)")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attn_dropout must be in [0, 1)")

    @classmethod
    def teacher_default(cls) -> "FusionConfig":
        return cls(embed_dim=768, layers=2, heads=8, attn_dropout=0.3)

    @classmethod
    def student_default(cls) -> "FusionConfig":
        return cls(embed_dim=384, layers=1, heads=8, attn_dropout=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


class ModalityEmbedding:
    """Projection plus the learned tokens of one modality slot."""

    def __init__(self, rng: np.random.Generator, input_dim: int, token_count: int,
                 embed_dim: int, missing_strategy: bool):
        self.token_count = token_count
        self.missing_strategy = missing_strategy
        # bias-free projection keeps an absent (zeroed) stream at exactly zero
        self.projection = uniform_param(rng, input_dim, (input_dim, embed_dim))
        if missing_strategy:
            self.modality_token = token_param(rng, (embed_dim,))
            self.token_tokens = token_param(rng, (token_count, embed_dim))
        else:
            self.modality_token = None
            self.token_tokens = None

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.projection": self.projection}
        if self.missing_strategy:
            out[f"{prefix}.modality_token"] = self.modality_token
            out[f"{prefix}.token_tokens"] = self.token_tokens
        return out


def embed_modality(projected: Tensor | None, embedding: ModalityEmbedding) -> Tensor:
    """Embedding-layer output for one modality slot.

    `projected` is the already-projected (token_count, embed_dim) matrix, or
    None when the modality is absent. Present tokens get both learned tokens
    added; an absent slot is the learned tokens alone, so the output shape is
    identical either way.
    """
    k = embedding.token_count
    if projected is not None:
        projected = projected if isinstance(projected, Tensor) else Tensor(projected)
        if projected.shape[-2] != k:
            raise ValueError(f"expected {k} tokens, got {projected.shape[-2]}")
        if not embedding.missing_strategy:
            return projected
        return projected + embedding.modality_token + embedding.token_tokens
    if not embedding.missing_strategy:
        return Tensor(np.zeros((k, embedding.projection.shape[1])))
    return embedding.modality_token + embedding.token_tokens


class HeadParams:
    """Shared layer plus independent per-head classifiers."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, head_classes: tuple[int, ...],
                 hidden: int | None = None):
        hidden = hidden or embed_dim
        self.shared = Linear(rng, embed_dim, hidden)
        self.heads = [Linear(rng, hidden, c) for c in head_classes]
        self.head_classes = tuple(head_classes)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = self.shared.tensors(f"{prefix}.shared")
        for h, lin in enumerate(self.heads):
            out.update(lin.tensors(f"{prefix}.head{h}"))
        return out


class FusionParams:
    """All trainable state of the fusion block for a fixed modality layout."""

    def __init__(self, rng: np.random.Generator, config: FusionConfig,
                 input_dims: list[int], token_counts: list[int],
                 head_classes: tuple[int, ...], missing_strategy: bool = True):
        config.validate()
        self.config = config
        self.token_counts = list(token_counts)
        self.missing_strategy = missing_strategy
        self.embeddings = [
            ModalityEmbedding(rng, d, k, config.embed_dim, missing_strategy)
            for d, k in zip(input_dims, token_counts)
        ]
        self.cls_token = token_param(rng, (config.embed_dim,))
        self.layers = [
            TransformerLayer(rng, config.embed_dim, config.heads, config.mlp_ratio)
            for _ in range(config.layers)
        ]
        self.head_params = HeadParams(rng, config.embed_dim, head_classes)

    @property
    def num_modalities(self) -> int:
        return len(self.embeddings)

    @property
    def sequence_length(self) -> int:
        return 1 + sum(self.token_counts)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"fb.cls_token": self.cls_token}
        for m, emb in enumerate(self.embeddings):
            out.update(emb.tensors(f"fb.embed{m}"))
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"fb.layer{i}"))
        out.update(self.head_params.tensors("fb.mhmlp"))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag


def fuse(embedded: list[Tensor], params: FusionParams,
         train: bool = False, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Run the transformer stack; returns (batch, M+1, embed_dim) tokens.

    `embedded` holds one (batch, k_m, embed_dim) stream per modality, already
    passed through the embedding layer (absent slots substituted). Output
    token order is [CLS, modality 0, ..., modality M-1], each modality token
    being the mean of its output positions.
    """
    e = params.config.embed_dim
    if len(embedded) != params.num_modalities:
        raise ValueError(f"expected {params.num_modalities} streams, got {len(embedded)}")
    streams = []
    for m, t in enumerate(embedded):
        t = t if isinstance(t, Tensor) else Tensor(t)
        if t.ndim == 2:
            t = reshape(t, (1, *t.shape))
        if t.shape[1:] != (params.token_counts[m], e):
            raise ValueError(
                f"modality {m} stream has shape {t.shape}, expected "
                f"(*, {params.token_counts[m]}, {e})"
            )
        streams.append(t)
    batch = streams[0].shape[0]

    cls = reshape(params.cls_token, (1, 1, e)) + Tensor(np.zeros((batch, 1, e)))
    x = concat([cls] + streams, axis=1)

    n = params.sequence_length
    for layer in params.layers:
        mask = None
        if train and params.config.attn_dropout > 0.0:
            if dropout_rng is None:
                raise ValueError("training with attention dropout requires a dropout rng")
            mask = attention_dropout_mask(
                dropout_rng, params.config.attn_dropout, batch, params.config.heads, n
            )
        x = layer(x, dropout_mask=mask)

    outputs = [slice_axis(x, 1, 0, 1)]
    start = 1
    for k in params.token_counts:
        outputs.append(mean(slice_axis(x, 1, start, start + k), axis=1, keepdims=True))
        start += k
    return concat(outputs, axis=1)


def predict(tokens: Tensor, head_params: HeadParams) -> list[Tensor]:
    """Per-head logits averaged over the M+1 fusion output tokens.

    `tokens` is (M+1, e) or (batch, M+1, e); returns one (batch, classes)
    logit tensor per head. The predicted class is the argmax (softmax is
    monotone, so it is applied only where probabilities are needed).
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1, *tokens.shape))
    hidden = silu(head_params.shared(tokens))
    logits = []
    for lin in head_params.heads:
        per_token = lin(hidden)
        avg = mean(per_token, axis=1)
        logits.append(reshape(avg, avg.shape[1:]) if squeeze else avg)
    return logits
