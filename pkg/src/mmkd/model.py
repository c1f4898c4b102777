"""End-to-end classifier: per-modality encoders, token reduction, fusion block.

Batch assembly keeps one fixed-shape slot per modality. Absent modalities are
encoded as exact zeros entering the (bias-free) embedding projection, which
reduces the embedding layer to the learned-token substitution branch for
those slots. Encoders only run on the rows where their modality is present.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, matmul, scatter_rows
from .encoders import TokenEncoder, encode
from .fusion import FusionParams, fuse, predict
from .reduction import reduced_token_count, theta_average
from .synthdata import MultimodalSequence


class MultimodalClassifier:
    """Encoders + theta reduction + fusion block for one model role."""

    def __init__(self, encoders: list[TokenEncoder], theta: int, fb: FusionParams):
        self.encoders = encoders
        self.theta = theta
        self.fb = fb
        expected = [reduced_token_count(e.spec.token_count, theta) for e in encoders]
        if expected != fb.token_counts:
            raise ValueError(
                f"fusion token counts {fb.token_counts} do not match reduced "
                f"encoder outputs {expected}"
            )

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    @property
    def head_classes(self) -> tuple[int, ...]:
        return self.fb.head_params.head_classes

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for enc in self.encoders:
            out.update(enc.parameters())
        out.update(self.fb.parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    # ------------------------------------------------------------------
    # forward paths

    def encode_present(self, streams: list[np.ndarray], present: np.ndarray) -> list[Tensor]:
        """Encode + reduce each modality on its present rows only.

        `streams` holds one (batch, k_raw, d_raw) array per modality and
        `present` is a (batch, M) bool mask; absent rows come back as zeros.
        """
        batch = present.shape[0]
        out = []
        for m, enc in enumerate(self.encoders):
            idx = np.flatnonzero(present[:, m])
            k_red = self.fb.token_counts[m]
            if idx.size == 0:
                out.append(Tensor(np.zeros((batch, k_red, enc.spec.token_dim))))
                continue
            tokens = theta_average(encode(enc, streams[m][idx]), self.theta)
            out.append(scatter_rows(tokens, idx, batch))
        return out

    def fused_tokens(self, encoded: list[Tensor], train: bool = False,
                     dropout_rng: np.random.Generator | None = None) -> Tensor:
        embedded = []
        for m, t in enumerate(encoded):
            proj = matmul(t, self.fb.embeddings[m].projection)
            if self.fb.missing_strategy:
                emb = self.fb.embeddings[m]
                proj = proj + emb.modality_token + emb.token_tokens
            embedded.append(proj)
        return fuse(embedded, self.fb, train=train, dropout_rng=dropout_rng)

    def logits_from_raw(self, streams: list[np.ndarray], present: np.ndarray,
                        train: bool = False,
                        dropout_rng: np.random.Generator | None = None) -> list[Tensor]:
        encoded = self.encode_present(streams, present)
        return predict(self.fused_tokens(encoded, train, dropout_rng), self.fb.head_params)

    def logits_from_cached(self, cached: list[np.ndarray], present: np.ndarray,
                           train: bool = False,
                           dropout_rng: np.random.Generator | None = None) -> list[Tensor]:
        """Forward from precomputed reduced encodings (frozen-encoder path)."""
        encoded = [
            Tensor(cached[m] * present[:, m, None, None]) for m in range(self.num_modalities)
        ]
        return predict(self.fused_tokens(encoded, train, dropout_rng), self.fb.head_params)

    def cache_encodings(self, samples: list[MultimodalSequence],
                        batch_size: int = 256) -> list[np.ndarray]:
        """Precompute reduced encoder outputs for every sample (zeros where absent)."""
        n = len(samples)
        cached = []
        for m, enc in enumerate(self.encoders):
            k_red = self.fb.token_counts[m]
            store = np.zeros((n, k_red, enc.spec.token_dim))
            idx = [i for i, s in enumerate(samples) if m in s.availability]
            for lo in range(0, len(idx), batch_size):
                chunk = idx[lo:lo + batch_size]
                raw = np.stack([samples[i].streams[m] for i in chunk])
                store[chunk] = theta_average(encode(enc, raw), self.theta).data
            cached.append(store)
        return cached


def collate(samples: list[MultimodalSequence], shapes: list[tuple[int, int]],
            present_sets: list[frozenset[int]] | None = None
            ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Assemble fixed-shape batch arrays from samples.

    `present_sets` optionally restricts each sample's modalities (it is
    intersected with the sample's availability); None keeps availability
    as stored. Returns (streams per modality, present mask, labels).
    """
    n = len(samples)
    num_modalities = len(shapes)
    streams = [np.zeros((n, k, d)) for k, d in shapes]
    present = np.zeros((n, num_modalities), dtype=bool)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    for i, s in enumerate(samples):
        keep = s.availability if present_sets is None else (s.availability & present_sets[i])
        for m in keep:
            present[i, m] = True
            streams[m][i] = s.streams[m]
    return streams, present, labels


def raw_shapes(encoders: list[TokenEncoder]) -> list[tuple[int, int]]:
    return [(e.spec.token_count, e.spec.input_dim) for e in encoders]


def predict_classes(logits: list[Tensor]) -> np.ndarray:
    """(batch, heads) argmax class indices from per-head logit tensors."""
    return np.column_stack([lg.data.argmax(axis=1) for lg in logits])


def batched_predictions(
    model: MultimodalClassifier,
    samples: list[MultimodalSequence],
    batch_size: int = 256,
    present_sets: list[frozenset[int]] | None = None,
    cached: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode class predictions and ground truth for a sample list.

    `present_sets` restricts availability per sample (intersection semantics);
    `cached` supplies precomputed reduced encodings aligned with `samples`.
    """
    shapes = raw_shapes(model.encoders)
    preds = []
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        sets = None if present_sets is None else present_sets[lo:lo + batch_size]
        if cached is not None:
            present = np.zeros((len(chunk), model.num_modalities), dtype=bool)
            for i, s in enumerate(chunk):
                keep = s.availability if sets is None else (s.availability & sets[i])
                for m in keep:
                    present[i, m] = True
            batch_cache = [c[lo:lo + batch_size] for c in cached]
            logits = model.logits_from_cached(batch_cache, present)
        else:
            streams, present, _ = collate(chunk, shapes, sets)
            logits = model.logits_from_raw(streams, present)
        preds.append(predict_classes(logits))
    return np.concatenate(preds, axis=0), labels


def accuracy(pred: np.ndarray, truth: np.ndarray) -> tuple[tuple[float, ...], float]:
    """Per-head accuracies and action accuracy (all heads correct)."""
    per_head = tuple(float((pred[:, h] == truth[:, h]).mean()) for h in range(truth.shape[1]))
    action = float((pred == truth).all(axis=1).mean())
    return per_head, action
