"""Seeded synthetic multimodal classification datasets.

Each sample carries a token stream per available modality and a multi-head
class label. The generator is built so that fusing modalities is genuinely
informative: every label head lives in its own latent subspace with
orthonormal per-class factor embeddings, each modality renders a weighted
view of those factors through fixed random per-token linear maps, and one
designated head has its factor split across two modalities so that neither
alone can recover it. Availability is sampled independently per modality
with rejection of the empty set, so every sample keeps at least one
modality; no alignment across samples is assumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import RngStream

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
_SPLIT_KEYS = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class ModalityConfig:
    """Shape and signal content of one modality's token stream."""

    modality_id: int
    token_count: int
    token_dim: int
    noise_sigma: float
    informativeness: tuple[float, ...]  # one weight in [0, 1] per label head

    def validate(self, num_heads: int) -> None:
        if self.token_count < 1 or self.token_dim < 1:
            raise ValueError(f"modality {self.modality_id}: token_count and token_dim must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"modality {self.modality_id}: noise_sigma must be nonnegative")
        if len(self.informativeness) != num_heads:
            raise ValueError(
                f"modality {self.modality_id}: informativeness length "
                f"{len(self.informativeness)} != head count {num_heads}"
            )
        if any(not 0.0 <= w <= 1.0 for w in self.informativeness):
            raise ValueError(f"modality {self.modality_id}: informativeness weights must be in [0, 1]")


@dataclass(frozen=True)
class MultimodalSequence:
    """One sample: per-modality token matrices, availability, multi-head label."""

    sample_id: int
    streams: dict[int, np.ndarray]  # modality_id -> (token_count, token_dim)
    availability: frozenset[int]
    label: tuple[int, ...]

    def __post_init__(self):
        if not self.availability:
            raise ValueError(f"sample {self.sample_id}: availability must be nonempty")
        if set(self.streams) != set(self.availability):
            raise ValueError(f"sample {self.sample_id}: stream keys must equal availability")


@dataclass(frozen=True)
class DatasetSpec:
    """Full description of a synthetic dataset; generation is pure in (spec, seed)."""

    head_classes: tuple[int, ...]
    modalities: tuple[ModalityConfig, ...]
    availability_missing_prob: tuple[float, ...]
    train_size: int
    val_size: int
    test_size: int
    seed: int
    # head whose class factor is split across two modalities, and the split
    # cardinalities (their product must equal that head's class count); each
    # carrier sees the other factor attenuated to `paired_leak` of its weight
    paired_head: int = 1
    paired_modalities: tuple[int, int] = (0, 1)
    paired_split: tuple[int, int] = (4, 2)
    paired_leak: float = 0.3
    latent_scale: float = 1.0
    positional_scale: float = 0.5

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def num_heads(self) -> int:
        return len(self.head_classes)

    def validate(self) -> None:
        if not self.head_classes or any(c < 1 for c in self.head_classes):
            raise ValueError("every label head needs at least one class")
        if min(self.train_size, self.val_size, self.test_size) < 0 or self.train_size == 0:
            raise ValueError("split sizes must be nonnegative and train_size positive")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if len(self.availability_missing_prob) != self.num_modalities:
            raise ValueError("one availability_missing_prob per modality is required")
        if any(not 0.0 <= p < 1.0 for p in self.availability_missing_prob):
            raise ValueError("availability_missing_prob entries must be in [0, 1)")
        for i, m in enumerate(self.modalities):
            if m.modality_id != i:
                raise ValueError("modality ids must be 0..M-1 in order")
            m.validate(self.num_heads)
        if not 0 <= self.paired_head < self.num_heads:
            raise ValueError("paired_head out of range")
        a, b = self.paired_split
        if a * b != self.head_classes[self.paired_head]:
            raise ValueError(
                f"paired_split {self.paired_split} does not factor head "
                f"{self.paired_head} with {self.head_classes[self.paired_head]} classes"
            )
        ma, mb = self.paired_modalities
        if ma == mb or not (0 <= ma < self.num_modalities and 0 <= mb < self.num_modalities):
            raise ValueError("paired_modalities must name two distinct modalities")
        if not 0.0 <= self.paired_leak < 1.0:
            raise ValueError("paired_leak must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        mods = tuple(
            ModalityConfig(
                modality_id=int(m["modality_id"]),
                token_count=int(m["token_count"]),
                token_dim=int(m["token_dim"]),
                noise_sigma=float(m["noise_sigma"]),
                informativeness=tuple(float(w) for w in m["informativeness"]),
            )
            for m in d["modalities"]
        )
        return cls(
            head_classes=tuple(int(c) for c in d["head_classes"]),
            modalities=mods,
            availability_missing_prob=tuple(float(p) for p in d["availability_missing_prob"]),
            train_size=int(d["train_size"]),
            val_size=int(d["val_size"]),
            test_size=int(d["test_size"]),
            seed=int(d["seed"]),
            paired_head=int(d.get("paired_head", 1)),
            paired_modalities=tuple(int(m) for m in d.get("paired_modalities", (0, 1))),
            paired_split=tuple(int(s) for s in d.get("paired_split", (4, 2))),
            paired_leak=float(d.get("paired_leak", 0.3)),
            latent_scale=float(d.get("latent_scale", 1.0)),
            positional_scale=float(d.get("positional_scale", 0.5)),
        )


def default_spec(seed: int = 0) -> DatasetSpec:
    """Desk-scale default: 3 modalities, two label heads (12 x 8 classes).

    Modality 0 is the dominant, always-present stream, modality 2 the
    weakest. The second head factors as 4 x 2 with the two factors carried
    mainly by modalities 0 and 1 respectively (the off factor is attenuated
    to the leak weight), so recovering it well requires fusing both.
    """
    return DatasetSpec(
        head_classes=(12, 8),
        modalities=(
            ModalityConfig(0, token_count=48, token_dim=24, noise_sigma=0.55,
                           informativeness=(1.0, 0.9)),
            ModalityConfig(1, token_count=32, token_dim=24, noise_sigma=0.60,
                           informativeness=(0.8, 0.9)),
            ModalityConfig(2, token_count=16, token_dim=12, noise_sigma=0.60,
                           informativeness=(0.7, 0.6)),
        ),
        availability_missing_prob=(0.0, 0.25, 0.30),
        train_size=4000,
        val_size=500,
        test_size=1000,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# generation


class _Renderer:
    """Fixed generative parameters derived deterministically from the spec."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        rng = RngStream(spec.seed, "data", (0,)).generator()

        # orthonormal class-factor embeddings per head; the paired head gets
        # two orthonormal sub-blocks, one per pairing factor
        self.head_blocks: list[np.ndarray] = []
        self.block_dims: list[int] = []
        for h, classes in enumerate(spec.head_classes):
            if h == spec.paired_head:
                a_card, b_card = spec.paired_split
                ea = _orthonormal_rows(rng, a_card)
                eb = _orthonormal_rows(rng, b_card)
                emb = np.zeros((classes, a_card + b_card))
                for c in range(classes):
                    emb[c, :a_card] = ea[c // b_card]
                    emb[c, a_card:] = eb[c % b_card]
                self.head_blocks.append(emb * spec.latent_scale)
                self.block_dims.append(a_card + b_card)
            else:
                self.head_blocks.append(_orthonormal_rows(rng, classes) * spec.latent_scale)
                self.block_dims.append(classes)
        self.latent_dim = sum(self.block_dims)
        self.block_offsets = np.concatenate(([0], np.cumsum(self.block_dims)))

        # per-modality rendering: random per-token linear maps plus
        # token-index positional offsets
        self.token_maps: list[np.ndarray] = []
        self.positional: list[np.ndarray] = []
        for m in spec.modalities:
            w = rng.normal(0.0, 1.0 / np.sqrt(self.latent_dim),
                           size=(m.token_count, m.token_dim, self.latent_dim))
            self.token_maps.append(w)
            self.positional.append(rng.normal(0.0, spec.positional_scale,
                                              size=(m.token_count, m.token_dim)))

    def latent(self, labels: np.ndarray, modality: int) -> np.ndarray:
        """Modality-specific latent vectors for a batch of labels (n, heads)."""
        spec = self.spec
        cfg = spec.modalities[modality]
        n = labels.shape[0]
        s = np.zeros((n, self.latent_dim))
        a_card, _ = spec.paired_split
        for h in range(spec.num_heads):
            lo, hi = self.block_offsets[h], self.block_offsets[h + 1]
            block = self.head_blocks[h][labels[:, h]] * cfg.informativeness[h]
            if h == spec.paired_head:
                ma, mb = spec.paired_modalities
                if modality == ma:
                    block = block.copy()
                    block[:, a_card:] *= spec.paired_leak
                elif modality == mb:
                    block = block.copy()
                    block[:, :a_card] *= spec.paired_leak
            s[:, lo:hi] = block
        return s

    def render(self, labels: np.ndarray, modality: int, rng: np.random.Generator) -> np.ndarray:
        """Token streams (n, k, d) for a batch of labels."""
        cfg = self.spec.modalities[modality]
        s = self.latent(labels, modality)
        tokens = np.einsum("kdl,nl->nkd", self.token_maps[modality], s)
        tokens += self.positional[modality][None, :, :]
        if cfg.noise_sigma > 0:
            tokens += rng.normal(0.0, cfg.noise_sigma, size=tokens.shape)
        return tokens


def _orthonormal_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))[None, :]


def _sample_availability(rng: np.random.Generator, n: int,
                         missing_prob: np.ndarray) -> np.ndarray:
    """(n, M) availability mask; empty rows are redrawn until nonempty."""
    avail = rng.random((n, missing_prob.size)) >= missing_prob[None, :]
    empty = ~avail.any(axis=1)
    while empty.any():
        avail[empty] = rng.random((int(empty.sum()), missing_prob.size)) >= missing_prob[None, :]
        empty = ~avail.any(axis=1)
    return avail


def _generate_split(spec: DatasetSpec, renderer: _Renderer, split: str,
                    size: int) -> list[MultimodalSequence]:
    rng = RngStream(spec.seed, "data", (_SPLIT_KEYS[split],)).generator()
    labels = np.column_stack(
        [rng.integers(0, c, size=size) for c in spec.head_classes]
    ).astype(np.int64)
    avail = _sample_availability(rng, size, np.asarray(spec.availability_missing_prob))
    streams = [renderer.render(labels, m, rng) for m in range(spec.num_modalities)]

    id_base = _SPLIT_KEYS[split] * 10_000_000
    samples = []
    for i in range(size):
        present = frozenset(int(m) for m in np.flatnonzero(avail[i]))
        samples.append(MultimodalSequence(
            sample_id=id_base + i,
            streams={m: streams[m][i] for m in present},
            availability=present,
            label=tuple(int(c) for c in labels[i]),
        ))
    return samples


def generate_dataset(spec: DatasetSpec) -> dict[str, list[MultimodalSequence]]:
    """Generate {train, val, test} sample lists, deterministic in (spec, seed)."""
    spec.validate()
    renderer = _Renderer(spec)
    sizes = {"train": spec.train_size, "val": spec.val_size, "test": spec.test_size}
    return {split: _generate_split(spec, renderer, split, sizes[split]) for split in SPLITS}


# ---------------------------------------------------------------------------
# statistics and probes


def dataset_stats(samples: list[MultimodalSequence]) -> dict:
    """Per-modality availability rates and per-head class histograms."""
    if not samples:
        raise ValueError("dataset_stats requires a nonempty dataset")
    modalities = sorted({m for s in samples for m in s.availability})
    num_heads = len(samples[0].label)
    rates = {
        m: sum(1 for s in samples if m in s.availability) / len(samples)
        for m in modalities
    }
    histograms = []
    for h in range(num_heads):
        counts: dict[int, int] = {}
        for s in samples:
            counts[s.label[h]] = counts.get(s.label[h], 0) + 1
        histograms.append(counts)
    return {"availability_rates": rates, "class_histograms": histograms, "size": len(samples)}


def pooled_features(samples: list[MultimodalSequence], modalities: list[int]) -> np.ndarray:
    """Mean-pooled token features per sample, concatenated over `modalities`.

    Only call with samples that contain every requested modality.
    """
    feats = []
    for s in samples:
        parts = [s.streams[m].mean(axis=0) for m in modalities]
        feats.append(np.concatenate(parts))
    return np.asarray(feats)


def probe_accuracy(
    train_samples: list[MultimodalSequence],
    eval_samples: list[MultimodalSequence],
    modalities: list[int],
    head: int,
    ridge: float = 1.0,
) -> float:
    """Accuracy of a closed-form ridge probe on pooled features.

    Fits one-hot ridge regression on the training samples (restricted to
    those containing all requested modalities) and scores argmax accuracy on
    the eval samples. Deterministic; no iterative optimization.
    """
    tr = [s for s in train_samples if set(modalities) <= s.availability]
    ev = [s for s in eval_samples if set(modalities) <= s.availability]
    if not tr or not ev:
        raise ValueError("no samples contain the requested modalities")
    x = pooled_features(tr, modalities)
    x = np.hstack([x, np.ones((x.shape[0], 1))])
    classes = max(s.label[head] for s in tr + ev) + 1
    y = np.zeros((x.shape[0], classes))
    y[np.arange(x.shape[0]), [s.label[head] for s in tr]] = 1.0
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)

    xe = pooled_features(ev, modalities)
    xe = np.hstack([xe, np.ones((xe.shape[0], 1))])
    pred = (xe @ w).argmax(axis=1)
    truth = np.asarray([s.label[head] for s in ev])
    return float((pred == truth).mean())


# ---------------------------------------------------------------------------
# serialization


def save_split(path, samples: list[MultimodalSequence], spec: DatasetSpec, split: str) -> None:
    """Write one split as a self-describing npz container (lossless round trip)."""
    n = len(samples)
    num_heads = spec.num_heads
    labels = np.zeros((n, num_heads), dtype=np.int64)
    avail = np.zeros((n, spec.num_modalities), dtype=bool)
    ids = np.zeros(n, dtype=np.int64)
    streams = {
        m.modality_id: np.zeros((n, m.token_count, m.token_dim)) for m in spec.modalities
    }
    for i, s in enumerate(samples):
        labels[i] = s.label
        ids[i] = s.sample_id
        for m in s.availability:
            avail[i, m] = True
            streams[m][i] = s.streams[m]
    header = json.dumps({
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset_split",
        "split": split,
        "spec": spec.to_dict(),
    })
    arrays = {f"stream_{m}": streams[m] for m in streams}
    np.savez(path, header=np.frombuffer(header.encode(), dtype=np.uint8),
             labels=labels, availability=avail, sample_ids=ids, **arrays)


def load_split(path) -> tuple[list[MultimodalSequence], DatasetSpec, str]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("kind") != "dataset_split":
            raise ValueError(f"{path} is not a dataset split container")
        if header["schema_version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema version {header['schema_version']}")
        spec = DatasetSpec.from_dict(header["spec"])
        labels = data["labels"]
        avail = data["availability"]
        ids = data["sample_ids"]
        streams = {m.modality_id: data[f"stream_{m.modality_id}"] for m in spec.modalities}
    samples = []
    for i in range(labels.shape[0]):
        present = frozenset(int(m) for m in np.flatnonzero(avail[i]))
        samples.append(MultimodalSequence(
            sample_id=int(ids[i]),
            streams={m: streams[m][i] for m in present},
            availability=present,
            label=tuple(int(c) for c in labels[i]),
        ))
    return samples, spec, header["split"]
