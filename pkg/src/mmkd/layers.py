"""Parameter containers and initializers shared by encoders and the fusion block.

Initialization conventions: projection weights are uniform scaled by fan-in,
biases start at zero, learned tokens are zero-mean Gaussian with std 0.02,
and layer norm starts as the identity.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    AttentionParams,
    Tensor,
    silu,
    layer_norm,
    matmul,
    multi_head_attention,
)


def uniform_param(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    scale = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def token_param(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear:
    """Affine map applied to the last axis."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.w = uniform_param(rng, fan_in, (fan_in, fan_out))
        self.b = zeros_param(fan_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        return out + self.b if self.b is not None else out

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


def make_attention(rng: np.random.Generator, dim: int) -> AttentionParams:
    return AttentionParams(
        wq=uniform_param(rng, dim, (dim, dim)),
        wk=uniform_param(rng, dim, (dim, dim)),
        wv=uniform_param(rng, dim, (dim, dim)),
        wo=uniform_param(rng, dim, (dim, dim)),
        bq=zeros_param(dim), bk=zeros_param(dim),
        bv=zeros_param(dim), bo=zeros_param(dim),
    )


class TransformerLayer:
    """Pre-norm encoder layer: attention and a 4x SiLU MLP, both residual."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 4):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.ln1_g = ones_param(dim)
        self.ln1_b = zeros_param(dim)
        self.attn = make_attention(rng, dim)
        self.ln2_g = ones_param(dim)
        self.ln2_b = zeros_param(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def __call__(self, x: Tensor, dropout_mask: np.ndarray | None = None) -> Tensor:
        x = x + multi_head_attention(
            layer_norm(x, self.ln1_g, self.ln1_b), self.attn, self.heads,
            dropout_mask=dropout_mask,
        )
        return x + self.fc2(silu(self.fc1(layer_norm(x, self.ln2_g, self.ln2_b))))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
            f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b,
        }
        for name, t in self.attn.tensors().items():
            out[f"{prefix}.attn.{name}"] = t
        out.update(self.fc1.tensors(f"{prefix}.fc1"))
        out.update(self.fc2.tensors(f"{prefix}.fc2"))
        return out


def attention_dropout_mask(
    rng: np.random.Generator, rate: float, batch: int, heads: int, n: int
) -> np.ndarray | None:
    """Inverted-scale multiplicative mask for post-softmax attention weights."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random((batch, heads, n, n)) < keep) / keep


def load_tensors(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter set (shapes must match)."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.copy()
