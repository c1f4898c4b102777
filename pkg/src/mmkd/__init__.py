"""Multimodal-to-multimodal knowledge distillation robust to missing modalities.

A CPU-scale library and CLI: seeded synthetic multimodal datasets, a
from-scratch reverse-mode autodiff substrate, transformer fusion with learned
substitution tokens for absent modalities, parameter-free contiguous token
reduction, a two-stage teacher/student distillation pipeline, and the
evaluation protocols (modality-subset tables, inference dropout sweeps,
resource accounting) that exercise missing-modality robustness.
"""

__version__ = "0.1.0"
