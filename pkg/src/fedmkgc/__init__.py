"""Federated multimodal knowledge graph completion with diffusion imputation and dual distillation."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
