"""Attention-guided toy vision-language model with a from-scratch autodiff core."""

import os

# Pin BLAS threading before numpy loads so runs are bitwise reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del os, _var

from .model import ImageGrid, Model, ModelConfig, VisualTokens  # noqa: E402
from .tensor import AdamW, Parameter, Tensor, grad_check  # noqa: E402

__all__ = ["ImageGrid", "Model", "ModelConfig", "VisualTokens",
           "AdamW", "Parameter", "Tensor", "grad_check"]
