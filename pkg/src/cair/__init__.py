"""Multi-scale color-attention network for photographic filter removal.

A self-contained numpy engine: NCHW tensors with reverse-mode
differentiation, activation-free residual blocks, the color-attention
restoration network, desk-scale training, test-time ensembling, and a
synthetic filter corpus for end-to-end verification.
"""

from cair.tensor import (
    ContractViolation,
    GradCheckReport,
    NonFiniteError,
    ParamStore,
    Tape,
    Tensor,
    backward,
    grad_check,
)

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "GradCheckReport",
    "NonFiniteError",
    "ParamStore",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]
