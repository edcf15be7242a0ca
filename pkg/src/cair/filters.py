"""Synthetic color-filter corpus: parametric degradations with fixed presets.

Each filter is a deterministic pipeline over a [0,1] RGB image:
color matrix -> per-channel exponent -> saturation blend -> tone curve ->
radial falloff -> clamp.  Neutral stages short-circuit, so the identity
spec returns the input bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .tensor import ContractViolation

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
TONE_POINTS = 8
TONE_XS = np.linspace(0.0, 1.0, TONE_POINTS)


@dataclass
class FilterSpec:
    name: str
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: np.ndarray = field(default_factory=lambda: np.ones(3))
    saturation: float = 1.0
    vignette_strength: float = 0.0
    tone_curve: np.ndarray = field(default_factory=lambda: TONE_XS.copy())

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.tone_curve = np.asarray(self.tone_curve, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise ContractViolation(f"filter {self.name}: matrix must be 3x3")
        if self.offset.shape != (3,):
            raise ContractViolation(f"filter {self.name}: offset must be length 3")
        if self.gamma.shape != (3,) or np.any(self.gamma <= 0):
            raise ContractViolation(
                f"filter {self.name}: gamma must be 3 positive exponents"
            )
        if self.saturation < 0:
            raise ContractViolation(f"filter {self.name}: saturation must be >= 0")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise ContractViolation(
                f"filter {self.name}: vignette_strength outside [0,1]"
            )
        if self.tone_curve.shape != (TONE_POINTS,):
            raise ContractViolation(
                f"filter {self.name}: tone_curve needs {TONE_POINTS} points"
            )
        if np.any(np.diff(self.tone_curve) <= 0):
            raise ContractViolation(
                f"filter {self.name}: tone_curve must be strictly increasing"
            )
        if self.tone_curve[0] < 0 or self.tone_curve[-1] > 1:
            raise ContractViolation(
                f"filter {self.name}: tone_curve values outside [0,1]"
            )


def identity_filter(name: str = "identity") -> FilterSpec:
    return FilterSpec(name=name)


def vignette_field(h: int, w: int, strength: float) -> np.ndarray:
    """Multiplicative falloff 1 - strength*(d/d_corner)^2 from the center."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy = (np.arange(h) - cy)[:, None]
    xx = (np.arange(w) - cx)[None, :]
    d2 = yy * yy + xx * xx
    corner = cy * cy + cx * cx
    if corner == 0.0:
        return np.ones((h, w))
    return 1.0 - strength * (d2 / corner)


def apply_filter(img: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Run the degradation pipeline; maps [0,1] images into [0,1].

    Values are re-clamped to [0,1] right after the color matrix so the
    exponent stage never sees negatives.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractViolation(
            f"apply_filter: expected (3,H,W) image, got {img.shape}"
        )
    x = img.astype(np.float64)

    if not (np.array_equal(spec.matrix, np.eye(3))
            and np.array_equal(spec.offset, np.zeros(3))):
        x = np.einsum("dc,chw->dhw", spec.matrix, x) + spec.offset[:, None, None]
        x = np.clip(x, 0.0, 1.0)

    if not np.all(spec.gamma == 1.0):
        x = x ** spec.gamma[:, None, None]

    if spec.saturation != 1.0:
        luma = np.einsum("c,chw->hw", LUMA_WEIGHTS, x)[None]
        x = luma + spec.saturation * (x - luma)

    if not np.array_equal(spec.tone_curve, TONE_XS):
        x = np.interp(x, TONE_XS, spec.tone_curve)

    if spec.vignette_strength > 0.0:
        x = x * vignette_field(x.shape[1], x.shape[2], spec.vignette_strength)[None]

    return np.clip(x, 0.0, 1.0).astype(img.dtype)


def builtin_filters() -> List[FilterSpec]:
    """Fixed named presets; constants are part of the package contract."""
    sepia = np.array([[0.393, 0.769, 0.189],
                      [0.349, 0.686, 0.168],
                      [0.272, 0.534, 0.131]])
    return [
        FilterSpec(
            name="warm-fade",
            matrix=np.diag([1.08, 1.00, 0.88]),
            offset=[0.02, 0.01, -0.01],
            gamma=[0.95, 1.00, 1.05],
            saturation=0.85,
            tone_curve=[0.06, 0.18, 0.32, 0.46, 0.60, 0.74, 0.87, 0.98],
        ),
        FilterSpec(
            name="cool-crush",
            matrix=np.diag([0.90, 0.98, 1.10]),
            offset=[-0.02, 0.00, 0.03],
            gamma=[1.10, 1.00, 0.92],
            saturation=0.90,
            tone_curve=[0.00, 0.08, 0.22, 0.40, 0.58, 0.75, 0.89, 1.00],
        ),
        FilterSpec(
            name="high-contrast",
            saturation=1.15,
            tone_curve=[0.00, 0.05, 0.18, 0.42, 0.62, 0.83, 0.95, 1.00],
        ),
        FilterSpec(
            name="sepia-drift",
            matrix=0.55 * sepia + 0.45 * np.eye(3),
            saturation=0.70,
            vignette_strength=0.05,
        ),
        FilterSpec(
            name="teal-orange",
            matrix=[[1.05, 0.05, -0.05],
                    [0.00, 1.00, 0.02],
                    [-0.03, 0.05, 0.95]],
            gamma=[0.96, 1.00, 1.04],
            saturation=1.10,
            tone_curve=[0.00, 0.10, 0.24, 0.42, 0.60, 0.77, 0.90, 1.00],
        ),
        FilterSpec(
            name="washout",
            matrix=0.85 * np.eye(3),
            offset=[0.08, 0.08, 0.08],
            saturation=0.65,
            tone_curve=[0.10, 0.22, 0.34, 0.46, 0.57, 0.68, 0.79, 0.90],
        ),
        FilterSpec(
            name="vignette-heavy",
            saturation=0.95,
            vignette_strength=0.45,
        ),
        FilterSpec(
            name="green-tint",
            matrix=[[0.95, 0.04, 0.00],
                    [0.02, 1.06, 0.02],
                    [0.00, 0.04, 0.92]],
            offset=[0.00, 0.02, 0.00],
            gamma=[1.00, 0.94, 1.00],
            saturation=0.90,
        ),
    ]
