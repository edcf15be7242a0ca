"""Color-map extraction and the attention branch built on it.

The color map is computed from a heavily blurred copy of the input, so it
responds to broad color casts rather than texture.  It modulates a
structural feature branch multiplicatively, with an additive skip so a zero
map leaves the features untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import Conv2dParams, NafGroupParams
from .tensor import ContractViolation, ParamStore, Tensor

DEFAULT_BLUR_SIGMA = 12.0


@dataclass
class CaParams:
    conv1: Conv2dParams
    ng1: NafGroupParams
    ng2: NafGroupParams
    conv2: Conv2dParams
    conv3: Optional[Conv2dParams]
    blur_sigma: float = DEFAULT_BLUR_SIGMA
    blur_radius: int = 24


def make_ca(
    store: ParamStore,
    prefix: str,
    c: int,
    rng: np.random.Generator,
    *,
    with_structural: bool = True,
    blur_sigma: float = DEFAULT_BLUR_SIGMA,
    blur_radius: Optional[int] = None,
    dtype=np.float32,
) -> CaParams:
    """Build attention parameters at width ``c``.

    ``with_structural=False`` gives the map-only form used at the finest
    level, which has no feature branch of its own.
    """
    if blur_radius is None:
        blur_radius = math.ceil(2.0 * blur_sigma)
    conv3 = None
    if with_structural:
        conv3 = B.make_conv(store, prefix + ".conv3", 3, c, 3, rng, dtype=dtype)
    return CaParams(
        conv1=B.make_conv(store, prefix + ".conv1", 3, c, 1, rng, dtype=dtype),
        ng1=B.make_naf_group(store, prefix + ".ng1", c, rng, dtype),
        ng2=B.make_naf_group(store, prefix + ".ng2", c, rng, dtype),
        conv2=B.make_conv(store, prefix + ".conv2", c, c, 1, rng, dtype=dtype),
        conv3=conv3,
        blur_sigma=blur_sigma,
        blur_radius=blur_radius,
    )


def extract_color_map(img: Tensor, p: CaParams,
                      pool_window: Optional[int] = None) -> Tensor:
    """Sigmoid color map at half the input resolution, values in (0,1)."""
    n, c, h, w = img.shape
    if c != 3:
        raise ContractViolation(f"extract_color_map: expected 3 channels, got {c}")
    if h % 2 != 0 or w % 2 != 0:
        raise ContractViolation(
            f"extract_color_map: spatial size {h}x{w} must be even"
        )
    x = T.gaussian_blur(img, p.blur_sigma, p.blur_radius)
    x = B.conv(x, p.conv1)
    x = T.max_pool2d(x)
    x = B.naf_group(x, p.ng1, pool_window)
    x = B.naf_group(x, p.ng2, pool_window)
    x = B.conv(x, p.conv2)
    return T.sigmoid(x)


def color_attention(img_k: Tensor, img_upper: Tensor, p: CaParams,
                    pool_window: Optional[int] = None) -> Tensor:
    """Structural features of img_k, modulated by the color map of the level above."""
    if p.conv3 is None:
        raise ContractViolation(
            "color_attention: parameters lack the structural branch "
            "(map-only form); use color_attention_level1"
        )
    if (img_upper.shape[2] != 2 * img_k.shape[2]
            or img_upper.shape[3] != 2 * img_k.shape[3]):
        raise ContractViolation(
            f"color_attention: upper level {img_upper.shape[2:]} is not twice "
            f"{img_k.shape[2:]}"
        )
    fs = B.conv(img_k, p.conv3)
    m = extract_color_map(img_upper, p, pool_window)
    return T.add(T.mul(m, fs), fs)


def color_attention_level1(img1: Tensor, p: CaParams,
                           pool_window: Optional[int] = None) -> Tensor:
    """Finest-level special case: the color map itself, at half resolution."""
    return extract_color_map(img1, p, pool_window)
