"""The multi-scale restoration network.

A U-shaped encoder/decoder of gated residual blocks, fed by a pyramid of
downscaled copies of the input.  At each coarser level the encoder features
are fused with a color-attention branch computed from the pyramid; the
finest-level color map re-enters through a learned skip just before the
output projection.  Three variants share the trunk:

  M      full multi-scale form with per-level color attention
  S      single-scale trunk, color attention only through the final skip
  plain  no color attention at all
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import blocks as B
from . import color_attention as CA
from . import tensor as T
from .blocks import Conv2dParams, NafBlockParams
from .color_attention import CaParams
from .tensor import ContractViolation, ParamStore, Tensor

VARIANTS = ("M", "S", "plain")


@dataclass
class CairConfig:
    levels: int = 4
    width: int = 32
    block_counts: tuple = (2, 2, 4, 22, 2, 2, 2)
    variant: str = "M"
    tlsc_window: Optional[int] = None
    ca_width: Optional[int] = None

    def __post_init__(self):
        if self.levels < 2:
            raise ContractViolation(f"levels must be >= 2, got {self.levels}")
        if self.width < 1:
            raise ContractViolation(f"width must be positive, got {self.width}")
        self.block_counts = tuple(int(n) for n in self.block_counts)
        want = 2 * self.levels - 1
        if len(self.block_counts) != want:
            raise ContractViolation(
                f"block_counts needs {want} entries for {self.levels} levels, "
                f"got {len(self.block_counts)}"
            )
        if any(n < 0 for n in self.block_counts):
            raise ContractViolation("block_counts entries must be >= 0")
        if self.variant not in VARIANTS:
            raise ContractViolation(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )
        if self.ca_width is None:
            self.ca_width = self.width
        if self.ca_width < 1:
            raise ContractViolation(f"ca_width must be positive, got {self.ca_width}")

    def level_width(self, k: int) -> int:
        return self.width * (1 << (k - 1))

    def encoder_blocks(self, k: int) -> int:
        return self.block_counts[k - 1]

    def decoder_blocks(self, k: int) -> int:
        return self.block_counts[2 * self.levels - k - 1]


@dataclass
class CairParams:
    intro_conv: Conv2dParams
    enc_blocks: List[List[NafBlockParams]]
    downs: List[Conv2dParams]
    fusion_convs: Optional[List[Conv2dParams]]
    ca_modules: Optional[List[CaParams]]
    ca1: Optional[CaParams]
    dec_blocks: List[List[NafBlockParams]]
    ups: List[Conv2dParams]
    ending_conv: Conv2dParams
    up_color: Optional[Conv2dParams]
    color_proj: Optional[Conv2dParams]


@dataclass
class CairModel:
    config: CairConfig
    store: ParamStore
    params: CairParams


def make_cair(config: CairConfig, seed: int = 0, dtype=np.float32) -> CairModel:
    """Build a model with fresh parameters registered under dotted names.

    The output projection starts at zero, so a new model maps any image to
    itself; training has to earn its way off the identity.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    l, w, ca = config.levels, config.width, config.ca_width
    mk_blocks = lambda prefix, n, c: [
        B.make_naf_block(store, f"{prefix}.block{i}", c, rng, dtype)
        for i in range(n)
    ]

    intro = B.make_conv(store, "intro", 3, w, 3, rng, dtype=dtype)
    enc = [mk_blocks(f"enc{k}", config.encoder_blocks(k), config.level_width(k))
           for k in range(1, l + 1)]
    downs = [
        B.make_conv(store, f"down{k}", config.level_width(k),
                    config.level_width(k + 1), 2, rng, stride=2, padding=0,
                    dtype=dtype)
        for k in range(1, l)
    ]

    fusion = ca_mods = None
    if config.variant == "M":
        fusion = [
            B.make_conv(store, f"fuse{k}", config.level_width(k) + ca,
                        config.level_width(k), 1, rng, dtype=dtype)
            for k in range(2, l + 1)
        ]
        ca_mods = [
            CA.make_ca(store, f"ca{k}", ca, rng, dtype=dtype)
            for k in range(2, l + 1)
        ]

    ca1 = up_color = color_proj = None
    if config.variant in ("M", "S"):
        ca1 = CA.make_ca(store, "ca1", ca, rng, with_structural=False,
                         dtype=dtype)
        up_color = B.make_conv(store, "up_color", ca, 4 * ca, 1, rng,
                               bias=False, dtype=dtype)
        color_proj = B.make_conv(store, "color_proj", ca, w, 1, rng,
                                 dtype=dtype)

    dec = [mk_blocks(f"dec{k}", config.decoder_blocks(k), config.level_width(k))
           for k in range(l - 1, 0, -1)]
    ups = [
        B.make_conv(store, f"up{k}", config.level_width(k + 1),
                    2 * config.level_width(k + 1), 1, rng, bias=False,
                    dtype=dtype)
        for k in range(l - 1, 0, -1)
    ]
    ending = B.make_conv(store, "ending", w, 3, 3, rng, zero=True, dtype=dtype)

    params = CairParams(
        intro_conv=intro, enc_blocks=enc, downs=downs, fusion_convs=fusion,
        ca_modules=ca_mods, ca1=ca1, dec_blocks=dec, ups=ups,
        ending_conv=ending, up_color=up_color, color_proj=color_proj,
    )
    return CairModel(config=config, store=store, params=params)


def count_params(store: ParamStore) -> int:
    return store.total_size()


def build_pyramid(img: Tensor, levels: int) -> List[Tensor]:
    """Repeated 2x area downscales; level k sits at 1/2^(k-1) scale."""
    n, c, h, w = img.shape
    m = 1 << (levels - 1)
    if h % m != 0 or w % m != 0:
        raise ContractViolation(
            f"build_pyramid: spatial size {h}x{w} must be a multiple of {m} "
            f"for {levels} levels"
        )
    out = [img]
    for _ in range(levels - 1):
        out.append(T.resize_half_area(out[-1]))
    return out


def _run_blocks(x: Tensor, blocks_list, pool_window) -> Tensor:
    for p in blocks_list:
        x = B.naf_block(x, p, pool_window)
    return x


def forward(img: Tensor, model: CairModel, taps: Optional[dict] = None) -> Tensor:
    """Restore an image; output has the input's shape.

    Spatial extents that are not multiples of 2^(levels-1) are reflect-padded
    on the bottom/right and the output cropped back.  ``taps``, if given,
    collects named intermediate shapes for structural checks.
    """
    cfg, p = model.config, model.params
    if img.ndim != 4 or img.shape[1] != 3:
        raise ContractViolation(
            f"forward: expected [N,3,H,W] input, got {tuple(img.shape)}"
        )
    l, pool = cfg.levels, cfg.tlsc_window
    n, _, h0, w0 = img.shape
    mult = 1 << (l - 1)
    ph, pw = (-h0) % mult, (-w0) % mult
    x = T.pad_reflect(img, (0, ph), (0, pw)) if (ph or pw) else img

    pyramid = build_pyramid(x, l) if cfg.variant == "M" else [x]

    ef = []
    h = B.conv(x, p.intro_conv)
    h = _run_blocks(h, p.enc_blocks[0], pool)
    ef.append(h)
    for k in range(2, l + 1):
        d = B.conv(ef[-1], p.downs[k - 2])
        if cfg.variant == "M":
            fc = CA.color_attention(pyramid[k - 1], pyramid[k - 2],
                                    p.ca_modules[k - 2], pool)
            d = B.conv(T.concat_channels([d, fc]), p.fusion_convs[k - 2])
        h = _run_blocks(d, p.enc_blocks[k - 1], pool)
        ef.append(h)
    for k in range(1, l + 1):
        if ef[k - 1].shape[1] != cfg.level_width(k):
            raise ContractViolation(
                f"forward: encoder level {k} width {ef[k - 1].shape[1]} != "
                f"{cfg.level_width(k)}"
            )
    if taps is not None:
        taps["encoder_widths"] = [e.shape[1] for e in ef]

    df = ef[-1]
    for i, k in enumerate(range(l - 1, 0, -1)):
        u = T.pixel_shuffle(B.conv(df, p.ups[i]), 2)
        df = _run_blocks(T.add(ef[k - 1], u), p.dec_blocks[i], pool)

    skip = df
    if cfg.variant in ("M", "S"):
        m1 = CA.color_attention_level1(pyramid[0], p.ca1, pool)
        mu = T.pixel_shuffle(B.conv(m1, p.up_color), 2)
        skip = T.add(df, B.conv(mu, p.color_proj))
        if taps is not None:
            taps["color_map_shape"] = tuple(m1.shape)

    out = T.add(x, B.conv(skip, p.ending_conv))
    if ph or pw:
        out = T.crop(out, 0, 0, h0, w0)
    return out
