"""Building blocks of the restoration network.

Parameters live in small dataclasses whose tensors are registered into a
ParamStore under dotted names at construction time, so a whole model can be
serialized and reloaded by name.  The apply functions are stateless and safe
to run concurrently over shared read-only parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, ParamStore, Tensor


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


def make_conv(
    store: ParamStore,
    prefix: str,
    cin: int,
    cout: int,
    kernel: int,
    rng: np.random.Generator,
    *,
    stride: int = 1,
    padding: Optional[int] = None,
    groups: int = 1,
    bias: bool = True,
    zero: bool = False,
    dtype=np.float32,
) -> Conv2dParams:
    """Create a conv layer and register its tensors under ``prefix``.

    Weights draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``zero``
    forces weight and bias to zero for layers that must start as the
    additive identity.  ``padding`` defaults to kernel//2, which preserves
    shape for odd kernels at stride 1; even kernels must pass it explicitly.
    """
    if padding is None:
        if kernel % 2 == 0:
            raise ContractViolation(
                f"{prefix}: even kernel {kernel} needs an explicit padding"
            )
        padding = kernel // 2
    fan_in = (cin // groups) * kernel * kernel
    bound = 1.0 / np.sqrt(fan_in)
    shape = (cout, cin // groups, kernel, kernel)
    if zero:
        w = Tensor.zeros(shape, dtype=dtype, requires_grad=True)
    else:
        w = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)
    store.add(prefix + ".weight", w)
    b = None
    if bias:
        if zero:
            b = Tensor.zeros((cout,), dtype=dtype, requires_grad=True)
        else:
            b = Tensor(rng.uniform(-bound, bound, (cout,)), requires_grad=True, dtype=dtype)
        store.add(prefix + ".bias", b)
    return Conv2dParams(w, b, stride=stride, padding=padding, groups=groups)


def conv(x: Tensor, p: Conv2dParams) -> Tensor:
    return T.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding,
                    groups=p.groups)


def make_layer_norm(store: ParamStore, prefix: str, c: int,
                    dtype=np.float32) -> LayerNormParams:
    gamma = Tensor.ones((c,), dtype=dtype, requires_grad=True)
    beta = Tensor.zeros((c,), dtype=dtype, requires_grad=True)
    store.add(prefix + ".gamma", gamma)
    store.add(prefix + ".beta", beta)
    return LayerNormParams(gamma, beta)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm2d(x, p.gamma, p.beta)


def simple_gate(x: Tensor) -> Tensor:
    """Halve the channels by multiplying the first half with the second."""
    c = x.shape[1]
    if c % 2 != 0:
        raise ContractViolation(f"simple_gate: odd channel count {c}")
    a, b = T.split_channels(x, [c // 2, c // 2])
    return T.mul(a, b)


def sca(x: Tensor, p: Conv2dParams, pool_window: Optional[int] = None) -> Tensor:
    """Simplified channel attention: x times a pooled, 1x1-projected map.

    ``pool_window=None`` pools globally.  A finite window pools over a local
    neighborhood instead (test-time local statistics); a window at least as
    large as the image falls back to the exact global branch.
    """
    if pool_window is not None and pool_window < max(x.shape[2], x.shape[3]):
        pooled = T.avg_pool_local(x, pool_window)
    else:
        pooled = T.avg_pool_global(x)
    return T.mul(x, conv(pooled, p))


@dataclass
class NafBlockParams:
    ln1: LayerNormParams
    conv_expand1: Conv2dParams
    dwconv: Conv2dParams
    sca_conv: Conv2dParams
    conv_proj1: Conv2dParams
    beta_scale: Tensor
    ln2: LayerNormParams
    conv_expand2: Conv2dParams
    conv_proj2: Conv2dParams
    gamma_scale: Tensor


def make_naf_block(store: ParamStore, prefix: str, c: int,
                   rng: np.random.Generator, dtype=np.float32) -> NafBlockParams:
    beta = Tensor.zeros((c,), dtype=dtype, requires_grad=True)
    gamma = Tensor.zeros((c,), dtype=dtype, requires_grad=True)
    p = NafBlockParams(
        ln1=make_layer_norm(store, prefix + ".ln1", c, dtype),
        conv_expand1=make_conv(store, prefix + ".conv_expand1", c, 2 * c, 1, rng,
                               dtype=dtype),
        dwconv=make_conv(store, prefix + ".dwconv", 2 * c, 2 * c, 3, rng,
                         groups=2 * c, dtype=dtype),
        sca_conv=make_conv(store, prefix + ".sca_conv", c, c, 1, rng, dtype=dtype),
        conv_proj1=make_conv(store, prefix + ".conv_proj1", c, c, 1, rng,
                             dtype=dtype),
        beta_scale=beta,
        ln2=make_layer_norm(store, prefix + ".ln2", c, dtype),
        conv_expand2=make_conv(store, prefix + ".conv_expand2", c, 2 * c, 1, rng,
                               dtype=dtype),
        conv_proj2=make_conv(store, prefix + ".conv_proj2", c, c, 1, rng,
                             dtype=dtype),
        gamma_scale=gamma,
    )
    store.add(prefix + ".beta_scale", beta)
    store.add(prefix + ".gamma_scale", gamma)
    return p


def naf_block(x: Tensor, p: NafBlockParams,
              pool_window: Optional[int] = None) -> Tensor:
    """Two gated residual branches around channel attention.

    Both residual scales start at zero, so a freshly built block is the
    exact identity; training moves it away from that point gradually.
    """
    h = layer_norm(x, p.ln1)
    h = conv(h, p.conv_expand1)
    h = conv(h, p.dwconv)
    h = simple_gate(h)
    h = sca(h, p.sca_conv, pool_window)
    h = conv(h, p.conv_proj1)
    y = T.add(x, T.channel_scale(h, p.beta_scale))

    h = layer_norm(y, p.ln2)
    h = conv(h, p.conv_expand2)
    h = simple_gate(h)
    h = conv(h, p.conv_proj2)
    return T.add(y, T.channel_scale(h, p.gamma_scale))


@dataclass
class NafGroupParams:
    conv3: Conv2dParams
    conv1: Conv2dParams
    block1: NafBlockParams
    block2: NafBlockParams


def make_naf_group(store: ParamStore, prefix: str, c: int,
                   rng: np.random.Generator, dtype=np.float32) -> NafGroupParams:
    return NafGroupParams(
        conv3=make_conv(store, prefix + ".conv3", c, c, 3, rng, dtype=dtype),
        conv1=make_conv(store, prefix + ".conv1", c, c, 1, rng, dtype=dtype),
        block1=make_naf_block(store, prefix + ".block1", c, rng, dtype),
        block2=make_naf_block(store, prefix + ".block2", c, rng, dtype),
    )


def naf_group(x: Tensor, p: NafGroupParams,
              pool_window: Optional[int] = None) -> Tensor:
    h = conv(x, p.conv3)
    h = conv(h, p.conv1)
    h = naf_block(h, p.block1, pool_window)
    return naf_block(h, p.block2, pool_window)
