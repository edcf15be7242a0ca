"""Dense NCHW tensors, the differentiable op set, and gradient verification.

Everything downstream (blocks, color attention, the full network, the loss)
is composed from the primitives in this module.  Each primitive computes its
forward result eagerly with numpy and, when a :class:`Tape` is active and an
input requires gradients, appends a backward rule to the tape.  Replaying the
tape in reverse then fills the ``grad`` buffer of every reachable tensor that
requires gradients.

Compute is float32 by default; float64 is used by the finite-difference
verification paths (see :func:`grad_check`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class NonFiniteError(FloatingPointError):
    """Checked mode detected NaN/Inf in an operation's output."""


_FLOAT_DTYPES = (np.float32, np.float64)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = None
        self.checked = False


_state = _ThreadState()


def set_checked(flag: bool) -> None:
    """Enable or disable finite-value checking after every op."""
    _state.checked = bool(flag)


class checked_mode:
    """Context manager that turns on finite-value checking."""

    def __enter__(self):
        self._prev = _state.checked
        _state.checked = True
        return self

    def __exit__(self, *exc):
        _state.checked = self._prev
        return False


class Tensor:
    """Rank <= 4 dense real array in N,C,H,W layout with an optional grad slot.

    Tensors are immutable during op application; only ``grad`` accumulates
    (and the optimizer updates ``data`` between steps, which it owns).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ContractViolation(
                f"tensor rank {arr.ndim} exceeds the supported maximum of 4"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float32) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype))

    # -- introspection --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), self.requires_grad)

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of differentiable ops executed under this tape.

    Single-writer: one training step owns one tape.  Entering the context
    installs the tape for the current thread; ops then append
    ``(output, inputs, backward_rule)`` records in execution order.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _state.tape is not None:
            raise ContractViolation("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every requires-grad tensor reachable from ``loss``.

    Walks the tape's records in reverse execution order, which is a valid
    reverse topological order because every consumer is recorded after its
    producer.
    """
    if loss.ndim != 0:
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {tuple(loss.shape)}"
        )
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, inputs, rule in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        for t, gt in zip(inputs, rule(g)):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                t.grad += gt


def _emit(name: str, out_data: np.ndarray, inputs, rule) -> Tensor:
    """Wrap an op result, run checked-mode validation, and record on the tape."""
    if _state.checked and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _state.tape
    if tape is not None and out.requires_grad:
        tape._records.append((out, inputs, rule))
    return out


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ContractViolation(f"{op}: expected rank-4 N,C,H,W input, got rank {x.ndim}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, xshape, kh, kw, stride, padding):
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[
                :, :, i, j
            ]
    if padding:
        gxp = gxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gxp)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is (N, Cin, H, W), ``w`` is (Cout, Cin/groups, kh, kw), ``b`` is
    (Cout,).  Output extents are floor((H + 2*padding - kh) / stride) + 1.
    Three dispatch paths: 1x1 convs go straight to GEMM, depthwise convs use
    per-tap shift-accumulate, everything else goes through im2col + GEMM.
    """
    _require_rank4(x, "conv2d")
    xd, wd = x.data, w.data
    if wd.ndim != 4:
        raise ContractViolation(f"conv2d: weight must be rank 4, got rank {wd.ndim}")
    n, cin, h, wdt = xd.shape
    cout, cin_g, kh, kw = wd.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ContractViolation(
            f"conv2d: stride={stride}, padding={padding}, groups={groups} out of range"
        )
    if cin % groups:
        raise ContractViolation(
            f"conv2d: input channels ({cin}) not divisible by groups ({groups})"
        )
    if cout % groups:
        raise ContractViolation(
            f"conv2d: output channels ({cout}) not divisible by groups ({groups})"
        )
    if cin_g != cin // groups:
        raise ContractViolation(
            f"conv2d: weight expects {cin_g * groups} input channels, input has {cin}"
        )
    if kh > h + 2 * padding or kw > wdt + 2 * padding:
        raise ContractViolation(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wdt + 2 * padding}"
        )
    if b is not None and b.shape != (cout,):
        raise ContractViolation(
            f"conv2d: bias shape {tuple(b.shape)} != ({cout},)"
        )

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        return _conv1x1(x, w, b, n, cin, cout, h, wdt)
    if groups == cin and cout == cin and cin_g == 1:
        return _conv_depthwise(x, w, b, stride, padding, kh, kw)
    return _conv_general(x, w, b, stride, padding, groups)


def _bias_rule(g):
    return g.sum(axis=(0, 2, 3))


def _conv1x1(x, w, b, n, cin, cout, h, wdt):
    xd = x.data.reshape(n, cin, h * wdt)
    w2 = w.data.reshape(cout, cin)
    out = np.matmul(w2, xd)
    if b is not None:
        out = out + b.data[None, :, None]
    out = out.reshape(n, cout, h, wdt)

    def rule(g):
        g2 = g.reshape(n, cout, h * wdt)
        gx = np.matmul(w2.T, g2).reshape(x.shape)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g2, xd.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = _bias_rule(g) if b is not None and b.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, rule)


def _conv_depthwise(x, w, b, stride, padding, kh, kw):
    xd = x.data
    n, c, h, wdt = xd.shape
    xp = (
        np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else xd
    )
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    wd = w.data
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    buf = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(
                wd[:, 0, i, j][None, :, None, None],
                xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride],
                out=buf,
            )
            out += buf
    if b is not None:
        out += b.data[None, :, None, None]

    def rule(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd) if w.requires_grad else None
        gbuf = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + stride * ho, stride),
                    slice(j, j + stride * wo, stride),
                )
                np.multiply(wd[:, 0, i, j][None, :, None, None], g, out=gbuf)
                gxp[sl] += gbuf
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum(
                        "nchw,nchw->c", g, xp[sl], optimize=True
                    )
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        gb = _bias_rule(g) if b is not None and b.requires_grad else None
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, rule)


def _conv_general(x, w, b, stride, padding, groups):
    xd, wd = x.data, w.data
    n, cin = xd.shape[:2]
    cout, cin_g, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    L = ho * wo
    if groups == 1:
        w2 = wd.reshape(cout, cin_g * kh * kw)
        out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    else:
        kg = cin_g * kh * kw
        colsg = cols.reshape(n, groups, kg, L)
        wg = wd.reshape(groups, cout // groups, kg)
        out = np.matmul(wg[None], colsg).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def rule(g):
        g2 = g.reshape(n, cout, L)
        if groups == 1:
            w2_ = wd.reshape(cout, cin_g * kh * kw)
            gw = None
            if w.requires_grad:
                gw = (
                    np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
                )
            gcols = np.matmul(w2_.T, g2)
        else:
            kg = cin_g * kh * kw
            gg = g2.reshape(n, groups, cout // groups, L)
            colsg_ = cols.reshape(n, groups, kg, L)
            wg_ = wd.reshape(groups, cout // groups, kg)
            gw = None
            if w.requires_grad:
                gw = (
                    np.matmul(gg, colsg_.transpose(0, 1, 3, 2))
                    .sum(axis=0)
                    .reshape(wd.shape)
                )
            gcols = np.matmul(wg_.transpose(0, 2, 1)[None], gg).reshape(
                n, cin * kh * kw, L
            )
        gx = _col2im(gcols, xd.shape, kh, kw, stride, padding)
        gb = _bias_rule(g) if b is not None and b.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, rule)


# ---------------------------------------------------------------------------
# normalization, pooling, resampling
# ---------------------------------------------------------------------------


def layer_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every spatial position, then scale/shift.

    At each (n, h, w) the C channel values are standardized to zero mean and
    unit variance (biased variance, epsilon-stabilized), then multiplied by
    ``gamma`` and shifted by ``beta`` per channel.
    """
    _require_rank4(x, "layer_norm2d")
    c = x.shape[1]
    if c < 1:
        raise ContractViolation("layer_norm2d: needs at least one channel")
    if eps <= 0:
        raise ContractViolation(f"layer_norm2d: eps must be positive, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(
            f"layer_norm2d: gamma/beta must have shape ({c},), got "
            f"{tuple(gamma.shape)} and {tuple(beta.shape)}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xh = xc * inv
    gd = gamma.data[None, :, None, None]
    out = gd * xh + beta.data[None, :, None, None]

    def rule(g):
        dxh = g * gd
        m1 = dxh.mean(axis=1, keepdims=True)
        m2 = (dxh * xh).mean(axis=1, keepdims=True)
        gx = inv * (dxh - m1 - xh * m2)
        ggamma = (g * xh).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _emit("layer_norm2d", out, (x, gamma, beta), rule)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (N, C*r^2, H, W) -> (N, C, r*H, r*W)."""
    _require_rank4(x, "pixel_shuffle")
    n, c, h, w = x.shape
    if r < 1:
        raise ContractViolation(f"pixel_shuffle: r must be positive, got {r}")
    if c % (r * r):
        raise ContractViolation(
            f"pixel_shuffle: channels ({c}) not divisible by r^2 ({r * r})"
        )
    c2 = c // (r * r)
    out = (
        x.data.reshape(n, c2, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c2, h * r, w * r)
    )

    def rule(g):
        gx = (
            g.reshape(n, c2, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _emit("pixel_shuffle", np.ascontiguousarray(out), (x,), rule)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    _require_rank4(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    if r < 1:
        raise ContractViolation(f"pixel_unshuffle: r must be positive, got {r}")
    if h % r or w % r:
        raise ContractViolation(
            f"pixel_unshuffle: extents {h}x{w} not divisible by r ({r})"
        )
    h2, w2 = h // r, w // r
    out = (
        x.data.reshape(n, c, h2, r, w2, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h2, w2)
    )

    def rule(g):
        gx = (
            g.reshape(n, c, r, r, h2, w2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _emit("pixel_unshuffle", np.ascontiguousarray(out), (x,), rule)


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max over k x k windows; gradient routes to the first max in row-major order."""
    _require_rank4(x, "max_pool2d")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ContractViolation(
            f"max_pool2d: window {k} larger than input extents {h}x{w}"
        )
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, ho, wo = win.shape[:4]
    winf = win.reshape(n, c, ho, wo, k * k)
    idx = winf.argmax(axis=-1)
    out = np.take_along_axis(winf, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gx = np.zeros_like(x.data)
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        ii = oi[None, None] * stride + idx // k
        jj = oj[None, None] * stride + idx % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, ii, jj), g)
        return (gx,)

    return _emit("max_pool2d", np.ascontiguousarray(out), (x,), rule)


def avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean, output shape (N, C, 1, 1)."""
    _require_rank4(x, "avg_pool_global")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def rule(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _emit("avg_pool_global", out, (x,), rule)


def _box_bounds(n: int, lo: int, hi: int):
    i = np.arange(n)
    r0 = np.maximum(i - lo, 0)
    r1 = np.minimum(i + hi, n - 1)
    return r0, r1, (r1 - r0 + 1)


def _box_sum(a: np.ndarray, lo_h: int, hi_h: int, lo_w: int, hi_w: int) -> np.ndarray:
    """Sum of a over the clipped window [i-lo, i+hi] x [j-lo, j+hi] per position."""
    n, c, h, w = a.shape
    p = np.zeros((n, c, h + 1, w + 1), dtype=np.promote_types(a.dtype, np.float64))
    p[:, :, 1:, 1:] = a.cumsum(axis=2).cumsum(axis=3)
    r0, r1, _ = _box_bounds(h, lo_h, hi_h)
    c0, c1, _ = _box_bounds(w, lo_w, hi_w)
    rows = p[:, :, r1 + 1, :] - p[:, :, r0, :]
    s = rows[:, :, :, c1 + 1] - rows[:, :, :, c0]
    return s.astype(a.dtype, copy=False)


def avg_pool_local(x: Tensor, window: int) -> Tensor:
    """Mean over a window x window neighborhood clipped to the image bounds.

    Edge windows are renormalized by their true pixel count.  A window
    covering the whole image reduces to the broadcast global mean, computed
    through the identical code path as :func:`avg_pool_global` so the two are
    bit-for-bit equal.
    """
    _require_rank4(x, "avg_pool_local")
    if window < 1:
        raise ContractViolation(f"avg_pool_local: window must be >= 1, got {window}")
    n, c, h, w = x.shape
    if window >= max(h, w):
        out = np.broadcast_to(x.data.mean(axis=(2, 3), keepdims=True), x.shape).copy()

        def rule_global(g):
            return (
                np.broadcast_to(
                    g.sum(axis=(2, 3), keepdims=True) / (h * w), x.shape
                ).copy(),
            )

        return _emit("avg_pool_local", out, (x,), rule_global)

    lo, hi = (window - 1) // 2, window // 2
    _, _, nrow = _box_bounds(h, lo, hi)
    _, _, ncol = _box_bounds(w, lo, hi)
    counts = (nrow[:, None] * ncol[None, :]).astype(x.dtype)
    out = _box_sum(x.data, lo, hi, lo, hi) / counts

    def rule(g):
        # adjoint: scatter each mean back over its window = box-sum with the
        # reversed (hi, lo) half-extents of the normalized gradient field
        return (_box_sum(g / counts, hi, lo, hi, lo),)

    return _emit("avg_pool_local", out, (x,), rule)


def resize_half_area(x: Tensor) -> Tensor:
    """Downscale by 2 via exact 2x2 block averaging (area interpolation)."""
    _require_rank4(x, "resize_half_area")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(
            f"resize_half_area: extents {h}x{w} must be even (multiples of 2)"
        )
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        gq = g[:, :, :, None, :, None] * np.asarray(0.25, dtype=g.dtype)
        gx = np.broadcast_to(gq, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _emit("resize_half_area", out, (x,), rule)


def _pad_pair(p, extent: int, op: str):
    lo, hi = (p, p) if isinstance(p, int) else (int(p[0]), int(p[1]))
    if lo < 0 or hi < 0:
        raise ContractViolation(f"{op}: negative padding")
    if max(lo, hi) > extent - 1:
        raise ContractViolation(
            f"{op}: padding ({lo},{hi}) must be < extent {extent}"
        )
    return lo, hi


def pad_reflect(x: Tensor, pad_h, pad_w) -> Tensor:
    """Reflect-pad the spatial axes (edge sample not repeated).

    Each pad is either an int (both sides) or a (before, after) pair.
    """
    _require_rank4(x, "pad_reflect")
    n, c, h, w = x.shape
    ph = _pad_pair(pad_h, h, "pad_reflect")
    pw = _pad_pair(pad_w, w, "pad_reflect")
    out = np.pad(x.data, ((0, 0), (0, 0), ph, pw), mode="reflect")
    idx_h = np.pad(np.arange(h), ph, mode="reflect")
    idx_w = np.pad(np.arange(w), pw, mode="reflect")

    def rule(g):
        gh = np.zeros((n, c, h, w + pw[0] + pw[1]), dtype=g.dtype)
        np.add.at(gh.transpose(2, 0, 1, 3), idx_h, g.transpose(2, 0, 1, 3))
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx.transpose(3, 0, 1, 2), idx_w, gh.transpose(3, 0, 1, 2))
        return (gx,)

    return _emit("pad_reflect", out, (x,), rule)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Take a spatial window; backward scatters the gradient back in place."""
    _require_rank4(x, "crop")
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ContractViolation(
            f"crop: window {height}x{width} at ({top},{left}) exceeds {h}x{w}"
        )
    out = np.ascontiguousarray(x.data[:, :, top:top + height, left:left + width])

    def rule(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return _emit("crop", out, (x,), rule)


def gaussian_kernel_1d(sigma: float, radius: int, dtype=np.float32) -> np.ndarray:
    """Normalized 1-D Gaussian taps exp(-i^2 / 2 sigma^2), i in [-radius, radius].

    After truncation the kernel is renormalized; the residual is folded into
    the center tap until the sum is exactly 1 in the target dtype.
    """
    if sigma <= 0:
        raise ContractViolation(f"gaussian kernel: sigma must be positive, got {sigma}")
    if radius < 1:
        raise ContractViolation(f"gaussian kernel: radius must be >= 1, got {radius}")
    i = np.arange(-radius, radius + 1, dtype=dtype)
    k = np.exp(-(i * i) / np.asarray(2.0 * sigma * sigma, dtype=dtype))
    k /= k.sum()
    for _ in range(4):
        err = np.asarray(1.0, dtype=dtype) - k.sum()
        if err == 0:
            break
        k[radius] += err
    return k


def _blur_adjoint_axis(g: np.ndarray, k: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Transpose of (reflect-pad r, then valid-correlate with k) along one axis.

    Reflect-padded correlation is not self-adjoint: the transpose is a full
    correlation of the incoming gradient followed by folding the pad region
    back by the same reflection indices.
    """
    pad = [(0, 0)] * g.ndim
    pad[axis] = (r, r)
    full = ndimage.correlate1d(np.pad(g, pad), k, axis=axis, mode="constant")
    n_ax = g.shape[axis]
    idx = np.pad(np.arange(n_ax), r, mode="reflect")
    out = np.zeros_like(g)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(full, axis, 0))
    return out


def gaussian_blur(x: Tensor, sigma: float, radius: int) -> Tensor:
    """Separable per-channel Gaussian blur with reflected-edge boundaries.

    DC gain is exactly 1 (kernel renormalized after truncation).  The radius
    is clamped per axis to the image extent minus one, the largest reflection
    the image supports; a unit extent skips that axis entirely.
    """
    _require_rank4(x, "gaussian_blur")
    n, c, h, w = x.shape
    if sigma <= 0 or radius < 1:
        raise ContractViolation(
            f"gaussian_blur: sigma must be > 0 and radius >= 1, got {sigma}, {radius}"
        )
    rh = min(radius, h - 1)
    rw = min(radius, w - 1)
    kh = gaussian_kernel_1d(sigma, rh, x.dtype) if rh >= 1 else None
    if rw == rh:
        kw_ = kh
    else:
        kw_ = gaussian_kernel_1d(sigma, rw, x.dtype) if rw >= 1 else None
    out = x.data
    if kh is not None:
        out = ndimage.correlate1d(out, kh, axis=2, mode="mirror")
    if kw_ is not None:
        out = ndimage.correlate1d(out, kw_, axis=3, mode="mirror")
    if out is x.data:
        out = out.copy()

    def rule(g):
        gg = g
        if kw_ is not None:
            gg = _blur_adjoint_axis(gg, kw_, rw, axis=3)
        if kh is not None:
            gg = _blur_adjoint_axis(gg, kh, rh, axis=2)
        return (gg if gg is not g else g.copy(),)

    return _emit("gaussian_blur", out, (x,), rule)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # the one sanctioned broadcast: (N,C,1,1) against (N,C,H,W)
    if a.ndim == 4 and b.ndim == 4 and a.shape[:2] == b.shape[:2]:
        if a.shape[2:] == (1, 1) or b.shape[2:] == (1, 1):
            return
    raise ContractViolation(
        f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
    )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("add", a, b)
    out = a.data + b.data

    def rule(g):
        return _reduce_to(g, a.shape).copy(), _reduce_to(g, b.shape).copy()

    return _emit("add", out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("sub", a, b)
    out = a.data - b.data

    def rule(g):
        return _reduce_to(g, a.shape).copy(), -_reduce_to(g, b.shape)

    return _emit("sub", out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("mul", a, b)
    out = a.data * b.data

    def rule(g):
        ga = _reduce_to(g * b.data, a.shape)
        gb = _reduce_to(g * a.data, b.shape)
        return ga, gb

    return _emit("mul", out, (a, b), rule)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of a rank-4 tensor by a learnable rank-1 factor."""
    if x.ndim != 4 or s.ndim != 1 or s.shape[0] != x.shape[1]:
        raise ContractViolation(
            f"channel_scale: need x rank 4 and s rank 1 of length C, got "
            f"{tuple(x.shape)} and {tuple(s.shape)}"
        )
    sv = s.data[None, :, None, None]
    out = x.data * sv

    def rule(g):
        return g * sv, (g * x.data).sum(axis=(0, 2, 3))

    return _emit("channel_scale", out, (x, s), rule)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (x,), rule)


def scale(x: Tensor, s: float) -> Tensor:
    sv = np.asarray(s, dtype=x.dtype)
    out = x.data * sv

    def rule(g):
        return (g * sv,)

    return _emit("scale", out, (x,), rule)


def shift(x: Tensor, c: float) -> Tensor:
    out = x.data + np.asarray(c, dtype=x.dtype)

    def rule(g):
        return (g.copy(),)

    return _emit("shift", out, (x,), rule)


def log(x: Tensor) -> Tensor:
    """Natural logarithm; caller is responsible for positive inputs."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def rule(g):
        return (g / x.data,)

    return _emit("log", out, (x,), rule)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    fv = np.asarray(floor, dtype=x.dtype)
    out = np.maximum(x.data, fv)
    mask = x.data > fv

    def rule(g):
        return (g * mask,)

    return _emit("clamp_min", out, (x,), rule)


def mean_per_image(x: Tensor) -> Tensor:
    """Mean over channels and space per batch item, output (N, 1, 1, 1)."""
    _require_rank4(x, "mean_per_image")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(1, 2, 3), keepdims=True)

    def rule(g):
        return (np.broadcast_to(g / (c * h * w), x.shape).copy(),)

    return _emit("mean_per_image", out, (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, producing a rank-0 scalar tensor."""
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def rule(g):
        return (np.broadcast_to(g / x.size, x.shape).copy(),)

    return _emit("mean_all", out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum_all", out, (x,), rule)


def concat_channels(xs) -> Tensor:
    """Concatenate along the channel axis; N, H, W must match."""
    xs = list(xs)
    if not xs:
        raise ContractViolation("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ContractViolation(
                f"concat_channels: shape {tuple(t.shape)} incompatible with "
                f"{tuple(ref)} (N, H, W must match)"
            )
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            g[:, offsets[i] : offsets[i + 1]].copy() for i in range(len(sizes))
        )

    return _emit("concat_channels", out, tuple(xs), rule)


def split_channels(x: Tensor, parts) -> list:
    """Split along channels into chunks of the given sizes; inverse of concat."""
    _require_rank4(x, "split_channels")
    parts = list(parts)
    if sum(parts) != x.shape[1]:
        raise ContractViolation(
            f"split_channels: parts {parts} do not sum to channel count {x.shape[1]}"
        )
    offsets = np.cumsum([0] + parts)
    outs = []
    for i in range(len(parts)):
        o0, o1 = offsets[i], offsets[i + 1]
        piece = np.ascontiguousarray(x.data[:, o0:o1])

        def rule(g, o0=o0, o1=o1):
            gx = np.zeros_like(x.data)
            gx[:, o0:o1] = g
            return (gx,)

        outs.append(_emit("split_channels", piece, (x,), rule))
    return outs


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered name -> Tensor mapping for a model's learnable parameters."""

    def __init__(self, named=()):
        self._params = {}
        for name, t in named:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name: {name}")
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-input relative errors of tape gradients against central differences.

    The error for one input is max|analytic - numeric| scaled by
    max(1, max|numeric|), so near-zero gradients are compared absolutely and
    large gradients relatively.
    """

    rel_errors: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        lines = [
            f"  input[{i}]: rel_error={e:.3e}" for i, e in enumerate(self.rel_errors)
        ]
        status = "PASS" if self.ok else "FAIL"
        lines.append(f"  max={self.max_rel_error:.3e} tol={self.tol:.1e} [{status}]")
        return "\n".join(lines)


def grad_check(fn, inputs, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued ``fn`` with central differences.

    Inputs are copied to float64 with gradients enabled; ``fn`` is called once
    under a tape for the analytic gradients and then twice per input element
    (at +/- h) without a tape for the numeric ones.  ``fn`` must be pure.
    """
    inputs64 = [
        Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs
    ]
    with Tape() as tape:
        loss = fn(*inputs64)
    backward(loss, tape)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in inputs64
    ]

    report = GradCheckReport(tol=tol)
    for t, an in zip(inputs64, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs64).item()
            flat[i] = orig - h
            fm = fn(*inputs64).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        num = num.reshape(t.shape)
        denom = max(1.0, float(np.max(np.abs(num))) if num.size else 0.0)
        report.rel_errors.append(float(np.max(np.abs(an - num))) / denom)
    return report
