"""Differentiable layer primitives: forward passes paired with exact adjoints.

Every forward returns ``(output, cache)``; the matching backward consumes
the cache plus the upstream gradient and returns gradients with the exact
shapes of the values they differentiate. All functions are pure given
explicit state arguments, except ``batchnorm_forward`` in train mode,
which updates the running statistics in place (single writer: the
training loop).

1-d layers (audio) and 2-d layers (images) share one windowing core: a
1-d input ``(B, C, L)`` is lifted to a width-1 image ``(B, C, L, 1)``, so
the dimensional correspondence between the two holds structurally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeMismatchError, max0


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution or pooling layer.

    `kernel`, `stride` and `padding` hold one extent for 1-d specs and two
    for 2-d specs. Channel counts are ignored by pooling.
    """

    kernel: tuple
    stride: tuple
    padding: tuple
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        k = _as_tuple(self.kernel)
        s = _as_tuple(self.stride)
        p = _as_tuple(self.padding)
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "stride", s)
        object.__setattr__(self, "padding", p)
        if not (len(k) == len(s) == len(p)) or len(k) not in (1, 2):
            raise ValueError(f"spec ranks disagree: kernel {k}, stride {s}, padding {p}")
        if any(v < 1 for v in k + s) or any(v < 0 for v in p):
            raise ValueError(f"bad conv spec: kernel {k}, stride {s}, padding {p}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def ndim(self) -> int:
        return len(self.kernel)


def _as_tuple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return (int(v),)


def out_extent(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _check_out_extents(spatial, spec: ConvSpec):
    outs = tuple(
        out_extent(L, k, s, p)
        for L, k, s, p in zip(spatial, spec.kernel, spec.stride, spec.padding)
    )
    if any(o < 1 for o in outs):
        raise ValueError(
            f"output extent < 1 for input {tuple(spatial)} with spec "
            f"kernel={spec.kernel} stride={spec.stride} padding={spec.padding}"
        )
    return outs


def _lift_1d(x):
    return x[..., None]


# ---------------------------------------------------------------------------
# im2col core (2-d)

def _im2col(x, kernel, stride, padding, fill=0.0):
    """Unfold (B, C, H, W) into (B*Ho*Wo, C*kh*kw) window rows.

    Column order is (channel, kernel row, kernel col), i.e. increasing
    linear index within each window.
    """
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    Ho = out_extent(H, kh, sh, ph)
    Wo = out_extent(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw), (Ho, Wo)


def _col2im(dcols, x_shape, kernel, stride, padding):
    """Adjoint of _im2col: scatter-add window rows back onto the input."""
    B, C, H, W = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    Ho = out_extent(H, kh, sh, ph)
    Wo = out_extent(W, kw, sw, pw)
    d6 = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += d6[:, :, i, j]
    return dxp[:, :, ph : ph + H, pw : pw + W]


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding)

def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """Cross-correlate x with w and add the per-channel bias.

    x: (B, Cin, L) for 1-d specs or (B, Cin, H, W) for 2-d specs.
    w: (Cout, Cin, *kernel). Returns (y, cache).
    """
    if x.ndim != spec.ndim + 2:
        raise ShapeMismatchError("conv input rank", x.shape, ("B", spec.in_channels) + spec.kernel)
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError("conv input channels", x.shape, (x.shape[0], spec.in_channels) + x.shape[2:])
    if w.shape != (spec.out_channels, spec.in_channels) + spec.kernel:
        raise ShapeMismatchError("conv weight", w.shape, (spec.out_channels, spec.in_channels) + spec.kernel)
    if b.shape != (spec.out_channels,):
        raise ShapeMismatchError("conv bias", b.shape, (spec.out_channels,))
    _check_out_extents(x.shape[2:], spec)

    if spec.ndim == 1:
        y2, cache2 = conv_forward(_lift_1d(x), _lift_1d(w), b, _spec_2d(spec))
        return y2[..., 0], ("1d", cache2)

    B = x.shape[0]
    cols, (Ho, Wo) = _im2col(x, spec.kernel, spec.stride, spec.padding)
    wf = w.reshape(spec.out_channels, -1)
    out = cols @ wf.T + b
    y = out.reshape(B, Ho, Wo, spec.out_channels).transpose(0, 3, 1, 2)
    cache = ("2d", cols, x.shape, w, spec)
    return np.ascontiguousarray(y), cache


def conv_backward(cache, grad_out: np.ndarray):
    """Exact adjoint of conv_forward; returns (dw, db, dx)."""
    if cache[0] == "1d":
        dw, db, dx = conv_backward(cache[1], _lift_1d(grad_out))
        return dw[..., 0], db, dx[..., 0]
    _, cols, x_shape, w, spec = cache
    expect = (x_shape[0], spec.out_channels) + _check_out_extents(x_shape[2:], spec)
    if grad_out.shape != expect:
        raise ShapeMismatchError("conv grad_out", grad_out.shape, expect)

    Cout = spec.out_channels
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, Cout)
    db = g2.sum(axis=0)
    wf = w.reshape(Cout, -1)
    dwf = g2.T @ cols
    dcols = g2 @ wf
    dx = _col2im(dcols, x_shape, spec.kernel, spec.stride, spec.padding)
    return dwf.reshape(w.shape), db, dx


def _spec_2d(spec: ConvSpec) -> ConvSpec:
    return ConvSpec(
        kernel=spec.kernel + (1,),
        stride=spec.stride + (1,),
        padding=spec.padding + (0,),
        in_channels=spec.in_channels,
        out_channels=spec.out_channels,
    )


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    running_* are updated in place during train-mode forwards with
    running <- momentum * running + (1 - momentum) * batch.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c) or len(c) != 1:
            raise ShapeMismatchError("batchnorm state extents", self.gamma.shape, self.beta.shape)
        if not 0.0 < self.momentum < 1.0 or self.epsilon <= 0.0:
            raise ValueError("momentum must be in (0,1) and epsilon positive")


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str):
    """Normalize per channel over (batch, spatial) axes.

    Train mode uses batch statistics and updates the running ones; eval
    mode reads the running statistics and mutates nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    C = state.gamma.shape[0]
    if x.ndim < 2 or x.shape[1] != C:
        raise ShapeMismatchError("batchnorm channels", x.shape, (C,))
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - _bn_bcast(state.running_mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
        y = _bn_bcast(state.gamma, x.ndim) * xhat + _bn_bcast(state.beta, x.ndim)
        return y.astype(x.dtype, copy=False), None

    n = x.size // C
    if n < 2:
        raise ValueError(f"train-mode batchnorm needs >= 2 elements per channel, got {n}")
    axes = _bn_axes(x)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
    y = _bn_bcast(state.gamma, x.ndim) * xhat + _bn_bcast(state.beta, x.ndim)

    m = state.momentum
    state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
    state.running_var[...] = m * state.running_var + (1.0 - m) * var
    cache = (xhat, inv_std, state.gamma, n)
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(cache, grad_out: np.ndarray):
    """Train-mode adjoint including the batch-statistics dependence.

    Returns (dgamma, dbeta, dx).
    """
    if cache is None:
        raise ValueError("no cache: eval-mode batchnorm has no backward")
    xhat, inv_std, gamma, n = cache
    if grad_out.shape != xhat.shape:
        raise ShapeMismatchError("batchnorm grad_out", grad_out.shape, xhat.shape)
    axes = _bn_axes(grad_out)
    dbeta = grad_out.sum(axis=axes)
    dgamma = (grad_out * xhat).sum(axis=axes)
    dxhat = grad_out * _bn_bcast(gamma, grad_out.ndim)
    mean_dxhat = dxhat.mean(axis=axes)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
    dx = _bn_bcast(inv_std, grad_out.ndim) * (
        dxhat - _bn_bcast(mean_dxhat, grad_out.ndim) - xhat * _bn_bcast(mean_dxhat_xhat, grad_out.ndim)
    )
    return dgamma, dbeta, dx


# ---------------------------------------------------------------------------
# pooling

def maxpool_forward(x: np.ndarray, spec: ConvSpec):
    """Per-window maximum with -inf padding semantics.

    Returns (y, argmax) where argmax holds, per output element, the flat
    index of the winning element within that (batch, channel) slice of the
    unpadded input. Ties break toward the lowest linear index.
    """
    if x.ndim != spec.ndim + 2:
        raise ShapeMismatchError("maxpool input rank", x.shape, spec.kernel)
    if any(p >= k for p, k in zip(spec.padding, spec.kernel)):
        raise ValueError("maxpool padding must be < kernel so every window sees data")
    _check_out_extents(x.shape[2:], spec)

    if spec.ndim == 1:
        y2, (arg2, shape2) = maxpool_forward(_lift_1d(x), _spec_2d(spec))
        return y2[..., 0], (arg2[..., 0], x.shape)

    B, C, H, W = x.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    xr = x.reshape(B * C, 1, H, W)
    cols, (Ho, Wo) = _im2col(xr, spec.kernel, spec.stride, spec.padding, fill=-np.inf)
    widx = cols.argmax(axis=1)
    y = cols[np.arange(cols.shape[0]), widx].reshape(B * C, Ho, Wo).reshape(B, C, Ho, Wo)

    # window-local index -> unpadded input coordinates
    widx = widx.reshape(B * C, Ho, Wo)
    oh = np.arange(Ho)[:, None]
    ow = np.arange(Wo)[None, :]
    in_h = oh * sh - ph + widx // kw
    in_w = ow * sw - pw + widx % kw
    argmax = (in_h * W + in_w).reshape(B, C, Ho, Wo)
    return np.ascontiguousarray(y), (argmax, x.shape)


def maxpool_backward(cache, grad_out: np.ndarray):
    """Route each output gradient to the one input element that won."""
    argmax, x_shape = cache
    if grad_out.shape != argmax.shape:
        raise ShapeMismatchError("maxpool grad_out", grad_out.shape, argmax.shape)
    B, C = x_shape[0], x_shape[1]
    spatial = int(np.prod(x_shape[2:]))
    dxf = np.zeros((B * C, spatial), dtype=grad_out.dtype)
    rows = np.repeat(np.arange(B * C), argmax[0, 0].size)
    np.add.at(dxf, (rows, argmax.reshape(B * C, -1).ravel()), grad_out.reshape(B * C, -1).ravel())
    return dxf.reshape(x_shape)


def global_average_pool(x: np.ndarray):
    """Mean over every non-batch, non-channel axis; output (B, C).

    Defined for any spatial extent, which is what makes whole clips of
    arbitrary size processable.
    """
    if x.ndim < 3:
        raise ShapeMismatchError("global_average_pool input rank", x.shape, ("B", "C", "..."))
    n = int(np.prod(x.shape[2:]))
    if n < 1:
        raise ValueError("global_average_pool needs at least one spatial element")
    y = x.mean(axis=tuple(range(2, x.ndim)))
    return y, (x.shape, n)


def global_average_pool_backward(cache, grad_out: np.ndarray):
    x_shape, n = cache
    if grad_out.shape != x_shape[:2]:
        raise ShapeMismatchError("gap grad_out", grad_out.shape, x_shape[:2])
    g = (grad_out / n).reshape(x_shape[:2] + (1,) * (len(x_shape) - 2))
    return np.broadcast_to(g, x_shape).astype(grad_out.dtype, copy=True)


# ---------------------------------------------------------------------------
# dense head

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x @ w + b for x (B, D), w (D, K), b (K,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError("linear bias", b.shape, (w.shape[1],))
    return x @ w + b, (x, w)


def linear_backward(cache, grad_out: np.ndarray):
    x, w = cache
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeMismatchError("linear grad_out", grad_out.shape, (x.shape[0], w.shape[1]))
    dw = x.T @ grad_out
    db = grad_out.sum(axis=0)
    dx = grad_out @ w.T
    return dw, db, dx


def scaled_tanh(z: np.ndarray):
    """(tanh(z) + 1) / 2: squashes into (0, 1), 0.5 at the origin."""
    t = np.tanh(z)
    return (t + 1.0) / 2.0, t


def scaled_tanh_backward(cache, grad_out: np.ndarray):
    t = cache
    return grad_out * (1.0 - t * t) / 2.0


def relu_forward(x: np.ndarray):
    return max0(x), x > 0


def relu_backward(cache, grad_out: np.ndarray):
    return grad_out * cache


# ---------------------------------------------------------------------------
# residual block

@dataclass
class ResidualBlockParams:
    """Parameters for conv-BN-ReLU-conv-BN plus an identity or projection shortcut."""

    kind: str  # "identity" | "projection"
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    bn1: BatchNormState
    spec1: ConvSpec
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    bn2: BatchNormState
    spec2: ConvSpec
    shortcut_w: Optional[np.ndarray] = None
    shortcut_b: Optional[np.ndarray] = None
    shortcut_spec: Optional[ConvSpec] = None

    def __post_init__(self):
        if self.kind not in ("identity", "projection"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "identity":
            s1 = self.spec1
            if s1.in_channels != self.spec2.out_channels or any(s != 1 for s in s1.stride):
                raise ValueError(
                    "identity shortcut requires matching channels and unit stride, got "
                    f"in={s1.in_channels} out={self.spec2.out_channels} stride={s1.stride}"
                )
        elif self.shortcut_w is None or self.shortcut_spec is None:
            raise ValueError("projection block needs shortcut conv parameters")


def residual_block_forward(x: np.ndarray, blk: ResidualBlockParams, mode: str):
    """Main path conv-BN-ReLU-conv-BN, add shortcut, final ReLU."""
    h1, c_conv1 = conv_forward(x, blk.conv1_w, blk.conv1_b, blk.spec1)
    n1, c_bn1 = batchnorm_forward(h1, blk.bn1, mode)
    r1, c_relu1 = relu_forward(n1)
    h2, c_conv2 = conv_forward(r1, blk.conv2_w, blk.conv2_b, blk.spec2)
    n2, c_bn2 = batchnorm_forward(h2, blk.bn2, mode)
    if blk.kind == "projection":
        sc, c_sc = conv_forward(x, blk.shortcut_w, blk.shortcut_b, blk.shortcut_spec)
    else:
        sc, c_sc = x, None
    y, c_out = relu_forward(n2 + sc)
    cache = (c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_sc, c_out, blk.kind)
    return y, cache


def residual_block_backward(cache, grad_out: np.ndarray):
    """Returns ({param name -> grad}, dx) for a residual block."""
    c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_sc, c_out, kind = cache
    g = relu_backward(c_out, grad_out)
    grads = {}
    dgamma2, dbeta2, dh2 = batchnorm_backward(c_bn2, g)
    dw2, db2, dr1 = conv_backward(c_conv2, dh2)
    dn1 = relu_backward(c_relu1, dr1)
    dgamma1, dbeta1, dh1 = batchnorm_backward(c_bn1, dn1)
    dw1, db1, dx = conv_backward(c_conv1, dh1)
    grads.update(
        {
            "conv1.w": dw1,
            "conv1.b": db1,
            "bn1.gamma": dgamma1,
            "bn1.beta": dbeta1,
            "conv2.w": dw2,
            "conv2.b": db2,
            "bn2.gamma": dgamma2,
            "bn2.beta": dbeta2,
        }
    )
    if kind == "projection":
        dwsc, dbsc, dsc = conv_backward(c_sc, g)
        grads["shortcut.w"] = dwsc
        grads["shortcut.b"] = dbsc
        dx = dx + dsc
    else:
        dx = dx + g
    return grads, dx


# ---------------------------------------------------------------------------
# recurrent cell

def _sigmoid(x):
    # tanh form avoids exp overflow for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step with gate packing (input, forget, cell, output).

    x (B, D), h_prev/c_prev (B, H), wx (D, 4H), wh (H, 4H), b (4H,).
    Returns (h, c, cache).
    """
    H = h_prev.shape[1]
    if wx.shape != (x.shape[1], 4 * H) or wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatchError("lstm parameter extents", wx.shape, (x.shape[1], 4 * H))
    if h_prev.shape != c_prev.shape or x.shape[0] != h_prev.shape[0]:
        raise ShapeMismatchError("lstm state extents", h_prev.shape, c_prev.shape)
    z = x @ wx + h_prev @ wh + b
    zi, zf, zg, zo = z[:, :H], z[:, H : 2 * H], z[:, 2 * H : 3 * H], z[:, 3 * H :]
    i = _sigmoid(zi)
    f = _sigmoid(zf)
    g = np.tanh(zg)
    o = _sigmoid(zo)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, wx, wh, i, f, g, o, tc)
    return h, c, cache


def lstm_step_backward(cache, dh, dc):
    """Adjoint of lstm_step. dh/dc are gradients flowing into h_t and c_t.

    Returns (dx, dh_prev, dc_prev, dwx, dwh, db).
    """
    x, h_prev, c_prev, wx, wh, i, f, g, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    df = dct * c_prev
    dg = dct * i
    dc_prev = dct * f
    dzi = di * i * (1.0 - i)
    dzf = df * f * (1.0 - f)
    dzg = dg * (1.0 - g * g)
    dzo = do * o * (1.0 - o)
    dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
    dwx = x.T @ dz
    dwh = h_prev.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ wx.T
    dh_prev = dz @ wh.T
    return dx, dh_prev, dc_prev, dwx, dwh, db


# ---------------------------------------------------------------------------
# dropout (inverted scaling)

def dropout_forward(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator):
    """Zero units independently with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(cache, grad_out: np.ndarray):
    if cache is None:
        return grad_out
    return grad_out * cache
