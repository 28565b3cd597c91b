"""Layer forward/backward rules.

Adder layers respond with the negated lp distance between input patches and
filter templates; their training gradients are deliberate surrogates rather
than the true (sub)gradients:

* filter gradient: X - F in full-precision mode (for every p), or its sign
  in sign mode,
* input gradient: sgn(F - X) * |F - X|**(p-1), which interpolates between
  the sign (p=1) and the linear difference (p=2).

At p=2 both surrogates equal exactly half of the analytic gradient of the
squared-distance response; the missing constant is absorbed by the learning
rate.  Reference multiplication-based convolution, batch norm, ReLU and the
two loss heads use exact analytic gradients and are finite-difference
checked in the test suite.

Inputs are channel-last, either a single image (H, W, C) or a batch
(N, H, W, C).  Fully connected layers are 1x1 layers on (N, 1, 1, C).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import (RngState, Tensor, col2im_batch, conv_output_hw,
                     im2col_batch, randn_seeded)


class GradientMode(enum.Enum):
    SIGN = "sign"
    FULL_PRECISION = "full"


@dataclass
class AdderLayerParams:
    filters: Tensor  # (d, d, c_in, c_out)
    kernel: int
    stride: int = 1
    padding: int = 0
    p: float = 1.0

    def __post_init__(self):
        if not 1.0 <= self.p <= 2.0:
            raise ValueError(f"p must lie in [1, 2], got {self.p}")


@dataclass
class ConvLayerParams:
    filters: Tensor  # (d, d, c_in, c_out)
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1


def init_adder_params(rng: RngState, kernel: int, c_in: int, c_out: int,
                      stride: int = 1, padding: int = 0, p: float = 1.0) -> AdderLayerParams:
    # Unit-scale templates: inputs arrive batch-normalized, so matching
    # magnitudes keeps the distances informative.
    filters = randn_seeded(rng, (kernel, kernel, c_in, c_out))
    return AdderLayerParams(filters, kernel, stride, padding, p)


def init_conv_params(rng: RngState, kernel: int, c_in: int, c_out: int,
                     stride: int = 1, padding: int = 0) -> ConvLayerParams:
    # Var[F] = 1/(d^2 c_in) keeps output variance consistent with the input.
    std = 1.0 / np.sqrt(kernel * kernel * c_in)
    filters = randn_seeded(rng, (kernel, kernel, c_in, c_out), stddev=std)
    return ConvLayerParams(filters, kernel, stride, padding)


def init_bn_params(channels: int, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormParams:
    return BatchNormParams(np.ones(channels), np.zeros(channels),
                           np.zeros(channels), np.ones(channels), eps, momentum)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")


def _filters_matrix(filters: Tensor) -> Tensor:
    d, d2, c_in, c_out = filters.shape
    return filters.reshape(d * d2 * c_in, c_out)


def _check_geometry(filters, kernel, x4):
    d, d2, c_in, c_out = filters.shape
    if d != kernel or d2 != kernel:
        raise ValueError(f"filter bank {filters.shape} disagrees with kernel {kernel}")
    if x4.shape[-1] != c_in:
        raise ValueError(f"input has {x4.shape[-1]} channels, filters expect {c_in}")


def _layer_cols(params, x4, cols):
    if cols is None:
        cols = im2col_batch(x4, params.kernel, params.stride, params.padding)
    return cols


def _upstream_matrix(upstream, n, oh, ow, c_out, squeeze):
    upstream = np.asarray(upstream, dtype=np.float64)
    if squeeze and upstream.ndim == 3:
        upstream = upstream[None]
    if upstream.shape != (n, oh, ow, c_out):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"{(n, oh, ow, c_out)}")
    return upstream.reshape(n * oh * ow, c_out)


# ---------------------------------------------------------------------------
# adder layers
# ---------------------------------------------------------------------------

def adder_forward(params: AdderLayerParams, x, cols=None) -> Tensor:
    """Negated lp distance between every patch and every filter template.

    Output elements are always <= 0: each is a negated sum of nonnegative
    terms.
    """
    if not 1.0 <= params.p <= 2.0:
        raise ValueError(f"p must lie in [1, 2], got {params.p}")
    x4, squeeze = _as_batch(x)
    _check_geometry(params.filters, params.kernel, x4)
    n, h, w, _ = x4.shape
    oh, ow = conv_output_hw(h, w, params.kernel, params.stride, params.padding)
    cols = _layer_cols(params, x4, cols)
    fmat = _filters_matrix(params.filters)
    y = kernels.lp_distance_forward(cols, fmat, params.p)
    y = y.reshape(n, oh, ow, fmat.shape[1])
    return y[0] if squeeze else y


def adder_grad_filters(params: AdderLayerParams, x, upstream,
                       mode: GradientMode = GradientMode.FULL_PRECISION,
                       cols=None) -> Tensor:
    """Surrogate filter gradient, accumulated over all output positions."""
    x4, squeeze = _as_batch(x)
    _check_geometry(params.filters, params.kernel, x4)
    n, h, w, _ = x4.shape
    oh, ow = conv_output_hw(h, w, params.kernel, params.stride, params.padding)
    fmat = _filters_matrix(params.filters)
    up = _upstream_matrix(upstream, n, oh, ow, fmat.shape[1], squeeze)
    cols = _layer_cols(params, x4, cols)
    g = kernels.lp_grad_filters(cols, fmat, up, sign_mode=(mode == GradientMode.SIGN))
    return g.reshape(params.filters.shape)


def adder_grad_input(params: AdderLayerParams, x, upstream, cols=None) -> Tensor:
    """Surrogate input gradient sgn(F - X)|F - X|^(p-1), routed through col2im."""
    x4, squeeze = _as_batch(x)
    _check_geometry(params.filters, params.kernel, x4)
    n, h, w, _ = x4.shape
    oh, ow = conv_output_hw(h, w, params.kernel, params.stride, params.padding)
    fmat = _filters_matrix(params.filters)
    up = _upstream_matrix(upstream, n, oh, ow, fmat.shape[1], squeeze)
    cols = _layer_cols(params, x4, cols)
    gcols = kernels.lp_grad_input_cols(cols, fmat, up, params.p)
    gx = col2im_batch(gcols, x4.shape, params.kernel, params.stride, params.padding)
    return gx[0] if squeeze else gx


# ---------------------------------------------------------------------------
# reference convolution (cross-correlation)
# ---------------------------------------------------------------------------

def conv_forward(params: ConvLayerParams, x, cols=None) -> Tensor:
    """Cross-correlation of the input with the filter bank via im2col + GEMM."""
    x4, squeeze = _as_batch(x)
    _check_geometry(params.filters, params.kernel, x4)
    n, h, w, _ = x4.shape
    oh, ow = conv_output_hw(h, w, params.kernel, params.stride, params.padding)
    cols = _layer_cols(params, x4, cols)
    fmat = _filters_matrix(params.filters)
    y = (cols @ fmat).reshape(n, oh, ow, fmat.shape[1])
    return y[0] if squeeze else y


def conv_grad(params: ConvLayerParams, x, upstream, cols=None):
    """Exact analytic gradients of the cross-correlation: (dF, dX)."""
    x4, squeeze = _as_batch(x)
    _check_geometry(params.filters, params.kernel, x4)
    n, h, w, _ = x4.shape
    oh, ow = conv_output_hw(h, w, params.kernel, params.stride, params.padding)
    fmat = _filters_matrix(params.filters)
    up = _upstream_matrix(upstream, n, oh, ow, fmat.shape[1], squeeze)
    cols = _layer_cols(params, x4, cols)
    d_filters = (cols.T @ up).reshape(params.filters.shape)
    d_cols = up @ fmat.T
    dx = col2im_batch(d_cols, x4.shape, params.kernel, params.stride, params.padding)
    return d_filters, (dx[0] if squeeze else dx)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x):
    return tuple(range(x.ndim - 1))


def bn_forward(params: BatchNormParams, x, training: bool,
               update_running: bool = True) -> Tensor:
    """Per-channel normalization over all leading axes.

    Training mode uses biased batch statistics and (optionally) updates the
    running estimates by exponential moving average; eval mode applies the
    running estimates.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = _bn_axes(x)
    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 2:
            raise ValueError("training-mode batch norm needs at least 2 samples")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            mom = params.momentum
            params.running_mean *= 1.0 - mom
            params.running_mean += mom * mean
            params.running_var *= 1.0 - mom
            params.running_var += mom * var
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    return params.gamma * (x - mean) * inv + params.beta


def bn_backward(params: BatchNormParams, x, upstream):
    """Full batch-statistics gradient (the normalizing mean and variance are
    themselves functions of the batch): returns (dx, dgamma, dbeta)."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    axes = _bn_axes(x)
    m = float(np.prod([x.shape[a] for a in axes]))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean) * inv
    d_beta = upstream.sum(axis=axes)
    d_gamma = (upstream * xhat).sum(axis=axes)
    dx = (params.gamma * inv / m) * (
        m * upstream - d_beta - xhat * d_gamma)
    return dx, d_gamma, d_beta


# ---------------------------------------------------------------------------
# activation, pooling, losses
# ---------------------------------------------------------------------------

def relu(x, upstream=None) -> Tensor:
    """Forward max(x, 0); with ``upstream`` given, the backward pass instead.

    The subgradient at exactly 0 is taken as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if upstream is None:
        return np.maximum(x, 0.0)
    upstream = np.asarray(upstream, dtype=np.float64)
    return upstream * (x > 0.0)


def maxpool2_forward(x):
    """2x2/stride-2 max pooling; returns (output, switch indices for backward)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even extents, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    switches = win.argmax(axis=-1)  # first max wins: deterministic under ties
    out = np.take_along_axis(win, switches[..., None], axis=-1)[..., 0]
    return out, switches


def maxpool2_backward(switches, upstream, x_shape):
    n, h, w, c = x_shape
    win = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(win, switches[..., None], upstream[..., None], axis=-1)
    win = win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return win.reshape(n, h, w, c)


def avgpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even extents, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_backward(upstream, x_shape):
    n, h, w, c = x_shape
    out = np.repeat(np.repeat(upstream, 2, axis=1), 2, axis=2)
    return out * 0.25


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of a stable softmax; grad is (softmax - onehot)/N."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = expz / denom
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits, labels):
    """Binary cross entropy on raw logits in the stable log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != labels shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary 0/1")
    n = z.size
    loss = float((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    grad = (sigmoid(z) - y) / n
    return loss, grad


# ---------------------------------------------------------------------------
# squared-distance vs cross-correlation identity
# ---------------------------------------------------------------------------

def l2_adder_conv_residual(adder_out, conv_out, x, params) -> float:
    """Max residual of Y_l2 = 2*Y_conv - |patch|^2 - |filter|^2.

    The p=2 adder response is an exact affine transform of the convolution
    response; a nonzero residual beyond float rounding means one of the two
    forward paths is wrong.
    """
    x4, _ = _as_batch(x)
    cols = im2col_batch(x4, params.kernel, params.stride, params.padding)
    fmat = _filters_matrix(params.filters)
    x2 = np.einsum("rk,rk->r", cols, cols)
    f2 = np.einsum("kt,kt->t", fmat, fmat)
    a = np.asarray(adder_out, dtype=np.float64).reshape(cols.shape[0], fmat.shape[1])
    c = np.asarray(conv_out, dtype=np.float64).reshape(cols.shape[0], fmat.shape[1])
    residual = a - 2.0 * c + x2[:, None] + f2[None, :]
    return float(np.abs(residual).max())
