"""Dense NCHW tensor operations with explicit forward and backward passes.

Tensors are plain C-ordered numpy arrays of shape (N, C, H, W); the dtype is
the precision (float64 for verification, float32 allowed for training).
Matrices are 2-D arrays.  All functions are pure: inputs are never modified.

Layouts fixed here and relied on elsewhere:

* ``im2col`` rows are ordered (c, dy, dx) lexicographically and columns
  (n, h_out, w_out) lexicographically.
* Kernels are (C_out, C_in, k, k); a kernel reshaped to (C_out, C_in*k*k)
  multiplies an ``im2col`` matrix directly.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, InputError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _require_4d(x, name):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a 4-D (N, C, H, W) array, got shape {shape}")


def as_tensor(data, precision="double"):
    """Copy ``data`` into a C-ordered 4-D array of the requested precision."""
    dtype = {"double": np.float64, "single": np.float32}[precision]
    x = np.ascontiguousarray(np.array(data, dtype=dtype))
    _require_4d(x, "tensor")
    return x


def precision_of(x):
    return "single" if x.dtype == np.float32 else "double"


# -- matrix products ---------------------------------------------------------

def matmul(a, b):
    """Matrix product with a fixed left-to-right summation order.

    ``out[i, j] = ((a[i,0] b[0,j] + a[i,1] b[1,j]) + a[i,2] b[2,j]) + ...``
    with every product rounded before it is added, so the result is
    bit-identical to a plain triple loop.  Leading batch dimensions
    broadcast as in ``np.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    inner = a.shape[-1]
    dtype = np.result_type(a, b)
    if inner == 0:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        return np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=dtype)
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    acc = np.array(acc, dtype=dtype, copy=True)
    term = np.empty_like(acc)
    for p in range(1, inner):
        np.multiply(a[..., :, p:p + 1], b[..., p:p + 1, :], out=term)
        acc += term
    return acc


def _mm(a, b):
    # Verification paths (double) use the fixed-order product; single
    # precision training goes through BLAS.
    if a.dtype == np.float32 and b.dtype == np.float32:
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
        return np.matmul(a, b)
    return matmul(a, b)


# -- im2col ------------------------------------------------------------------

def _pad_pair(pad):
    if isinstance(pad, (tuple, list)):
        return int(pad[0]), int(pad[1])
    return int(pad), int(pad)


def same_padding(size, k, stride):
    """(before, after) padding giving ``floor((size + 2*(k//2) - k) / stride) + 1``
    outputs.  ``after`` is negative when trailing input is never reached."""
    half = k // 2
    return half, half - (size + 2 * half - k) % stride


def output_size(size, k, stride, pad):
    before, after = _pad_pair(pad)
    if k < 1 or stride < 1 or before < 0:
        raise GeometryError(f"invalid geometry k={k}, stride={stride}, pad={pad}")
    span = size + before + after - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"input size {size} with k={k}, stride={stride}, pad={pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _pad_spatial(x, before, after):
    if after < 0:
        x = x[:, :, :after, :after]
        after = 0
    if before or after:
        x = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))
    return x


def im2col(x, k, stride=1, pad=0):
    """Lower a (N, C, H, W) tensor to a (C*k*k, N*H_out*W_out) matrix.

    ``pad`` is an int or a (before, after) pair applied to both spatial axes.
    """
    _require_4d(x, "input")
    n, c, h, w = x.shape
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    xp = _pad_spatial(x, *_pad_pair(pad))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
            cols[:, dy, dx] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols, x_shape, k, stride=1, pad=0):
    """Adjoint of ``im2col``: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    if cols.shape != (c * k * k, n * ho * wo):
        raise ShapeError(f"column matrix {cols.shape} does not match input {x_shape}")
    before, after = _pad_pair(pad)
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + before + max(after, 0), w + before + max(after, 0)), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += (
                cols[:, dy, dx].transpose(1, 0, 2, 3)
            )
    return np.ascontiguousarray(xp[:, :, before:before + h, before:before + w])


# -- convolution -------------------------------------------------------------

def _check_kernel(x, kernel, groups):
    _require_4d(x, "input")
    if kernel.ndim != 5:
        raise ShapeError(f"grouped kernel must be 5-D, got shape {kernel.shape}")
    g, _, cin_g, k, k2 = kernel.shape
    if g != groups or k != k2:
        raise ShapeError(f"kernel shape {kernel.shape} is not {groups} square kernels")
    if x.shape[1] != g * cin_g:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel {kernel.shape} expects {g * cin_g}"
        )
    return k


def group_conv2d_forward(x, kernel, stride=1, pad=None):
    """Grouped convolution.

    ``kernel`` has shape (G, C_out_g, C_in_g, k, k).  Output channels
    ``[g*C_out_g, (g+1)*C_out_g)`` depend only on input channels
    ``[g*C_in_g, (g+1)*C_in_g)``.
    """
    groups = kernel.shape[0]
    k = _check_kernel(x, kernel, groups)
    n, _, h, w = x.shape
    if pad is None:
        if h != w:
            raise GeometryError(f"default padding needs square inputs, got {h}x{w}")
        pad = same_padding(h, k, stride)
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    g, cout_g, cin_g = kernel.shape[:3]
    cols = im2col(x, k, stride, pad).reshape(g, cin_g * k * k, n * ho * wo)
    out = _mm(kernel.reshape(g, cout_g, cin_g * k * k), cols)
    out = out.reshape(g * cout_g, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


def group_conv2d_backward(x, kernel, grad_out, stride=1, pad=None):
    groups = kernel.shape[0]
    k = _check_kernel(x, kernel, groups)
    n, _, h, w = x.shape
    if pad is None:
        if h != w:
            raise GeometryError(f"default padding needs square inputs, got {h}x{w}")
        pad = same_padding(h, k, stride)
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    g, cout_g, cin_g = kernel.shape[:3]
    if grad_out.shape != (n, g * cout_g, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(n, g * cout_g, ho, wo)}"
        )
    cols = im2col(x, k, stride, pad).reshape(g, cin_g * k * k, n * ho * wo)
    gmat = grad_out.transpose(1, 0, 2, 3).reshape(g, cout_g, n * ho * wo)
    kmat = kernel.reshape(g, cout_g, cin_g * k * k)
    grad_kernel = _mm(gmat, cols.transpose(0, 2, 1)).reshape(kernel.shape)
    grad_cols = _mm(kmat.transpose(0, 2, 1), gmat).reshape(g * cin_g * k * k, n * ho * wo)
    grad_x = col2im(grad_cols, x.shape, k, stride, pad)
    return grad_x, np.ascontiguousarray(grad_kernel)


def conv2d_forward(x, kernel, stride=1, pad=None):
    """Bias-free dense convolution; ``kernel`` is (C_out, C_in, k, k)."""
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    return group_conv2d_forward(x, kernel[None], stride, pad)


def conv2d_backward(x, kernel, grad_out, stride=1, pad=None):
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    grad_x, grad_k = group_conv2d_backward(x, kernel[None], grad_out, stride, pad)
    return grad_x, grad_k[0]


# -- batch norm --------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool = field(default=True)


def batchnorm_forward(x, gamma, beta, state, training=True):
    """Per-channel batch norm over (N, H, W).

    In training mode the batch statistics normalise the input and the
    running statistics are updated in place with momentum 0.9.
    """
    _require_4d(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state.running_mean *= BN_MOMENTUM
        state.running_mean += (1 - BN_MOMENTUM) * mean
        state.running_var *= BN_MOMENTUM
        state.running_var += (1 - BN_MOMENTUM) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = x_hat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std, gamma, training)


def batchnorm_backward(cache, grad_out):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    x_hat = cache.x_hat
    if grad_out.shape != x_hat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {x_hat.shape}")
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std)[None, :, None, None]
    if not cache.training:
        return grad_out * scale, grad_gamma, grad_beta
    count = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    grad_x = scale * (
        grad_out
        - grad_beta[None, :, None, None] / count
        - x_hat * grad_gamma[None, :, None, None] / count
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# -- the rest of the head ----------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def global_avg_pool_forward(x):
    _require_4d(x, "input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out):
    n, c, h, w = x_shape
    g = grad_out / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], x_shape))


def fully_connected_forward(x, weight, bias):
    """``x`` (N, D_in), ``weight`` (D_out, D_in), ``bias`` (D_out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    return _mm(x, weight.T) + bias[None, :]


def fully_connected_backward(x, weight, grad_out):
    """Returns (grad_input, grad_weight, grad_bias)."""
    grad_x = _mm(grad_out, weight)
    grad_w = _mm(grad_out.T, x)
    return grad_x, grad_w, grad_out.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n
