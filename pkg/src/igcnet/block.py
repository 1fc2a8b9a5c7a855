"""Interleaved group convolution blocks.

A block of width G = L*M runs

1. a primary k x k group convolution over L partitions of M channels,
2. an interleave sending primary channel ``l*M + m`` to position ``m*L + l``,
3. a secondary 1 x 1 group convolution over M partitions of L channels,
4. the inverse interleave back to primary order.

Nothing nonlinear sits between the two group convolutions; batch norm and
ReLU, when enabled, come after step 4.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class IgcConfig:
    L: int
    M: int
    k: int = 3
    stride: int = 1
    with_bn_relu: bool = False
    # Input channels per primary partition; defaults to M.  Stage-transition
    # blocks take the previous stage's width in.
    M_in: int = None
    # Put the k x k kernel on the secondary convolution instead (and 1 x 1 on
    # the primary).
    spatial_secondary: bool = False

    def __post_init__(self):
        for name in ("L", "M", "k", "stride"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.k % 2 == 0:
            raise ConfigError(f"kernel side k must be odd, got {self.k}")
        if self.M_in is None:
            object.__setattr__(self, "M_in", self.M)
        elif self.M_in < 1:
            raise ConfigError(f"M_in must be positive, got {self.M_in}")

    @property
    def G(self):
        return self.L * self.M

    @property
    def S(self):
        return self.k * self.k

    @property
    def in_channels(self):
        return self.L * self.M_in

    @property
    def primary_k(self):
        return 1 if self.spatial_secondary else self.k

    @property
    def secondary_k(self):
        return self.k if self.spatial_secondary else 1

    def param_count(self):
        return (self.L * self.M * self.M_in * self.primary_k ** 2
                + self.M * self.L * self.L * self.secondary_k ** 2)


@dataclass
class IgcBlockParams:
    """Kernels of one block.

    ``primary`` is (L, M, M_in, k, k): one (M, M_in, k, k) kernel per
    partition.  ``secondary`` is (M, L, L): one L x L matrix per secondary
    partition, or (M, L, L, k, k) when the spatial kernel is secondary.
    """

    primary: np.ndarray
    secondary: np.ndarray
    gamma: np.ndarray = None
    beta: np.ndarray = None
    bn_state: tc.BatchNormState = None

    def param_count(self):
        n = self.primary.size + self.secondary.size
        if self.gamma is not None:
            n += self.gamma.size + self.beta.size
        return n

    def check(self, config):
        kp, ks = config.primary_k, config.secondary_k
        want_p = (config.L, config.M, config.M_in, kp, kp)
        want_s = (config.M, config.L, config.L) + ((ks, ks) if ks > 1 else ())
        if self.primary.shape != want_p or self.secondary.shape != want_s:
            raise ConfigError(
                f"params {self.primary.shape}/{self.secondary.shape} do not match "
                f"config L={config.L}, M={config.M}: expected {want_p}/{want_s}"
            )
        if config.with_bn_relu and self.gamma is None:
            raise ConfigError("config asks for BN+ReLU but params carry no batch-norm state")


@dataclass(frozen=True)
class PermutationSpec:
    forward_index: np.ndarray
    inverse_index: np.ndarray


def permutation_indices(L, M):
    """Interleave gather indices.

    ``y[:, forward_index]`` reorders primary layout to secondary layout
    (``forward_index[m*L + l] = l*M + m``); ``inverse_index`` undoes it.
    """
    fwd = np.arange(L * M).reshape(L, M).T.reshape(-1)
    inv = np.empty_like(fwd)
    inv[fwd] = np.arange(L * M)
    return PermutationSpec(fwd, inv)


def init_igc_params(config, rng, dtype=np.float64):
    """He-normal init; BN gamma=1, beta=0 when the config asks for BN."""
    kp, ks = config.primary_k, config.secondary_k
    p_shape = (config.L, config.M, config.M_in, kp, kp)
    s_shape = (config.M, config.L, config.L) + ((ks, ks) if ks > 1 else ())
    primary = rng.child("primary").normal(p_shape) * np.sqrt(2.0 / (config.M_in * kp * kp))
    secondary = rng.child("secondary").normal(s_shape) * np.sqrt(2.0 / (config.L * ks * ks))
    params = IgcBlockParams(primary.astype(dtype), secondary.astype(dtype))
    if config.with_bn_relu:
        params.gamma = np.ones(config.G, dtype=dtype)
        params.beta = np.zeros(config.G, dtype=dtype)
        params.bn_state = tc.BatchNormState.fresh(config.G, dtype)
    return params


def _secondary_kernel(secondary):
    return secondary if secondary.ndim == 5 else secondary[..., None, None]


def primary_group_conv(x, primary, stride=1, pad=None):
    L = primary.shape[0]
    if x.ndim != 4 or x.shape[1] % L:
        raise ConfigError(f"{x.shape[1] if x.ndim == 4 else x.shape} channels do not split into {L} partitions")
    return tc.group_conv2d_forward(x, primary, stride, pad)


def secondary_group_conv(x, secondary, stride=1):
    """Secondary convolution on an input already in secondary layout."""
    M = secondary.shape[0]
    if x.ndim != 4 or x.shape[1] % M:
        raise ConfigError(f"{x.shape[1] if x.ndim == 4 else x.shape} channels do not split into {M} partitions")
    return tc.group_conv2d_forward(x, _secondary_kernel(secondary), stride)


def _strides(config):
    if config.spatial_secondary:
        return 1, config.stride
    return config.stride, 1


def igc_block_forward(x, config, params, training=True, cache=None):
    """Path-form forward pass.

    If ``cache`` is a dict it is filled with what ``igc_block_backward``
    needs.
    """
    params.check(config)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ConfigError(f"input with shape {x.shape} does not have {config.in_channels} channels")
    perm = permutation_indices(config.L, config.M)
    s_p, s_s = _strides(config)
    y = primary_group_conv(x, params.primary, s_p)
    y_bar = y[:, perm.forward_index]
    z_bar = secondary_group_conv(y_bar, params.secondary, s_s)
    out = z_bar[:, perm.inverse_index]
    if cache is not None:
        cache.update(x=x, y_bar=y_bar)
    if config.with_bn_relu:
        pre, bn_cache = tc.batchnorm_forward(out, params.gamma, params.beta, params.bn_state, training)
        out = tc.relu_forward(pre)
        if cache is not None:
            cache.update(bn=bn_cache, pre_relu=pre)
    return out


@dataclass
class IgcGrads:
    primary: np.ndarray
    secondary: np.ndarray
    gamma: np.ndarray = None
    beta: np.ndarray = None
    extra: dict = field(default_factory=dict)


def igc_block_backward(config, params, cache, grad_out):
    """Gradients for input and all kernels; ``cache`` from the forward pass."""
    x, y_bar = cache["x"], cache["y_bar"]
    perm = permutation_indices(config.L, config.M)
    s_p, s_s = _strides(config)
    grads = IgcGrads(None, None)
    g = grad_out
    if config.with_bn_relu:
        g = tc.relu_backward(cache["pre_relu"], g)
        g, grads.gamma, grads.beta = tc.batchnorm_backward(cache["bn"], g)
    if g.shape[1] != config.G:
        raise ShapeError(f"grad_out has {g.shape[1]} channels, block width is {config.G}")
    g_z_bar = g[:, perm.forward_index]
    g_y_bar, g_sec = tc.group_conv2d_backward(y_bar, _secondary_kernel(params.secondary), g_z_bar, s_s)
    grads.secondary = g_sec.reshape(params.secondary.shape)
    g_y = g_y_bar[:, perm.inverse_index]
    g_x, grads.primary = tc.group_conv2d_backward(x, params.primary, g_y, s_p)
    return g_x, grads


# -- group + point-wise alternative ------------------------------------------

@dataclass
class GpcParams:
    """``primary`` (L, M, M_in, k, k) and a dense 1 x 1 ``pointwise`` (G, G)."""

    primary: np.ndarray
    pointwise: np.ndarray

    def param_count(self):
        return self.primary.size + self.pointwise.size


def gpc_param_count(L, M, S):
    return L * M * M * S + (L * M) ** 2


def gpc_block_forward(x, L, M, k, params, stride=1, cache=None):
    G = L * M
    if params.primary.shape[:2] != (L, M) or params.pointwise.shape != (G, G):
        raise ConfigError(
            f"GPC params {params.primary.shape}/{params.pointwise.shape} do not match L={L}, M={M}"
        )
    if params.primary.shape[-1] != k:
        raise ConfigError(f"primary kernel side {params.primary.shape[-1]} != k={k}")
    y = primary_group_conv(x, params.primary, stride)
    out = tc.conv2d_forward(y, params.pointwise[:, :, None, None], 1, 0)
    if cache is not None:
        cache.update(x=x, y=y)
    return out


def gpc_block_backward(params, cache, grad_out, stride=1):
    """Returns (grad_input, grad_primary, grad_pointwise)."""
    g_y, g_pw = tc.conv2d_backward(cache["y"], params.pointwise[:, :, None, None], grad_out, 1, 0)
    g_x, g_p = tc.group_conv2d_backward(cache["x"], params.primary, g_y, stride)
    return g_x, g_p, g_pw[:, :, 0, 0]
