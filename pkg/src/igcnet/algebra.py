"""Explicit matrix view of an IGC block and special-case constructions.

At one spatial position a block maps the gathered input vector
``x = [z_1; ...; z_L]`` (each ``z_l`` holds the k*k taps of the M channels
of partition l, channel-major) to ``x' = P Wd P^T Wp x``.  Here ``Wp`` is
block diagonal with L blocks of M x (M*S), ``Wd`` is block diagonal with M
blocks of L x L and ``P`` is the interleave permutation.

The constructions below return ordinary block parameters plus an input
replication count, so they run through the same ``igc_block_forward`` as
any other block.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import tensor as tc
from .block import IgcBlockParams, IgcConfig, igc_block_forward, permutation_indices
from .errors import ConfigError, ShapeError
from .rng import CounterRNG

TOLERANCE_K1 = 1e-12
TOLERANCE_SPATIAL = 1e-10


@dataclass(frozen=True)
class SparseFactorSet:
    Wp: np.ndarray
    Wd: np.ndarray
    P: np.ndarray
    L: int
    M: int
    k: int

    @property
    def G(self):
        return self.L * self.M


def l0_norm(matrix):
    return int(np.count_nonzero(matrix))


def assemble_factors(config, params):
    if config.spatial_secondary or config.M_in != config.M:
        raise ConfigError("factor view needs a square block with the spatial kernel on the primary side")
    params.check(config)
    L, M, S = config.L, config.M, config.S
    dtype = params.primary.dtype
    Wp = np.zeros((L * M, L * M * S), dtype=dtype)
    for l in range(L):
        Wp[l * M:(l + 1) * M, l * M * S:(l + 1) * M * S] = params.primary[l].reshape(M, M * S)
    Wd = np.zeros((M * L, M * L), dtype=dtype)
    for m in range(M):
        Wd[m * L:(m + 1) * L, m * L:(m + 1) * L] = params.secondary[m]
    perm = permutation_indices(L, M)
    P = np.zeros((L * M, L * M), dtype=dtype)
    # x' = P z_bar with x'[l*M + m] = z_bar[m*L + l]
    P[np.arange(L * M), perm.inverse_index] = 1
    return SparseFactorSet(Wp, Wd, P, L, M, config.k)


def compose_kernel(factors):
    """Dense (G, G*S) matrix ``P Wd P^T Wp``."""
    f = factors
    if f.Wd.shape != (f.G, f.G) or f.P.shape != (f.G, f.G) or f.Wp.shape[0] != f.G:
        raise ShapeError(f"factor shapes Wp={f.Wp.shape}, Wd={f.Wd.shape}, P={f.P.shape} are not conformable")
    return tc.matmul(tc.matmul(tc.matmul(f.P, f.Wd), f.P.T), f.Wp)


def composite_conv_kernel(factors):
    """The composed kernel as a (G, G, k, k) convolution kernel."""
    return compose_kernel(factors).reshape(factors.G, factors.G, factors.k, factors.k)


# -- special cases -----------------------------------------------------------

@dataclass
class IgcConstruction:
    """A block whose input is the real input repeated ``replication`` times."""

    config: IgcConfig
    params: IgcBlockParams
    replication: int

    def forward(self, x):
        return igc_block_forward(replicate(x, self.replication), self.config, self.params)

    def factors(self):
        return assemble_factors(self.config, self.params)


def replicate(x, times):
    return np.concatenate([x] * times, axis=1)


def _as_kernel(W):
    W = np.asarray(W)
    if W.ndim == 2:
        W = W[:, :, None, None]
    if W.ndim != 4 or W.shape[0] != W.shape[1] or W.shape[2] != W.shape[3]:
        raise ConfigError(f"expected a square (C, C, k, k) kernel or (C, C) matrix, got {W.shape}")
    return W


def regular_conv_as_igc(W, L=4):
    """IGC form of a dense C -> C convolution.

    ``L`` must be a perfect square q*q.  The kernel is cut into a q x q grid
    of (C/q, C/q) blocks ``W_ij`` and the primary partitions are
    ``W_00, W_01, ..., W_(q-1)(q-1)`` over the input repeated q times.  Row
    r of every secondary block sums the q partitions ``(r mod q)*q + j``,
    so the output is the dense result repeated q times.  For L=4 this is
    the block pattern [[1,1,0,0],[0,0,1,1],[1,1,0,0],[0,0,1,1]].
    """
    W = _as_kernel(W)
    C, k = W.shape[0], W.shape[2]
    q = math.isqrt(L)
    if L < 1 or q * q != L:
        raise ConfigError(f"L={L} is not a perfect square; the block grid needs L = q*q")
    if C % q:
        raise ConfigError(f"C={C} channels cannot be cut into a {q} x {q} block grid")
    M = C // q
    primary = np.empty((L, M, M, k, k), dtype=W.dtype)
    for i in range(q):
        for j in range(q):
            primary[i * q + j] = W[i * M:(i + 1) * M, j * M:(j + 1) * M]
    block = np.zeros((L, L), dtype=W.dtype)
    for r in range(L):
        block[r, (r % q) * q:(r % q) * q + q] = 1
    secondary = np.broadcast_to(block, (M, L, L)).copy()
    config = IgcConfig(L=L, M=M, k=k)
    return IgcConstruction(config, IgcBlockParams(primary, secondary), replication=q)


def channelwise_extreme_as_igc(W):
    """Dense C -> C convolution as a channel-wise primary (L = C*C, M = 1).

    Partition ``i*C + j`` filters input channel j with ``W[i, j]``; the single
    secondary block has, in row r, C ones in slot ``r mod C``.
    """
    W = _as_kernel(W)
    C = W.shape[0]
    return regular_conv_as_igc(W, L=C * C)


def summation_fusion_as_igc(branch_kernels):
    """L parallel M -> M convolutions on one input, outputs summed.

    ``branch_kernels`` is a sequence of L kernels (M, M, k, k).  Every
    secondary block is all ones, so each of the L output partitions holds
    the branch sum.
    """
    kernels = [np.asarray(b) for b in branch_kernels]
    if not kernels:
        raise ConfigError("summation fusion needs at least one branch")
    shape = kernels[0].shape
    if len(shape) != 4 or shape[0] != shape[1] or shape[2] != shape[3]:
        raise ConfigError(f"branch kernel must be (M, M, k, k), got {shape}")
    for i, b in enumerate(kernels):
        if b.shape != shape:
            raise ConfigError(f"branch {i} has shape {b.shape}, branch 0 has {shape}")
    L, M, k = len(kernels), shape[0], shape[2]
    primary = np.stack(kernels)
    secondary = np.ones((M, L, L), dtype=primary.dtype)
    return IgcConstruction(IgcConfig(L=L, M=M, k=k), IgcBlockParams(primary, secondary), replication=L)


# -- equivalence check -------------------------------------------------------

def tolerance_for(k):
    return TOLERANCE_K1 if k == 1 else TOLERANCE_SPATIAL


def verify_equivalence(config, params, trials=20, seed=0, batch=2, hw=5):
    """Worst |path form - composed dense conv| over ``trials`` random inputs."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    kernel = composite_conv_kernel(assemble_factors(config, params))
    rng = CounterRNG(seed, "verify", config.L, config.M, config.k)
    worst = 0.0
    plain = IgcConfig(config.L, config.M, config.k, config.stride)
    for t in range(trials):
        x = rng.child(t).normal((batch, config.G, hw, hw))
        path = igc_block_forward(x, plain, params)
        dense = tc.conv2d_forward(x, kernel, config.stride)
        worst = max(worst, float(np.max(np.abs(path - dense))))
    return worst
