import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igcnet import tensor as tc
from igcnet.algebra import assemble_factors, composite_conv_kernel
from igcnet.block import (GpcParams, IgcBlockParams, IgcConfig, gpc_block_forward, gpc_param_count,
                          igc_block_backward, igc_block_forward, init_igc_params, permutation_indices,
                          primary_group_conv, secondary_group_conv)
from igcnet.errors import ConfigError
from igcnet.rng import CounterRNG
from oracles import dense_igc_matrix


def rnd(shape, *labels):
    return CounterRNG(5, *labels).normal(shape)


class TestPermutation:
    def test_two_by_three(self):
        assert permutation_indices(2, 3).forward_index.tolist() == [0, 3, 1, 4, 2, 5]

    def test_four_by_two(self):
        p = permutation_indices(4, 2)
        assert p.forward_index.tolist() == [0, 2, 4, 6, 1, 3, 5, 7]
        assert np.array_equal(p.forward_index[p.inverse_index], np.arange(8))

    @pytest.mark.parametrize("M", [1, 2, 7])
    def test_single_partition_is_identity(self, M):
        assert np.array_equal(permutation_indices(1, M).forward_index, np.arange(M))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12))
    def test_rule_and_bijection(self, L, M):
        p = permutation_indices(L, M)
        for l in range(L):
            for m in range(M):
                assert p.forward_index[m * L + l] == l * M + m
        assert sorted(p.forward_index) == list(range(L * M))
        assert np.array_equal(p.inverse_index[p.forward_index], np.arange(L * M))


class TestPrimarySecondary:
    def test_single_partition_is_plain_conv(self):
        x, w = rnd((2, 3, 5, 5), "x"), rnd((1, 3, 3, 3, 3), "w")
        assert np.array_equal(primary_group_conv(x, w), tc.conv2d_forward(x, w[0]))

    def test_zero_input(self):
        out = primary_group_conv(np.zeros((1, 4, 3, 3)), rnd((2, 2, 2, 3, 3), "w"))
        assert not out.any()

    def test_primary_matches_block_diagonal_dense(self):
        L, M = 3, 2
        w = rnd((L, M, M, 3, 3), "w")
        dense = np.zeros((L * M, L * M, 3, 3))
        for l in range(L):
            dense[l * M:(l + 1) * M, l * M:(l + 1) * M] = w[l]
        x = rnd((2, 6, 4, 4), "x")
        assert np.abs(primary_group_conv(x, w) - tc.conv2d_forward(x, dense)).max() < 1e-12

    def test_secondary_identity_blocks(self):
        x = rnd((1, 6, 3, 3), "x")
        assert np.array_equal(secondary_group_conv(x, np.broadcast_to(np.eye(3), (2, 3, 3))), x)

    def test_secondary_single_partition_is_dense_pointwise(self):
        x, w = rnd((1, 4, 3, 3), "x"), rnd((1, 4, 4), "w")
        assert np.abs(secondary_group_conv(x, w) - tc.conv2d_forward(x, w[0][:, :, None, None], 1, 0)).max() < 1e-14

    def test_secondary_matches_block_diagonal_dense(self):
        M, L = 2, 3
        w = rnd((M, L, L), "w")
        dense = np.zeros((M * L, M * L))
        for m in range(M):
            dense[m * L:(m + 1) * L, m * L:(m + 1) * L] = w[m]
        x = rnd((2, 6, 3, 3), "x")
        assert np.abs(secondary_group_conv(x, w) - tc.conv2d_forward(x, dense[:, :, None, None], 1, 0)).max() < 1e-12

    def test_partition_mismatch(self):
        with pytest.raises(ConfigError):
            primary_group_conv(np.ones((1, 5, 3, 3)), np.ones((2, 2, 2, 3, 3)))


class TestIgcBlock:
    def test_scalar_chain(self):
        cfg = IgcConfig(1, 1, 1)
        p = IgcBlockParams(np.full((1, 1, 1, 1, 1), 3.0), np.full((1, 1, 1), -0.5))
        x = rnd((2, 1, 3, 3), "x")
        assert np.array_equal(igc_block_forward(x, cfg, p), -1.5 * x)
        g = rnd((2, 1, 3, 3), "g")
        gx, grads = igc_block_backward(cfg, p, {"x": x, "y_bar": 3.0 * x}, g)
        assert np.allclose(gx, -1.5 * g)
        assert np.isclose(grads.primary.item(), -0.5 * (x * g).sum())
        assert np.isclose(grads.secondary.item(), 3.0 * (x * g).sum())

    def test_zero_input(self):
        cfg = IgcConfig(2, 3, 3)
        p = init_igc_params(cfg, CounterRNG(0))
        assert not igc_block_forward(np.zeros((1, 6, 4, 4)), cfg, p).any()

    def test_zero_grad(self):
        cfg = IgcConfig(2, 2, 3, with_bn_relu=True)
        p = init_igc_params(cfg, CounterRNG(0))
        cache = {}
        x = rnd((2, 4, 3, 3), "x")
        igc_block_forward(x, cfg, p, cache=cache)
        gx, g = igc_block_backward(cfg, p, cache, np.zeros((2, 4, 3, 3)))
        assert not any(a.any() for a in (gx, g.primary, g.secondary, g.gamma, g.beta))

    def test_matches_composed_kernel(self):
        cfg = IgcConfig(2, 3, 3)
        p = init_igc_params(cfg, CounterRNG(1))
        x = rnd((2, 6, 5, 5), "x")
        dense = tc.conv2d_forward(x, composite_conv_kernel(assemble_factors(cfg, p)))
        assert np.abs(igc_block_forward(x, cfg, p) - dense).max() < 1e-10

    def test_matches_explicit_matrix_oracle_k1(self):
        L, M = 3, 2
        cfg = IgcConfig(L, M, 1)
        p = init_igc_params(cfg, CounterRNG(2))
        W = dense_igc_matrix(L, M, p.primary[..., 0, 0], p.secondary)
        x = rnd((1, 6, 2, 2), "x")
        ref = np.einsum("oc,nchw->nohw", W, x)
        assert np.abs(igc_block_forward(x, cfg, p) - ref).max() < 1e-12

    def test_stride_two_shape(self):
        cfg = IgcConfig(2, 2, 3, stride=2)
        p = init_igc_params(cfg, CounterRNG(0))
        assert igc_block_forward(rnd((1, 4, 8, 8), "x"), cfg, p).shape == (1, 4, 4, 4)

    def test_param_count(self):
        cfg = IgcConfig(28, 3, 3)
        assert cfg.param_count() == 4620
        assert init_igc_params(cfg, CounterRNG(0)).param_count() == 4620

    def test_swapped_kernel_placement(self):
        # spatial kernel on the secondary side: L*M^2 + M*L^2*S weights
        cfg = IgcConfig(2, 3, 3, spatial_secondary=True)
        p = init_igc_params(cfg, CounterRNG(0))
        assert p.param_count() == 2 * 9 + 3 * 4 * 9
        assert igc_block_forward(rnd((1, 6, 4, 4), "x"), cfg, p).shape == (1, 6, 4, 4)

    def test_wrong_params_rejected(self):
        cfg = IgcConfig(2, 3, 3)
        p = init_igc_params(IgcConfig(3, 2, 3), CounterRNG(0))
        with pytest.raises(ConfigError):
            igc_block_forward(rnd((1, 6, 4, 4), "x"), cfg, p)

    @pytest.mark.parametrize("L,M", [(0, 1), (1, 0), (-2, 3)])
    def test_invalid_config(self, L, M):
        with pytest.raises(ConfigError):
            IgcConfig(L, M, 3)


class TestGpc:
    def test_param_count(self):
        assert gpc_param_count(5, 8, 9) == 4480

    def test_identity_pointwise_reduces_to_primary(self):
        prim = rnd((2, 2, 2, 3, 3), "p")
        x = rnd((1, 4, 4, 4), "x")
        out = gpc_block_forward(x, 2, 2, 3, GpcParams(prim, np.eye(4)))
        assert np.abs(out - primary_group_conv(x, prim)).max() < 1e-14

    def test_single_partition_is_two_dense_convs(self):
        prim, pw = rnd((1, 3, 3, 3, 3), "p"), rnd((3, 3), "pw")
        x = rnd((1, 3, 4, 4), "x")
        ref = tc.conv2d_forward(tc.conv2d_forward(x, prim[0]), pw[:, :, None, None], 1, 0)
        assert np.abs(gpc_block_forward(x, 1, 3, 3, GpcParams(prim, pw)) - ref).max() < 1e-13
