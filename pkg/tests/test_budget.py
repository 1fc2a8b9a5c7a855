import math

import pytest
from hypothesis import given, settings, strategies as st

from igcnet import budget
from igcnet.arch import load_preset, three_stage
from igcnet.errors import ConfigError
from igcnet.network import build_network
from igcnet.tables import all_tables_markdown, network_cost_rows, width_rows

# (L, M, params, width) columns of the IGC width table
IGC_4672 = [(1, 23, 4784, 23), (2, 16, 4672, 32), (3, 13, 4680, 39), (5, 10, 4750, 50), (6, 9, 4698, 54),
            (12, 6, 4752, 72), (28, 3, 4620, 84), (40, 2, 4640, 80), (64, 1, 4672, 64)]
IGC_17536 = [(1, 44, 17468, 44), (2, 31, 17422, 62), (4, 22, 17776, 88), (12, 12, 17280, 144),
             (14, 11, 17402, 154), (23, 8, 17480, 184), (28, 7, 17836, 196), (41, 5, 17630, 205),
             (64, 3, 17472, 192), (85, 2, 17510, 170), (128, 1, 17536, 128)]
# The reference table prints width 63 for (2, 31); L*M is 62 and 17422 is
# the count for M=31, so 62 is the consistent value.
GPC_4672 = [(1, 22, 4840, 22), (2, 15, 4950, 30), (3, 12, 5184, 36), (5, 8, 4480, 40), (10, 5, 4750, 50),
            (19, 3, 4788, 57), (30, 2, 4680, 60), (64, 1, 4672, 64)]
GPC_17536_LMW = [(1, 42, 42), (2, 28, 56), (3, 22, 66), (6, 14, 84), (11, 9, 99), (15, 7, 105),
                 (18, 6, 108), (29, 4, 116), (62, 2, 124), (128, 1, 128)]


class TestCounts:
    @pytest.mark.parametrize("L,M,want", [(2, 16, 4672), (28, 3, 4620), (41, 5, 17630)])
    def test_igc(self, L, M, want):
        assert budget.igc_param_count(L, M, 9) == want

    @pytest.mark.parametrize("L,M,want", [(5, 8, 4480), (2, 15, 4950), (64, 1, 4672)])
    def test_gpc(self, L, M, want):
        assert budget.gpc_param_count(L, M, 9) == want

    def test_regular(self):
        assert budget.regular_param_count(16, 9) == 2304
        assert budget.regular_param_count(1, 1) == 1
        assert budget.regular_width_for_budget(4672, 9) == 22

    @pytest.mark.parametrize("L,M,S,want", [(2, 16, 9, True), (1, 23, 9, False), (2, 1, 1, False)])
    def test_is_wider(self, L, M, S, want):
        assert budget.is_wider(L, M, S) is want

    def test_bound_values(self):
        assert math.isclose(budget.width_upper_bound(4672, 9), 84.64, abs_tol=0.005)
        assert math.isclose(budget.width_upper_bound(4672, 9), (4672 / 6) ** (2 / 3))
        assert math.isclose(budget.width_upper_bound(17536, 9), 204.42, abs_tol=0.005)
        # the widest configs sit under the bound of their own counts
        assert 84 <= budget.width_upper_bound(4620, 9) and 205 <= budget.width_upper_bound(17630, 9)

    @pytest.mark.parametrize("M,S", [(1, 9), (2, 9), (3, 4), (2, 1)])
    def test_bound_tight_when_L_is_MS(self, M, S):
        L = M * S
        T = budget.igc_param_count(L, M, S)
        assert math.isclose(budget.width_upper_bound(T, S), L * M, rel_tol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 60), st.sampled_from([1, 9, 25]))
    def test_bound_holds_everywhere(self, L, M, S):
        assert L * M <= budget.width_upper_bound(budget.igc_param_count(L, M, S), S) + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 100), st.integers(1, 40), st.sampled_from([1, 9, 25]))
    def test_wider_matches_direct_comparison(self, L, M, S):
        T = budget.igc_param_count(L, M, S)
        # regular conv of width L*M would cost (LM)^2 S
        assert budget.is_wider(L, M, S) == (T < (L * M) ** 2 * S)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 100), st.integers(1, 40), st.sampled_from([1, 9, 25]))
    def test_igc_never_costs_more_than_gpc(self, L, M, S):
        igc, gpc = budget.igc_param_count(L, M, S), budget.gpc_param_count(L, M, S)
        assert igc <= gpc and (igc == gpc) == (M == 1)

    @pytest.mark.parametrize("M,S", [(1, 4), (2, 4), (1, 9), (2, 9)])
    def test_L_equal_MS_is_widest_at_its_count(self, M, S):
        T = budget.igc_param_count(M * S, M, S)
        widest = max(L * m for L in range(1, T + 1) for m in range(1, T + 1)
                     if budget.igc_param_count(L, m, S) == T)
        assert widest == M * S * M

    def test_swapped_placement_is_transpose(self):
        # kernel on the secondary side of (L, M) costs L*M^2 + M*L^2*S,
        # which is the primary-side count with L and M exchanged
        for L, M, S in [(2, 3, 9), (5, 1, 9), (4, 4, 25)]:
            assert L * M * M + M * L * L * S == budget.igc_param_count(M, L, S)


class TestEnumeration:
    def test_igc_4672_rows(self):
        got = {tuple(e) for e in budget.enumerate_configs(4672, 9, 0.03).entries}
        assert set(IGC_4672) <= got

    def test_igc_17536_rows(self):
        got = {tuple(e) for e in budget.enumerate_configs(17536, 9, 0.03).entries}
        assert set(IGC_17536) <= got

    def test_smallest_block(self):
        assert (1, 1, 10, 1) in budget.enumerate_configs(10, 9).entries

    def test_entries_within_tolerance(self):
        for target in (4672, 17536):
            for e in budget.enumerate_configs(target, 9, 0.03).entries:
                assert abs(e.params - target) <= 0.03 * target
                assert budget.igc_param_count(e.L, e.M + 1, 9) > 1.03 * target

    def test_gpc_rows(self):
        got = {tuple(e) for e in budget.enumerate_configs(4672, 9, 0.11, "gpc").entries}
        assert set(GPC_4672) <= got
        got = {(e.L, e.M, e.width): e.params for e in budget.enumerate_configs(17536, 9, 0.03, "gpc").entries}
        for L, M, w in GPC_17536_LMW:
            assert got[L, M, w] == budget.gpc_param_count(L, M, 9)

    def test_gpc_reference_count_row_is_shifted(self):
        # The reference count row for the 17536 GPC columns is offset against
        # the (L, M) row it sits under; these are the counts the closed form
        # gives, next to the printed values.
        printed = {6: 17820, 11: 17640, 15: 17496, 18: 17632, 29: 17640, 128: 17532}
        computed = {6: 17640, 11: 17820, 15: 17640, 18: 17496, 29: 17632, 128: 17536}
        M = dict((L, M) for L, M, _ in GPC_17536_LMW)
        for L, want in computed.items():
            assert budget.gpc_param_count(L, M[L], 9) == want != printed[L]

    def test_widest(self):
        assert budget.widest_config(4672, 9) == (28, 3)
        assert budget.widest_config(17536, 9) == (41, 5)

    @pytest.mark.parametrize("target", [4672, 17536])
    def test_widest_against_brute_force(self, target):
        best = None
        for L in range(1, 2 * target):
            for M in range(1, target):
                p = budget.igc_param_count(L, M, 9)
                if p > 1.03 * target:
                    break
                if p >= 0.97 * target:
                    key = (L * M, -p)
                    if best is None or key > best[0]:
                        best = (key, (L, M))
        assert budget.widest_config(target, 9) == best[1]

    def test_table_columns(self):
        assert [tuple(e) for e in width_rows(4672)] == IGC_4672
        assert [tuple(e) for e in width_rows(17536)] == IGC_17536

    def test_invalid(self):
        with pytest.raises(ConfigError):
            budget.enumerate_configs(0, 9)
        with pytest.raises(ConfigError):
            budget.enumerate_configs(100, 9, block_type="dense")


# millions of params / 1e8 multiply-adds, by depth
REFERENCE_COSTS = {
    "regconv_w16": {8: (0.075, 0.122), 20: (0.27, 0.406), 38: (0.56, 0.830), 62: (0.95, 1.40), 98: (1.53, 2.25)},
    "regconv_w18": {8: (0.095, 0.154), 20: (0.34, 0.513), 38: (0.71, 1.05), 62: (1.20, 1.77), 98: (1.93, 2.84)},
    "igc_l4m8": {8: (0.078, 0.131), 20: (0.27, 0.424), 38: (0.57, 0.862), 62: (0.96, 1.45), 98: (1.56, 2.32)},
    "igc_l24m2": {8: (0.047, 0.099), 20: (0.15, 0.288), 38: (0.31, 0.571), 62: (0.52, 0.948), 98: (0.83, 1.51)},
}


class TestNetworkBudget:
    def test_within_ten_percent(self):
        costs = network_cost_rows()
        for name, rows in REFERENCE_COSTS.items():
            for depth, (p_ref, f_ref) in rows.items():
                nb = costs[name, depth]
                assert abs(nb.total_params / 1e6 - p_ref) <= 0.1 * p_ref, (name, depth)
                assert abs(nb.flops / 1e8 - f_ref) <= 0.1 * f_ref, (name, depth)

    def test_l24m2_cheapest(self):
        costs = network_cost_rows()
        for depth in (8, 20, 38, 62, 98):
            others = [costs[n, depth] for n in ("regconv_w16", "regconv_w18", "igc_l4m8")]
            assert costs["igc_l24m2", depth].total_params < min(o.total_params for o in others)
            assert costs["igc_l24m2", depth].flops < min(o.flops for o in others)

    def test_single_pointwise_mac(self):
        from igcnet.arch import ArchSpec, StageSpec
        arch = ArchSpec("RegConv", (StageSpec(0, width=1, map_size=1),), n_classes=1, k=1, in_channels=1)
        nb = budget.network_budget(arch, input_hw=1)
        stem = nb.per_stage[0]
        assert stem["flops"] == 1  # one 1x1 conv, one channel, one pixel
        assert nb.flops == 1 + 1  # plus the 1x1 FC

    @pytest.mark.parametrize("name", ["regconv_w16", "sumfusion", "igc_l4m8", "igc_l24m2", "igc_l32m26"])
    @pytest.mark.parametrize("blocks", [0, 1, 2])
    def test_matches_built_network(self, name, blocks):
        arch = load_preset(name).with_blocks(blocks)
        assert budget.network_budget(arch).total_params == build_network(arch).count_params()

    def test_residual_matches_built_network(self):
        arch = three_stage("IGC", 2, L=4, M=2, identity_mappings=True)
        assert budget.network_budget(arch).total_params == build_network(arch).count_params()

    def test_gpc_network(self):
        arch = three_stage("GPC", 2, L=4, M=2)
        assert budget.network_budget(arch).total_params == build_network(arch).count_params()

    def test_per_stage_sums(self):
        nb = budget.network_budget(load_preset("igc_l4m8").with_depth(20))
        assert sum(r["params"] for r in nb.per_stage) == nb.total_params
        assert sum(r["flops"] for r in nb.per_stage) == nb.flops


def test_markdown_tables_render():
    md = all_tables_markdown()
    assert "**28**" in md and "**205**" in md
    assert md.count("| L |") == 4
