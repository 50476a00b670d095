"""Attention-cost formulas, exact parameter counts and FLOP estimates."""
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkformer import analysis, flops
from lkformer.analysis import (analyze, conv_params, count_flops, count_params, crossover_resolution,
                               format_csv, format_table, omega_lkra, omega_lkra_decomposed, omega_msa)
from lkformer.model import LkformerConfig, LkraConfig, build_model, lkformer_forward, parameter_count
from lkformer.tensor import Rng, Tensor

from oracles import enumerate_parameters

kernel_sets = st.lists(st.integers(0, 20).map(lambda i: 2 * i + 1), min_size=1, max_size=4, unique=True)


def scan_crossover(c, kernels, limit=10 ** 6):
    """Smallest hw with MSA cost above LKRA cost, by brute force (h = hw, w = 1)."""
    for hw in range(1, limit):
        if omega_msa(hw, 1, c) > omega_lkra(hw, 1, c, kernels):
            return hw
    raise AssertionError("no crossover below limit")


class TestOmega:
    def test_unit_values(self):
        assert omega_msa(1, 1, 1) == 6
        assert omega_lkra(1, 1, 1, [3]) == 10

    def test_small_plug_ins(self):
        assert omega_msa(2, 2, 1) == 48
        assert omega_lkra(2, 2, 4, [3, 5]) == 672

    def test_large_exact(self):
        assert omega_msa(64, 64, 180) == 6_570_639_360
        big = omega_msa(4096, 4096, 512)
        assert big == 4 * 4096 ** 2 * 512 ** 2 + 2 * 4096 ** 4 * 512
        assert isinstance(big, int)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 256), st.integers(1, 10 ** 5), kernel_sets)
    def test_scaling(self, c, hw, kernels):
        assert omega_lkra(2 * hw, 1, c, kernels) == 2 * omega_lkra(hw, 1, c, kernels)
        assert omega_msa(2 * hw, 1, c) > 2 * omega_msa(hw, 1, c)

    def test_decomposed_is_cheaper(self):
        for k in (3, 7, 11, 21, 31):
            assert omega_lkra_decomposed(8, 8, 16, [k]) < omega_lkra(8, 8, 16, [k])
        # a 1x1 kernel gains nothing from splitting
        assert omega_lkra_decomposed(1, 1, 1, [1]) == 3 > omega_lkra(1, 1, 1, [1])

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
    def test_rejects_bad_dims(self, args):
        with pytest.raises(ValueError):
            omega_msa(*args)
        with pytest.raises(ValueError):
            omega_lkra(*args, [3])

    def test_empty_kernels(self):
        with pytest.raises(ValueError):
            omega_lkra(1, 1, 1, [])
        with pytest.raises(ValueError):
            crossover_resolution(4, [])


class TestCrossover:
    def test_default_against_scan(self):
        hw = crossover_resolution(64, [11, 21, 31])
        assert hw == scan_crossover(64, [11, 21, 31])
        assert omega_msa(hw, 1, 64) > omega_lkra(hw, 1, 64, [11, 21, 31])
        assert omega_msa(hw - 1, 1, 64) <= omega_lkra(hw - 1, 1, 64, [11, 21, 31])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), kernel_sets)
    def test_matches_scan(self, c, kernels):
        assert crossover_resolution(c, kernels) == scan_crossover(c, kernels)

    def test_ratio_grows_without_bound(self):
        ratios = [omega_msa(hw, 1, 48) / omega_lkra(hw, 1, 48, [11, 21, 31]) for hw in (10 ** 3, 10 ** 5, 10 ** 7)]
        assert ratios[0] < ratios[1] < ratios[2]
        assert ratios[2] > 1000


class TestParams:
    def test_closed_forms(self):
        assert conv_params(1, 16, 3, 3) == 160
        assert conv_params(8, 8, 1, 1, bias=False) == 64
        assert conv_params(8, 8, 7, 1, groups=8) == 64

    @pytest.mark.parametrize("cfg", [
        LkformerConfig(),
        LkformerConfig(scale=4),
        LkformerConfig(channels=5, rtb_count=1, tl_count=3, lkra=LkraConfig((), True, False)),
        LkformerConfig(channels=6, rtb_count=3, tl_count=1, gpfn_expansion=3,
                       lkra=LkraConfig((3, 41), use_local_pair=False)),
    ])
    def test_matches_enumeration(self, cfg):
        params = build_model(cfg, Rng(0))
        assert count_params(cfg) == enumerate_parameters(params) == parameter_count(params)

    def test_monotone_in_depth_and_width(self):
        base = LkformerConfig(channels=8, rtb_count=2, tl_count=2)
        for field in ("rtb_count", "tl_count", "channels"):
            counts = [count_params(base.with_(**{field: v})) for v in (2, 4, 6, 8)]
            assert counts == sorted(counts) and len(set(counts)) == 4

    def test_default_size(self):
        # the built default has ~1.78M parameters at x2
        assert count_params(LkformerConfig()) == 1_781_281


class TestFlops:
    @pytest.mark.parametrize("cfg,h,w", [
        (LkformerConfig(channels=4, rtb_count=1, tl_count=1), 8, 9),
        (LkformerConfig(channels=6, rtb_count=2, tl_count=2, scale=4,
                        lkra=LkraConfig((5,), use_local_pair=False, inner_residual=False)), 8, 8),
        (LkformerConfig(channels=3, rtb_count=1, tl_count=2, lkra=LkraConfig(())), 10, 8),
    ])
    def test_matches_runtime_tally(self, cfg, h, w):
        params = build_model(cfg, Rng(1))
        with flops.FlopCounter() as counter:
            lkformer_forward(Tensor(Rng(2).uniform(0, 1, (1, 1, h, w))), cfg, params)
        assert counter.total == count_flops(cfg, h, w)

    def test_linear_in_pixels(self):
        cfg = LkformerConfig(channels=8, rtb_count=1, tl_count=1)
        assert count_flops(cfg, 16, 32) == 2 * count_flops(cfg, 16, 16)

    @pytest.mark.parametrize("k", [3, 7, 11, 21, 31])
    def test_separable_saving(self, k):
        c, hw = 16, 64 * 64
        pair = analysis.separable_pair_flops(c, k, hw)
        assert pair == c * 2 * k * hw * 2
        assert pair < analysis.conv_flops(c, c, k, k, hw, groups=c, bias=False)


class TestReport:
    def test_analyze_fields(self):
        cfg = LkformerConfig(channels=48)
        r = analyze(cfg, 64, 64)
        assert r.params == count_params(cfg)
        assert r.omega_msa == omega_msa(64, 64, 48)
        assert r.omega_lkra == omega_lkra(64, 64, 48, [11, 21, 31])
        assert r.crossover_hw == crossover_resolution(48, [11, 21, 31])

    def test_local_only_uses_local_kernel(self):
        r = analyze(LkformerConfig(lkra=LkraConfig(())), 8, 8)
        assert r.omega_lkra == omega_lkra(8, 8, 48, [7])

    def test_table_and_csv(self):
        reports = [analyze(LkformerConfig(channels=c), 32, 32) for c in (8, 16)]
        table = format_table(reports).splitlines()
        assert len(table) == 3 and "crossover" in table[0]
        rows = format_csv(reports).splitlines()
        assert rows[0].startswith("h,w,channels,kernels,params")
        assert rows[1].split(",")[3] == "11/21/31"


def test_random_configs_enumeration():
    gen = random.Random(404)
    for _ in range(5):
        kernels = tuple(sorted(gen.sample([3, 5, 7, 9, 11, 15, 21, 31], gen.randint(0, 3))))
        cfg = LkformerConfig(channels=gen.randint(1, 12), rtb_count=gen.randint(1, 3),
                             tl_count=gen.randint(1, 3), scale=gen.choice([2, 4]),
                             lkra=LkraConfig(kernels, True, gen.random() < 0.5))
        assert count_params(cfg) == enumerate_parameters(build_model(cfg, Rng(0)))
