"""The ten acceptance criteria, each printing one PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``.  Criterion 8
trains the toy model for 2000 steps and takes roughly ten minutes on one core.
"""
import random
import time

import numpy as np
import pytest

from lkformer import checks
from lkformer.analysis import count_params, crossover_resolution, omega_lkra, omega_msa
from lkformer.checkpoint import load_checkpoint, save_checkpoint
from lkformer.data import load_pgm, make_pair, save_pgm, split_train_test, synth_scene
from lkformer.metrics import psnr, ssim
from lkformer.model import (LkformerConfig, LkraConfig, build_model, build_rtb, build_tl, deep_features,
                            influence_extent, named_parameters, rtb_forward, tl_forward, zero_)
from lkformer.nn import Conv2dParams, separable_dwc
from lkformer.tensor import Rng, Tensor
from lkformer.train import TrainConfig, ablation_configs, evaluate, mean_psnr, train

from oracles import enumerate_parameters, shifted_depthwise, ssim_direct


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def randomize(tree, rng, std=0.3):
    for _, t in named_parameters(tree):
        t.data[...] = rng.normal(t.shape, std)
    return tree


def test_01_gradient_oracle(report):
    start = time.perf_counter()
    worst = {}
    for case in checks.suite("toy"):
        worst[case.name] = case.run().max_error
    elapsed = time.perf_counter() - start
    expected = {"conv2d 3x3", "conv2d 1x1", "conv2d depth-wise 3x3", "separable_dwc k=3", "separable_dwc k=7",
                "separable_dwc k=11", "layer_norm", "silu", "pixel_shuffle", "rdb k=11", "lkra", "gpfn", "tl",
                "rtb", "lkformer"}
    ok = set(worst) == expected and max(worst.values()) < 1e-4 and elapsed < 300
    report(1, "gradient oracle", ok, f"{len(worst)} checks, max rel err {max(worst.values()):.2e}, {elapsed:.0f} s")


def test_02_separability(report):
    errors = []
    for k in (3, 7, 11, 21, 31):
        rng = Rng(200 + k)
        u, v = rng.normal((4, k)), rng.normal((4, k))
        x = rng.normal((1, 4, 16, 16))
        col = Conv2dParams(Tensor(u.reshape(4, 1, k, 1)), None, 4)
        row = Conv2dParams(Tensor(v.reshape(4, 1, 1, k)), None, 4)
        got = separable_dwc(Tensor(x), col, row).data
        errors.append(np.max(np.abs(got - shifted_depthwise(x, u[:, :, None] * v[:, None, :]))))
    report(2, "separability", max(errors) < 1e-9, f"max abs err {max(errors):.1e}")


def scan_crossover(c, kernels):
    hw = 1
    while omega_msa(hw, 1, c) <= omega_lkra(hw, 1, c, kernels):
        hw += 1
    return hw


def test_03_attention_cost(report):
    gen = random.Random(3)
    ok = omega_msa(1, 1, 1) == 6 and omega_lkra(1, 1, 1, [3]) == 10
    for _ in range(20):
        c = gen.randint(1, 512)
        kernels = gen.sample(range(1, 64, 2), gen.randint(1, 4))
        hw = gen.randint(1, 10 ** 6)
        ok &= omega_lkra(2 * hw, 1, c, kernels) == 2 * omega_lkra(hw, 1, c, kernels)
        ok &= omega_msa(2 * hw, 1, c) > 2 * omega_msa(hw, 1, c)
    for _ in range(5):
        c = gen.randint(1, 256)
        kernels = gen.sample(range(1, 64, 2), gen.randint(1, 4))
        ok &= crossover_resolution(c, kernels) == scan_crossover(c, kernels)
    report(3, "attention cost formulas", ok, "20 scaling tuples, 5 crossover scans")


def random_config(gen):
    kernels = tuple(sorted(gen.sample([3, 5, 7, 11, 15, 21, 31], gen.randint(0, 3))))
    return LkformerConfig(channels=gen.randint(1, 24), rtb_count=gen.randint(1, 4), tl_count=gen.randint(1, 4),
                          scale=gen.choice([2, 4]), gpfn_expansion=gen.randint(1, 3),
                          lkra=LkraConfig(kernels, gen.random() < 0.5, gen.random() < 0.5))


def test_04_parameter_count(report):
    gen = random.Random(4)
    mismatches = []
    for i in range(10):
        cfg = random_config(gen)
        want = enumerate_parameters(build_model(cfg, Rng(i)))
        if count_params(cfg) != want:
            mismatches.append((cfg, count_params(cfg), want))
    report(4, "parameter count", not mismatches, f"10 configs, {len(mismatches)} mismatches")


def test_05_residual_identity(report):
    rng = Rng(5)
    cfg = LkformerConfig(channels=6, rtb_count=2, tl_count=2)
    x = Tensor(rng.normal((2, 6, 9, 11)))
    tl = randomize(build_tl(rng.derive(0), cfg), rng.derive(1))
    zero_(tl["lkra"])
    zero_(tl["gpfn"])
    rtb = randomize(build_rtb(rng.derive(2), cfg), rng.derive(3))
    zero_(rtb)
    model = randomize(build_model(cfg, rng.derive(4)), rng.derive(5))
    zero_(model["rtbs"])
    zero_(model["fusion"])
    ok = (np.array_equal(tl_forward(x, tl, cfg.lkra).data, x.data)
          and np.array_equal(rtb_forward(x, rtb, cfg.lkra).data, x.data)
          and np.array_equal(deep_features(x, cfg, model).data, x.data))
    report(5, "residual identities", ok, "tl, rtb and deep trunk bit-exact")


def test_06_long_range_influence(report):
    image = Rng(6).uniform(0.0, 1.0, (1, 1, 80, 80))
    reach = {}
    for name, lkra in [("default", LkraConfig()), ("control", LkraConfig((3,), use_local_pair=False))]:
        cfg = LkformerConfig(channels=4, rtb_count=1, tl_count=1, scale=2, lkra=lkra)
        params = build_model(cfg, Rng(7), std=0.3)
        _, reach[name] = influence_extent(cfg, params, image, (40, 40), delta=1.0)
    need = 31 * 2
    ok = reach["default"] >= need and 0 < reach["control"] < need
    report(6, "long-range influence", ok, f"default reaches {reach['default']} px, control {reach['control']} px, "
                                          f"threshold {need}")


def test_07_metric_fixtures(report):
    np_rng = np.random.default_rng(7)
    a = np_rng.integers(0, 255, (32, 32)).astype(np.float64)
    ok = abs(psnr(a, a + 1) - 48.1308) < 1e-3
    ok &= psnr(np.zeros((8, 8)), np.full((8, 8), 255.0)) == 0.0
    ok &= abs(ssim(a, a) - 1.0) <= 1e-12
    worst = 0.0
    for _ in range(20):
        x = np_rng.integers(0, 256, (32, 32)).astype(np.float64)
        y = np.clip(x + np_rng.normal(0, 25, x.shape), 0, 255).round()
        worst = max(worst, abs(ssim(x, y) - ssim_direct(x, y)))
    ok &= worst < 1e-9
    report(7, "metric fixtures", ok, f"SSIM oracle max diff {worst:.1e}")


TOY_MODEL = LkformerConfig(channels=16, rtb_count=2, tl_count=2, scale=2)


def toy_data(seed=7):
    rng = Rng(seed)
    pairs = [make_pair(synth_scene(rng.derive(i), 64, 64), 2, f"scene_{i:04d}") for i in range(200)]
    return split_train_test(pairs, rng.derive(999), 0.8)


@pytest.mark.slow
def test_08_toy_learning(report):
    train_pairs, test_pairs = toy_data()
    cfg = TrainConfig(lr=1e-3, batch_size=8, patch_size=32, steps=2000, seed=0, log_interval=500)
    start = time.perf_counter()
    result = train(cfg, TOY_MODEL, train_pairs)
    model = mean_psnr(evaluate(test_pairs, TOY_MODEL, result.params, with_ssim=False))
    elapsed = time.perf_counter() - start
    bicubic = mean_psnr(evaluate(test_pairs, with_ssim=False))
    margin = model - bicubic
    finite = all(np.isfinite(loss) for _, loss, _ in result.log)
    ok = margin >= 0.3 and elapsed < 900 and finite
    report(8, "toy learning", ok, f"model {model:.3f} dB vs bicubic {bicubic:.3f} dB, margin {margin:+.3f} dB, "
                                  f"{elapsed / 60:.1f} min")


def test_09_ablation_harness(report):
    configs = ablation_configs()
    counts = {name: count_params(cfg) for name, cfg in configs.items()}
    ok = all(build_model(cfg.with_(channels=4), Rng(0)) for cfg in configs.values())
    ok &= len([n for n in configs if n.startswith("lkra:")]) == 8
    for prefix in ("tl:", "rtb:"):
        grid = [counts[f"{prefix}{n}"] for n in (2, 4, 6, 8)]
        ok &= grid == sorted(grid) and len(set(grid)) == 4
    kernel_rows = [counts[f"lkra:{n}"] for n in ("local_only", "rdb11_only", "rdb11_21", "default", "with_rdb41")]
    ok &= kernel_rows == sorted(kernel_rows) and len(set(kernel_rows)) == 5
    lkra = {n: c for n, c in counts.items() if n.startswith("lkra:")}
    # only the inner-residual toggle leaves the weights unchanged
    shared = len(lkra) - len(set(lkra.values()))
    ok &= shared == 1 and lkra["lkra:no_residual"] == lkra["lkra:default"]
    report(9, "ablation harness", ok, f"{len(configs)} configs; inner-residual row shares the default count")


def test_10_determinism_round_trips(report, tmp_path):
    pairs = [make_pair(synth_scene(Rng(i), 24, 24), 2, f"p{i}") for i in range(6)]
    cfg = LkformerConfig(channels=4, rtb_count=1, tl_count=1, lkra=LkraConfig((5,)))
    tcfg = TrainConfig(steps=3, batch_size=2, patch_size=8, log_interval=1)
    for run in ("a", "b"):
        train(tcfg, cfg, pairs[:4], pairs[4:], out_dir=tmp_path / run)
    ok = (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    ok &= (tmp_path / "a/final.lkf").read_bytes() == (tmp_path / "b/final.lkf").read_bytes()

    params = randomize(build_model(cfg, Rng(1)), Rng(2))
    save_checkpoint(tmp_path / "rt.lkf", cfg, params)
    cfg2, params2 = load_checkpoint(tmp_path / "rt.lkf")
    ok &= cfg2 == cfg and all(np.array_equal(a.data, b.data) for (_, a), (_, b)
                              in zip(named_parameters(params), named_parameters(params2)))
    image = np.random.default_rng(10).integers(0, 256, (17, 23)).astype(np.float64)
    save_pgm(tmp_path / "rt.pgm", image)
    ok &= np.array_equal(load_pgm(tmp_path / "rt.pgm"), image)
    report(10, "determinism and round trips", ok, "logs, checkpoints, PGM bit-exact")
