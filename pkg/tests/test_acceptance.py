"""End-to-end acceptance suite: nine numbered criteria, one verdict line each.

Run with ``pytest tests/test_acceptance.py -v`` — each criterion is a single
test, so the -v listing doubles as the per-criterion pass/fail report; the
``[criterion N]`` lines land in captured stdout.
"""

import functools
import math
import time

import numpy as np
import pytest

from alen import blocks as B
from alen import gradcheck as G
from alen import tensor as T
from alen.losses import (LossConfig, combine_loss_values, psnr, ssim_metric)
from alen.network import ModelConfig, build, enhance, preprocess_raw
from alen.rawdata import (NoiseModel, load_raw, load_rgb, pack_bayer,
                          procedural_rgb, save_raw, save_rgb, synth_lowlight)
from alen.tensor import Tensor
from alen.training import (TrainConfig, evaluate, load_checkpoint, lr_at,
                           model_predictor, restore, save_checkpoint, train)


def criterion(number, label):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] {label}: FAIL")
                raise
            print(f"[criterion {number}] {label}: PASS")
        return wrapper
    return deco


def overfit_pair():
    rng = np.random.default_rng(42)
    return synth_lowlight(procedural_rgb(rng, 64, 64), 100.0,
                          NoiseModel(1e-4, 1e-6, seed=1))


# ---------------------------------------------------------------------------


@criterion(1, "full-scale benchmark figures declared out of reach")
def test_criterion_1_full_scale_not_reproduced():
    # The production configuration is real and constructible: 5 levels at
    # 32 base channels (about 10M parameters), 4000-epoch schedule.
    cfg = ModelConfig()
    assert (cfg.base_width, cfg.depth) == (32, 5)
    assert build(cfg).parameter_count() > 10_000_000
    tcfg = TrainConfig()
    assert tcfg.epochs == 4000
    assert lr_at(0, tcfg) == 1e-4

    # Reference results quoted for this architecture trained at that scale:
    # PSNR 31.53 / 29.70 / 28.66 dB for the x100 / x250 / x300 exposure
    # groups (mean 29.86 dB, SSIM 0.787), and attention-ablation means of
    # 28.57 / 29.49 / 29.70 / 29.86 dB.  Reproducing them needs the original
    # multi-gigabyte sensor-capture dataset and a multi-day training run;
    # neither fits this environment, so those figures are NOT verified here.
    # The remaining criteria exercise every code path at workstation scale.
    print("full-scale run skipped: original sensor dataset + multi-day "
          "training unavailable; quoted figures (31.53/29.70/28.66 dB, "
          "SSIM 0.787; ablations 28.57/29.49/29.70/29.86 dB) unverified")


@criterion(2, "finite-difference gradient suite (<1e-4 rel, 64-bit)")
def test_criterion_2_gradient_suite():
    t0 = time.monotonic()
    results = G.run_checks()
    elapsed = time.monotonic() - t0
    failed = {r.name: r.max_rel_err for r in results if not r.passed}
    assert not failed, f"gradient failures: {failed}"
    names = {r.name for r in results}
    assert {"conv2d", "conv_transpose2d", "softmax", "max_pool2",
            "pixel_shuffle", "block_cab", "block_nonlocal_d1",
            "block_nonlocal_d2", "block_mab", "block_isl",
            "network_desk"} <= names
    assert elapsed < 300.0, f"gradient suite took {elapsed:.0f}s"
    # the harness itself must catch a corrupted backward pass
    (bad,) = G.run_checks(names=["mul"], perturb="mul")
    assert not bad.passed


@criterion(3, "attention against a literal-loop oracle (<1e-5 abs)")
def test_criterion_3_nonlocal_oracle():
    def conv1x1(x, w):
        co, ci = w.shape[:2]
        n, _, h, wd = x.shape
        out = np.zeros((n, co, h, wd))
        for o in range(co):
            for c in range(ci):
                out[:, o] += w[o, c, 0, 0] * x[:, c]
        return out

    def oracle(x, p):
        d = p.downsample
        n, c, h, w = x.shape
        if d > 1:
            pooled = np.zeros((n, c, h // d, w // d))
            for i in range(h // d):
                for j in range(w // d):
                    pooled[:, :, i, j] = x[:, :, i * d:(i + 1) * d,
                                           j * d:(j + 1) * d].mean(axis=(2, 3))
        else:
            pooled = x
        q = conv1x1(x, p.theta.data.astype(np.float64))
        k = conv1x1(pooled, p.phi.data.astype(np.float64))
        v = conv1x1(pooled, p.g.data.astype(np.float64))
        half = q.shape[1]
        nq, nk = h * w, pooled.shape[2] * pooled.shape[3]
        qf = q.reshape(half, nq)
        kf = k.reshape(half, nk)
        vf = v.reshape(half, nk)
        y = np.zeros((half, nq))
        for i in range(nq):
            logits = np.array([sum(qf[c, i] * kf[c, j] for c in range(half))
                               for j in range(nk)])
            e = np.exp(logits - logits.max())
            att = e / e.sum()
            for cc in range(half):
                y[cc, i] = sum(att[j] * vf[cc, j] for j in range(nk))
        y = y.reshape(1, half, h, w)
        return x + conv1x1(y, p.out.data.astype(np.float64))

    worst = 0.0
    for d in (1, 2):
        for seed in range(20):
            rng = np.random.default_rng(1000 * d + seed)
            p = B.NonLocalParams.init(rng, 4, d)
            x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
            got = B.non_local_forward(Tensor(x), p).data
            want = oracle(x.astype(np.float64), p)
            worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-5, f"worst |diff| {worst:.2e}"


@criterion(4, "structural identities hold exactly")
def test_criterion_4_structural_identities():
    rng = np.random.default_rng(0)

    # space-to-depth and back is a bit-exact identity
    for shape, r in (((2, 3, 6, 8), 2), ((1, 2, 8, 8), 4), ((1, 5, 4, 6), 1)):
        x = rng.standard_normal(shape).astype(np.float32)
        back = T.pixel_shuffle(T.pixel_unshuffle(Tensor(x), r), r).data
        assert np.array_equal(back, x)

    # the shuffle downsampler halves spatial dims; standalone it doubles
    # channels, as a pooling drop-in it preserves them
    x = Tensor(rng.standard_normal((1, 6, 8, 8)).astype(np.float32))
    assert B.inverted_shuffle_forward(x, B.IslParams.init(rng, 6)).shape == (1, 12, 4, 4)
    assert B.inverted_shuffle_forward(
        x, B.IslParams.init(rng, 6, channels_out=6)).shape == (1, 6, 4, 4)

    # raw in, same-size RGB out, for square and rectangular frames
    weights = build(ModelConfig.desk_scale(seed=0))
    for h, w in ((64, 64), (48, 32)):
        rgb = procedural_rgb(rng, h, w)
        pair = synth_lowlight(rgb, 100.0, NoiseModel(1e-4, 1e-6, seed=2))
        out = enhance(weights, pair.input, pair.ratio)
        assert out.shape == (1, 3, h, w)
        assert out.min() >= 0.0 and out.max() <= 1.0

    # 16-channel stack: the ratio-1.0 copy equals packed*w bitwise, and
    # below clipping every copy is exactly (packed*w)*ratio in float32
    cfg = ModelConfig.desk_scale()
    pair = synth_lowlight(procedural_rgb(rng, 16, 16), 100.0, NoiseModel(seed=3))
    packed = pack_bayer(pair.input).data
    base = packed * np.float32(100.0)
    stacked = preprocess_raw(pair.input, 100.0, cfg).data
    assert cfg.ratios == (0.5, 0.8, 1.0, 1.2)
    k_unit = cfg.ratios.index(1.0)
    assert np.array_equal(stacked[:, 4 * k_unit:4 * k_unit + 4],
                          np.clip(base, 0.0, 1.0))
    for k, r in enumerate(cfg.ratios):
        exact = base * np.float32(r)
        block = stacked[:, 4 * k:4 * k + 4]
        inside = (exact > 0.0) & (exact < 1.0)
        assert np.array_equal(block[inside], exact[inside])


@criterion(5, "loss and metric fixtures are exact")
def test_criterion_5_loss_fixtures():
    cfg = LossConfig()
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        assert ssim_metric(x, x, cfg).item() == 1.0

    assert combine_loss_values(0.1, 0.8, 0.85) == 0.115

    # 5x5 single channel, 16 of 25 pixels off by 0.125: MSE = 0.01 -> 20 dB
    a = np.zeros((1, 1, 5, 5), dtype=np.float32)
    b = a.copy()
    b.reshape(-1)[:16] = 0.125
    assert psnr(a, b) == 20.0
    assert psnr(a, a) == math.inf

    y = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        fwd = ssim_metric(x, y, cfg).item()
        rev = ssim_metric(y, x, cfg).item()
    assert abs(fwd - rev) < 1e-6


@criterion(6, "learning-rate schedule fixtures are exact")
def test_criterion_6_schedule_fixtures():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(1999, cfg) == 1e-4
    assert lr_at(2000, cfg) == 2e-5
    assert lr_at(2999, cfg) == 2e-5
    assert lr_at(3000, cfg) == 1e-5
    assert lr_at(3500, cfg) == 1e-5


@criterion(7, "single-scene overfit reaches 30 dB in 500 steps")
def test_criterion_7_overfit():
    pair = overfit_pair()
    tcfg = TrainConfig(lr0=1e-2, schedule=((400, 3e-3),), epochs=500,
                       beta2=0.99, crop=64, use_augment=False, seed=0)
    t0 = time.monotonic()
    result = train(ModelConfig.desk_scale(seed=0), tcfg, [pair])
    elapsed = time.monotonic() - t0
    weights, _, _ = restore(result.checkpoint)
    out = model_predictor(weights)(pair)
    score = psnr(out, pair.target)
    print(f"overfit: {score:.2f} dB after 500 steps in {elapsed:.0f}s")
    assert score > 30.0, f"got {score:.2f} dB"
    assert elapsed < 600.0, f"took {elapsed:.0f}s"


@criterion(8, "attention ablation trend report (soft)")
def test_criterion_8_ablation_trend():
    rng = np.random.default_rng(123)
    pairs = []
    for i in range(20):
        # 32px scenes: the packed bottleneck stays divisible by the
        # attention pooling factor at every level
        rgb = procedural_rgb(rng, 32, 32)
        w = (100.0, 250.0, 300.0)[i % 3]
        pairs.append(synth_lowlight(rgb, w, NoiseModel(1e-4, 1e-6, seed=500 + i)))
    items = [(f"s{i:03d}", p) for i, p in enumerate(pairs)]

    variants = {
        "backbone": dict(enable_cab=False, enable_mab=False, enable_isl=False),
        "cab": dict(enable_cab=True, enable_mab=False, enable_isl=False),
        "mab": dict(enable_cab=True, enable_mab=True, enable_isl=False),
        "full": dict(enable_cab=True, enable_mab=True, enable_isl=True),
    }
    tcfg = TrainConfig(lr0=1e-2, schedule=(), epochs=30, beta2=0.99,
                       crop=32, use_augment=False, seed=0)
    scores = {}
    for name, toggles in variants.items():
        mcfg = ModelConfig.desk_scale(seed=0, **toggles)
        result = train(mcfg, tcfg, pairs)
        weights, _, _ = restore(result.checkpoint)
        report = evaluate(items, model_predictor(weights))
        all_row = [g for g in report.groups if g[0] == "all"][0]
        scores[name] = all_row[1]

    order = sorted(scores, key=scores.get, reverse=True)
    print("ablation means (20 shared-seed scenes, 30 epochs):")
    for name in ("backbone", "cab", "mab", "full"):
        print(f"  {name:9s} {scores[name]:6.2f} dB")
    print(f"observed ordering best-first: {' > '.join(order)}")
    print("expected at convergence:      full > mab > cab > backbone")
    # trend is reported, not asserted: a 30-epoch run is far from convergence
    assert all(np.isfinite(v) for v in scores.values())
    assert set(scores) == set(variants)


@criterion(9, "determinism, exact resume, byte-identical containers")
def test_criterion_9_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(9)
    pairs = [synth_lowlight(procedural_rgb(rng, 16, 16), 100.0,
                            NoiseModel(1e-4, 1e-6, seed=i)) for i in range(2)]
    mcfg = ModelConfig.desk_scale(seed=0)
    tcfg = TrainConfig(lr0=1e-3, schedule=(), epochs=4, crop=16, seed=5)

    # same seed, same bytes
    for name in ("a", "b"):
        save_checkpoint(tmp_path / f"{name}.alck",
                        train(mcfg, tcfg, pairs).checkpoint)
    assert (tmp_path / "a.alck").read_bytes() == (tmp_path / "b.alck").read_bytes()

    # interrupting after 2 epochs and resuming reproduces the 4-epoch run
    half = train(mcfg, TrainConfig(lr0=1e-3, schedule=(), epochs=2, crop=16,
                                   seed=5), pairs).checkpoint
    save_checkpoint(tmp_path / "half.alck", half)
    resumed = train(mcfg, tcfg, pairs,
                    resume=load_checkpoint(tmp_path / "half.alck")).checkpoint
    save_checkpoint(tmp_path / "resumed.alck", resumed)
    assert (tmp_path / "resumed.alck").read_bytes() == (tmp_path / "a.alck").read_bytes()

    # load -> save is the identity for every container format
    save_checkpoint(tmp_path / "c.alck", load_checkpoint(tmp_path / "a.alck"))
    assert (tmp_path / "c.alck").read_bytes() == (tmp_path / "a.alck").read_bytes()

    save_raw(tmp_path / "r1.alrw", pairs[0].input)
    save_raw(tmp_path / "r2.alrw", load_raw(tmp_path / "r1.alrw"))
    assert (tmp_path / "r1.alrw").read_bytes() == (tmp_path / "r2.alrw").read_bytes()

    save_rgb(tmp_path / "i1.ppm", pairs[0].target)
    save_rgb(tmp_path / "i2.ppm", load_rgb(tmp_path / "i1.ppm"))
    assert (tmp_path / "i1.ppm").read_bytes() == (tmp_path / "i2.ppm").read_bytes()

    # seeded inference is bit-stable
    weights = build(mcfg)
    a = enhance(weights, pairs[0].input, pairs[0].ratio)
    b = enhance(weights, pairs[0].input, pairs[0].ratio)
    assert np.array_equal(a, b)
