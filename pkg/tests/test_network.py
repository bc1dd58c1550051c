"""Network tests: config rules, seeded builds, a hand parameter count, shapes."""

import numpy as np
import pytest

from alen import network as N
from alen import rawdata as R
from alen.errors import ConfigurationError, DataError, DimensionError
from alen.tensor import Tensor


def desk(**kw):
    return N.ModelConfig.desk_scale(**kw)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        desk(enable_mab=True, enable_cab=False)
    with pytest.raises(ConfigurationError):
        desk(ratios=(1.0, 2.0, 3.0))
    with pytest.raises(ConfigurationError):
        desk(ratios=(1.0, 2.0, 3.0, -1.0))
    with pytest.raises(ConfigurationError):
        desk(depth=0)
    assert desk().base_width == 8 and desk().depth == 3
    assert N.ModelConfig().base_width == 32 and N.ModelConfig().depth == 5


def test_build_is_seed_deterministic():
    a = N.build(desk(seed=5))
    b = N.build(desk(seed=5))
    c = N.build(desk(seed=6))
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_parameter_count_matches_hand_count():
    # independent layer-by-layer arithmetic for the full desk config
    # (widths 8/16/32, 16 input channels, reduction 4, ISL keeps channels)
    def conv(co, ci, k):
        return co * ci * k * k + co

    def cab(c):
        return (c // 4) * c + c // 4 + c * (c // 4) + c

    def mab(c):
        nl = 3 * (c // 2) * c + c * (c // 2)
        return nl + cab(2 * c) + conv(c, 2 * c, 1)

    def isl(c):
        return conv(c, 4 * c, 1)

    want = (
        conv(8, 16, 3) + conv(8, 8, 3) + mab(8) + isl(8)
        + conv(16, 8, 3) + conv(16, 16, 3) + mab(16) + isl(16)
        + conv(32, 16, 3) + conv(32, 32, 3) + mab(32)
        + (32 * 16 * 4 + 16) + conv(16, 32, 3) + conv(16, 16, 3)   # up to level 2
        + (16 * 8 * 4 + 8) + conv(8, 16, 3) + conv(8, 8, 3)       # up to level 1
        + conv(12, 8, 1)
    )
    got = N.build(desk()).parameter_count()
    assert got == want


def test_ablation_parameter_monotonicity():
    backbone = N.build(desk(enable_cab=False, enable_mab=False, enable_isl=False))
    with_cab = N.build(desk(enable_cab=True, enable_mab=False, enable_isl=False))
    with_mab = N.build(desk(enable_cab=True, enable_mab=True, enable_isl=False))
    full = N.build(desk(enable_cab=True, enable_mab=True, enable_isl=True))
    counts = [m.parameter_count() for m in (backbone, with_cab, with_mab, full)]
    assert counts[0] < counts[1] < counts[2] < counts[3]
    # swapping max-pool for inverted shuffle adds exactly the projection convs
    isl_extra = sum(4 * c * c + c for c in (8, 16))
    assert counts[3] - counts[2] == isl_extra


def test_parameter_names_unique_and_shaped():
    m = N.build(desk())
    names = list(m.params)
    assert len(names) == len(set(names))
    assert "enc.l2.mab.cab.fc1.weight" in names
    assert "down.d1.proj.weight" in names
    assert "dec.l1.up.weight" in names
    assert m.params["head.weight"].shape == (12, 8, 1, 1)
    for t in m.params.values():
        assert t.requires_grad


def raw_frame(norm_value, h=8, w=8):
    m = np.full((h, w), norm_value, np.float32)
    return R.RawFrame(m, "RGGB", black_level=0.0, white_level=1.0,
                      exposure_s=0.1, iso=100)


def test_preprocess_ratio_fixture():
    x = N.preprocess_raw(raw_frame(0.002), 100.0, desk())
    assert x.shape == (1, 16, 4, 4)
    for k, want in enumerate([0.1, 0.16, 0.2, 0.24]):
        assert np.allclose(x.data[0, 4 * k:4 * (k + 1)], want, atol=1e-6), k


def test_preprocess_clipping_and_identity():
    x = N.preprocess_raw(raw_frame(0.5), 100.0, desk())
    assert np.array_equal(x.data, np.ones_like(x.data))       # all four copies clip
    cfg = desk(ratios=(1.0, 1.0, 1.0, 1.0))
    x = N.preprocess_raw(raw_frame(0.25), 1.0, cfg)
    for k in range(4):
        assert np.array_equal(x.data[0, 4 * k:4 * (k + 1)], x.data[0, :4])
    with pytest.raises(DataError):
        N.preprocess_raw(raw_frame(0.25), 0.0, cfg)
    with pytest.raises(DataError):
        N.preprocess_raw(raw_frame(0.25), -2.0, cfg)


def test_preprocess_preclip_ratio_relationship_exact():
    rng = np.random.default_rng(71)
    m = (rng.random((8, 8)) * 0.004).astype(np.float32)  # small: no clipping anywhere
    f = R.RawFrame(m, "RGGB", 0.0, 1.0, 0.1, 100)
    cfg = desk()
    x = N.preprocess_raw(f, 50.0, cfg).data
    base = x[0, 8:12]  # the ratio-1.0 block
    for k, r in enumerate(cfg.ratios):
        assert np.array_equal(x[0, 4 * k:4 * (k + 1)], base * np.float32(r)), k


def test_forward_shapes_and_range():
    model = N.build(desk(seed=1))
    rng = np.random.default_rng(72)
    target = rng.random((1, 3, 64, 64)).astype(np.float32)
    pair = R.synth_lowlight(target, 100.0, R.NoiseModel(1e-3, 1e-5, 3))
    x = N.preprocess_raw(pair.input, pair.ratio, model.config)
    assert x.shape == (1, 16, 32, 32)
    out = N.forward(model, x)
    assert out.shape == (1, 3, 64, 64)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    again = N.forward(model, N.preprocess_raw(pair.input, pair.ratio, model.config))
    assert np.array_equal(out.data, again.data)  # deterministic forward


def test_forward_divisibility_error_names_multiple():
    model = N.build(desk())
    with pytest.raises(DimensionError, match="4"):
        N.forward(model, Tensor(np.zeros((1, 16, 6, 8), np.float32)))
    with pytest.raises(DimensionError):
        N.forward(model, Tensor(np.zeros((1, 4, 8, 8), np.float32)))


def test_full_depth_backbone_512_shape():
    # full-resolution shape contract on the plain 5-level backbone
    cfg = N.ModelConfig(enable_cab=False, enable_mab=False, enable_isl=False, seed=2)
    model = N.build(cfg)
    f = R.RawFrame(np.zeros((512, 512), np.float32), "RGGB", 0.0, 1.0, 0.1, 100)
    x = N.preprocess_raw(f, 100.0, cfg)
    assert x.shape == (1, 16, 256, 256)
    out = N.enhance(model, f, 100.0)
    assert out.shape == (1, 3, 512, 512)


def test_all_parameters_receive_finite_gradients():
    model = N.build(desk(seed=3))
    rng = np.random.default_rng(73)
    x = Tensor(rng.random((1, 16, 8, 8)).astype(np.float32))
    out = N.forward(model, x)
    r = Tensor(rng.standard_normal(out.shape).astype(np.float32))
    (out * r).sum().backward()
    for name, t in model.params.items():
        assert t.grad is not None, name
        assert np.isfinite(t.grad).all(), name


def test_model_config_file_roundtrip(tmp_path):
    cfg = desk(seed=9, ratios=(0.25, 0.5, 1.0, 2.0), enable_isl=False)
    kv = N.model_config_to_kv(cfg)
    text = "# test config\n" + "\n".join(f"{k} = {v}" for k, v in kv.items()) + "\n"
    p = tmp_path / "m.cfg"
    p.write_text(text)
    assert N.load_model_config(p) == cfg
    p.write_text("depth = banana\n")
    with pytest.raises(DataError):
        N.load_model_config(p)
    p.write_text("no equals sign here\n")
    with pytest.raises(DataError):
        N.load_model_config(p)
