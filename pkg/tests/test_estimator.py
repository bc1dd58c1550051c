import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from alen.errors import DataError
from alen.estimator import LowLightEnhancer
from alen.rawdata import NoiseModel, Pair, procedural_rgb, synth_lowlight


def tiny_pairs(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [synth_lowlight(procedural_rgb(rng, size, size), 100.0,
                           NoiseModel(1e-4, 1e-6, seed=seed + i))
            for i in range(n)]


def fast_estimator(**overrides):
    args = dict(epochs=3, lr_schedule=(), crop=16, use_augment=False, seed=0)
    args.update(overrides)
    return LowLightEnhancer(**args)


def test_get_params_set_params_clone():
    est = LowLightEnhancer(base_width=16, epochs=7)
    params = est.get_params()
    assert params["base_width"] == 16 and params["epochs"] == 7
    est.set_params(depth=5)
    assert est.depth == 5
    dup = clone(est)
    assert dup.get_params() == est.get_params()
    assert dup is not est


def test_predict_before_fit_raises():
    est = LowLightEnhancer()
    with pytest.raises(NotFittedError):
        est.predict(tiny_pairs(1))
    with pytest.raises(NotFittedError):
        est.score(tiny_pairs(1))


def test_fit_returns_self_and_records_history():
    est = fast_estimator()
    pairs = tiny_pairs()
    assert est.fit(pairs) is est
    assert len(est.history_) == 3
    assert est.n_pairs_ == 2
    assert est.weights_.config.base_width == 8


def test_predict_shapes_and_range():
    pairs = tiny_pairs()
    est = fast_estimator().fit(pairs)
    preds = est.predict(pairs)
    assert len(preds) == 2
    for out in preds:
        assert out.shape == (3, 16, 16)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0
    # single Pair accepted without wrapping
    (single,) = est.predict(pairs[0])
    assert np.array_equal(single, preds[0])


def test_transform_is_predict():
    pairs = tiny_pairs(1)
    est = fast_estimator().fit(pairs)
    a = est.predict(pairs)
    b = est.transform(pairs)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_seeded_fits_identical():
    pairs = tiny_pairs()
    p1 = fast_estimator(seed=11).fit(pairs).predict(pairs)
    p2 = fast_estimator(seed=11).fit(pairs).predict(pairs)
    assert all(np.array_equal(x, y) for x, y in zip(p1, p2))


def test_score_is_mean_psnr():
    pairs = tiny_pairs()
    est = fast_estimator().fit(pairs)
    s = est.score(pairs)
    assert np.isfinite(s)
    from alen.losses import psnr
    expected = np.mean([psnr(out[None], p.target)
                        for out, p in zip(est.predict(pairs), pairs)])
    assert s == pytest.approx(expected)


def test_rejects_non_pair_input():
    est = fast_estimator()
    with pytest.raises(DataError, match="Pair"):
        est.fit([np.zeros((3, 4, 4))])
    with pytest.raises(DataError, match="empty"):
        est.fit([])
    with pytest.raises(DataError):
        est.fit(42)
