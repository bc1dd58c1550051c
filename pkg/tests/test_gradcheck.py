import numpy as np
import pytest

from alen import gradcheck as G
from alen import tensor as T
from alen.tensor import Tensor


REQUIRED = {
    "add", "sub", "mul", "div", "scale", "relu", "sigmoid", "abs", "clamp01",
    "softmax", "matmul", "matmul_batched", "reshape", "transpose",
    "concat_channels", "pixel_shuffle", "pixel_unshuffle", "max_pool2",
    "avg_pool2", "global_avg_pool", "sum", "mean", "conv2d", "conv2d_strided",
    "conv_transpose2d", "block_cab", "block_nonlocal_d1", "block_nonlocal_d2",
    "block_mab", "block_isl", "network_desk",
}


def test_registry_covers_every_primitive_and_block():
    names = set(G.check_names())
    missing = REQUIRED - names
    assert not missing, f"missing checks: {sorted(missing)}"


def test_all_checks_pass():
    results = G.run_checks()
    failed = [(r.name, r.max_rel_err) for r in results if not r.passed]
    assert not failed, f"gradient checks failed: {failed}"
    # errors should not merely scrape under the threshold
    assert max(r.max_rel_err for r in results) < 1e-4


def test_negative_control_simple_op():
    (r,) = G.run_checks(names=["conv2d"], perturb="conv2d")
    assert not r.passed
    # backward scaled by 1.3 -> relative error 0.3/1.3
    assert r.max_rel_err == pytest.approx(0.3 / 1.3, rel=1e-3)


def test_negative_control_network():
    (r,) = G.run_checks(names=["network_desk"], perturb="network_desk")
    assert not r.passed


def test_perturb_leaves_other_checks_alone():
    (r,) = G.run_checks(names=["add"], perturb="conv2d")
    assert r.passed


def test_unknown_check_name():
    with pytest.raises(KeyError):
        G.run_checks(names=["no_such_op"])


def test_results_deterministic_for_seed():
    a = G.run_checks(names=["mul", "softmax", "block_cab"], seed=3)
    b = G.run_checks(names=["mul", "softmax", "block_cab"], seed=3)
    assert [(r.name, r.max_rel_err) for r in a] == [(r.name, r.max_rel_err) for r in b]


def test_harness_flags_handwritten_bad_gradient():
    # a sigmoid whose backward drops the (1 - s) factor entirely
    def bad_sigmoid(xs):
        x = xs[0]
        s = 1.0 / (1.0 + np.exp(-x.data))

        def backward_fn(g):
            T._accumulate(x, g * s)

        return T._make(s, (x,), backward_fn)

    rng = np.random.default_rng(0)
    err = G.finite_diff_check(bad_sigmoid, [Tensor(rng.standard_normal((3, 4)))], rng)
    assert err > 1e-2


def test_adaptive_step_rescues_kink_adjacent_probe():
    # a relu input 2e-4 from the kink: the default 1e-3 step straddles it,
    # the shrunken retries do not, and the analytic subgradient is correct
    x = Tensor(np.array([[0.0002, 1.5], [-2.0, 0.7]]))
    rng = np.random.default_rng(1)
    err = G.finite_diff_check(lambda xs: T.relu(xs[0]), [x], rng)
    assert err < 1e-6
