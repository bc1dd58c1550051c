"""Central finite-difference verification for every primitive and block.

Each registered check builds float64 inputs that keep the op away from its
non-differentiable points (kinks, pooling ties, clamp edges), compares analytic
gradients against (f(x+h) - f(x-h)) / 2h elementwise, and reports the max
relative error |a - n| / max(|a|, |n|, 1e-3).

``perturb`` injects a deliberately wrong backward rule (an identity node whose
gradient is scaled) into one named check — the harness must then fail, which
is the negative control proving it can catch bad gradients.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import blocks as B
from . import network as N
from . import tensor as T
from .tensor import Tensor

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _corrupt(x: Tensor, factor: float = 1.3) -> Tensor:
    # identity forward, wrong backward: the negative-control fault
    def backward_fn(g, x=x, factor=factor):
        T._accumulate(x, g * factor)

    return T._make(x.data.copy(), (x,), backward_fn)


def finite_diff_check(fn: Callable[[Sequence[Tensor]], Tensor],
                      inputs: Sequence[Tensor], rng: np.random.Generator,
                      step: float = DEFAULT_STEP,
                      sample_per_input: Optional[int] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each probe retries with a 10x smaller step (three times) when the first
    difference quotient disagrees: a relu/clamp kink inside [x-h, x+h]
    contaminates the quotient but moves out of range as h shrinks, whereas a
    genuinely wrong analytic gradient keeps its discrepancy at every step
    size.  The reported error per probe is the best across step sizes.
    """
    inputs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(inputs)
    r = rng.standard_normal(out.shape) if out.shape else np.float64(1.0)
    rt = Tensor(np.asarray(r))
    (out * rt).sum().backward()

    def value() -> float:
        with_no = fn([Tensor(t.data) for t in inputs])
        return float((with_no.data * r).sum())

    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        n = flat.size
        if sample_per_input is not None and sample_per_input < n:
            idx = rng.choice(n, size=sample_per_input, replace=False)
        else:
            idx = range(n)
        grad = t.grad.reshape(-1) if t.grad is not None else np.zeros(n)
        for i in idx:
            saved = flat[i]
            best = np.inf
            h = step
            for _ in range(4):
                flat[i] = saved + h
                fp = value()
                flat[i] = saved - h
                fm = value()
                flat[i] = saved
                numeric = (fp - fm) / (2.0 * h)
                err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-3)
                best = min(best, err)
                if best < 1e-6:
                    break
                h /= 10.0
            worst = max(worst, best)
    return worst


def _away_from(x: np.ndarray, points: Sequence[float], gap: float) -> np.ndarray:
    # push values at least `gap` from each kink so FD never crosses one
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + gap * np.where(x >= p, 1.0, -1.0) * 2.0, x)
    return x


def _distinct_grid(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    # all-distinct values with pairwise gaps >= 0.01: ties become impossible
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01).reshape(shape)


def _registry() -> Dict[str, Callable]:
    rnd = lambda rng, *s: Tensor(rng.standard_normal(s))

    def check(fn, *inputs, sample=None, step=None):
        return fn, list(inputs), sample, step

    reg: Dict[str, Callable] = {}

    reg["add"] = lambda rng: check(lambda xs: xs[0] + xs[1], rnd(rng, 2, 3, 4, 4), rnd(rng, 2, 3, 4, 4))
    reg["add_broadcast"] = lambda rng: check(lambda xs: xs[0] + xs[1], rnd(rng, 2, 3, 4, 4), rnd(rng, 1, 3, 1, 1))
    reg["mul"] = lambda rng: check(lambda xs: xs[0] * xs[1], rnd(rng, 2, 3, 4, 4), rnd(rng, 2, 3, 4, 4))
    reg["mul_broadcast"] = lambda rng: check(lambda xs: xs[0] * xs[1], rnd(rng, 2, 3, 4, 4), rnd(rng, 2, 3, 1, 1))
    reg["sub"] = lambda rng: check(lambda xs: xs[0] - xs[1], rnd(rng, 3, 5), rnd(rng, 3, 5))
    reg["div"] = lambda rng: check(lambda xs: xs[0] / xs[1], rnd(rng, 3, 5),
                                   Tensor(rng.standard_normal((3, 5)) + np.where(rng.standard_normal((3, 5)) > 0, 3.0, -3.0)))
    reg["scale"] = lambda rng: check(lambda xs: T.scale(xs[0], -2.5), rnd(rng, 2, 3, 4, 4))
    reg["relu"] = lambda rng: check(lambda xs: T.relu(xs[0]),
                                    Tensor(_away_from(rng.standard_normal((2, 3, 4, 4)), [0.0], 0.01)))
    reg["sigmoid"] = lambda rng: check(lambda xs: T.sigmoid(xs[0]), rnd(rng, 2, 3, 4, 4))
    reg["abs"] = lambda rng: check(lambda xs: T.absolute(xs[0]),
                                   Tensor(_away_from(rng.standard_normal((4, 6)), [0.0], 0.01)))
    reg["clamp01"] = lambda rng: check(lambda xs: T.clamp01(xs[0]),
                                       Tensor(_away_from(rng.uniform(-0.5, 1.5, (2, 3, 4, 4)), [0.0, 1.0], 0.01)))
    reg["softmax"] = lambda rng: check(lambda xs: T.softmax(xs[0], axis=2), rnd(rng, 2, 5, 7))
    reg["matmul"] = lambda rng: check(lambda xs: T.matmul(xs[0], xs[1]), rnd(rng, 4, 5), rnd(rng, 5, 3))
    reg["matmul_batched"] = lambda rng: check(lambda xs: T.matmul(xs[0], xs[1]), rnd(rng, 3, 4, 5), rnd(rng, 3, 5, 2))
    reg["reshape"] = lambda rng: check(lambda xs: T.reshape(xs[0], (6, 4)), rnd(rng, 2, 3, 4))
    reg["transpose"] = lambda rng: check(lambda xs: T.transpose(xs[0], (2, 0, 1)), rnd(rng, 2, 3, 4))
    reg["concat_channels"] = lambda rng: check(lambda xs: T.concat_channels(xs),
                                               rnd(rng, 2, 3, 4, 4), rnd(rng, 2, 5, 4, 4))
    reg["pixel_shuffle"] = lambda rng: check(lambda xs: T.pixel_shuffle(xs[0], 2), rnd(rng, 2, 8, 3, 3))
    reg["pixel_unshuffle"] = lambda rng: check(lambda xs: T.pixel_unshuffle(xs[0], 2), rnd(rng, 2, 2, 6, 6))
    reg["max_pool2"] = lambda rng: check(lambda xs: T.max_pool2(xs[0]),
                                         Tensor(_distinct_grid(rng, (2, 3, 6, 6))))
    reg["avg_pool2"] = lambda rng: check(lambda xs: T.avg_pool2(xs[0], 2), rnd(rng, 2, 3, 6, 6))
    reg["global_avg_pool"] = lambda rng: check(lambda xs: T.global_avg_pool(xs[0]), rnd(rng, 2, 3, 5, 5))
    reg["sum"] = lambda rng: check(lambda xs: xs[0].sum(), rnd(rng, 3, 4, 5))
    reg["mean"] = lambda rng: check(lambda xs: xs[0].mean(), rnd(rng, 3, 4, 5))
    reg["conv2d"] = lambda rng: check(
        lambda xs: T.conv2d(xs[0], xs[1], xs[2], stride=1, padding=1),
        rnd(rng, 2, 3, 5, 5), rnd(rng, 4, 3, 3, 3), rnd(rng, 4))
    reg["conv2d_strided"] = lambda rng: check(
        lambda xs: T.conv2d(xs[0], xs[1], None, stride=2, padding=0),
        rnd(rng, 1, 2, 7, 7), rnd(rng, 3, 2, 3, 3))
    reg["conv_transpose2d"] = lambda rng: check(
        lambda xs: T.conv_transpose2d(xs[0], xs[1], xs[2], stride=2),
        rnd(rng, 1, 3, 4, 4), rnd(rng, 3, 2, 2, 2), rnd(rng, 2))

    def cab_check(rng):
        p = B.CabParams.init(rng, 8, 4)
        x = rnd(rng, 2, 8, 4, 4)
        return (lambda xs: B.channel_attention_forward(
            xs[0], B.CabParams(xs[1], xs[2], xs[3], xs[4])),
            [x, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b], None, None)

    reg["block_cab"] = cab_check

    def nonlocal_check(d):
        def builder(rng):
            p = B.NonLocalParams.init(rng, 4, d)
            x = rnd(rng, 1, 4, 4, 4)
            return (lambda xs: B.non_local_forward(
                xs[0], B.NonLocalParams(xs[1], xs[2], xs[3], xs[4], d)),
                [x, p.theta, p.phi, p.g, p.out], None, None)
        return builder

    reg["block_nonlocal_d1"] = nonlocal_check(1)
    reg["block_nonlocal_d2"] = nonlocal_check(2)

    def mab_check(rng):
        p = B.MabParams.init(rng, 4, 4, 2)
        x = rnd(rng, 1, 4, 4, 4)
        tensors = [x, p.nl.theta, p.nl.phi, p.nl.g, p.nl.out,
                   p.cab.fc1_w, p.cab.fc1_b, p.cab.fc2_w, p.cab.fc2_b,
                   p.fuse_w, p.fuse_b]

        def fn(xs):
            q = B.MabParams(
                nl=B.NonLocalParams(xs[1], xs[2], xs[3], xs[4], 2),
                cab=B.CabParams(xs[5], xs[6], xs[7], xs[8]),
                fuse_w=xs[9], fuse_b=xs[10])
            return B.mixed_attention_forward(xs[0], q)

        return fn, tensors, None, None

    reg["block_mab"] = mab_check

    def isl_check(rng):
        p = B.IslParams.init(rng, 3)
        x = rnd(rng, 1, 3, 4, 4)
        return (lambda xs: B.inverted_shuffle_forward(
            xs[0], B.IslParams(xs[1], xs[2])), [x, p.proj_w, p.proj_b], None, None)

    reg["block_isl"] = isl_check
    reg["network_desk"] = _network_check
    return reg


def _network_check(rng):
    # full desk-scale model; FD over a ~1% random sample of all parameters.
    # the head bias is shifted so pre-clamp outputs sit inside (0,1) and the
    # output clamp cannot put a sampled step across its kink.
    for _ in range(100):
        model = N.build(N.ModelConfig.desk_scale(seed=int(rng.integers(2 ** 31))))
        model.head_b.data += 0.5
        x = Tensor(rng.uniform(0.1, 0.9, (1, 16, 8, 8)).astype(np.float32))
        out = N.forward(model, x)
        margin = min(out.data.min(), 1.0 - out.data.max())
        if margin > 0.05:
            break
    names = list(model.params)
    tensors = [x] + [model.params[n] for n in names]
    total = sum(t.size for t in tensors)
    sample = max(1, int(np.ceil(total * 0.01 / len(tensors))))

    def fn(xs):
        rebuilt = _rebind(model, dict(zip(names, xs[1:])))
        return N.forward(rebuilt, xs[0])

    # a 1e-3 step crosses hidden-relu kinks through this many layers; 1e-4
    # stays inside the piecewise-linear region while float64 roundoff is
    # still ~1e-11 of the quotient.
    return fn, tensors, sample, 1e-4


def _rebind(model: N.ModelWeights, repl: Dict[str, Tensor]) -> N.ModelWeights:
    """A copy of the weight tree with tensors swapped in by parameter name."""
    import copy

    clone = copy.copy(model)
    clone.enc = [copy.copy(l) for l in model.enc]
    clone.downs = list(model.downs)
    clone.dec = [copy.copy(l) for l in model.dec]
    depth = model.config.depth
    for i, lvl in enumerate(clone.enc):
        k = i + 1
        lvl.conv1_w = repl[f"enc.l{k}.conv1.weight"]
        lvl.conv1_b = repl[f"enc.l{k}.conv1.bias"]
        lvl.conv2_w = repl[f"enc.l{k}.conv2.weight"]
        lvl.conv2_b = repl[f"enc.l{k}.conv2.bias"]
        if isinstance(lvl.attn, B.MabParams):
            pre = f"enc.l{k}.mab"
            lvl.attn = B.MabParams(
                nl=B.NonLocalParams(repl[f"{pre}.nl.theta.weight"], repl[f"{pre}.nl.phi.weight"],
                                    repl[f"{pre}.nl.g.weight"], repl[f"{pre}.nl.out.weight"],
                                    lvl.attn.nl.downsample),
                cab=B.CabParams(repl[f"{pre}.cab.fc1.weight"], repl[f"{pre}.cab.fc1.bias"],
                                repl[f"{pre}.cab.fc2.weight"], repl[f"{pre}.cab.fc2.bias"]),
                fuse_w=repl[f"{pre}.fuse.weight"], fuse_b=repl[f"{pre}.fuse.bias"])
        elif isinstance(lvl.attn, B.CabParams):
            pre = f"enc.l{k}.cab"
            lvl.attn = B.CabParams(repl[f"{pre}.fc1.weight"], repl[f"{pre}.fc1.bias"],
                                   repl[f"{pre}.fc2.weight"], repl[f"{pre}.fc2.bias"])
        if k < depth and clone.downs[i] is not None:
            clone.downs[i] = B.IslParams(repl[f"down.d{k}.proj.weight"],
                                         repl[f"down.d{k}.proj.bias"])
    for i, lvl in enumerate(clone.dec):
        k = depth - 1 - i
        lvl.up_w = repl[f"dec.l{k}.up.weight"]
        lvl.up_b = repl[f"dec.l{k}.up.bias"]
        lvl.conv1_w = repl[f"dec.l{k}.conv1.weight"]
        lvl.conv1_b = repl[f"dec.l{k}.conv1.bias"]
        lvl.conv2_w = repl[f"dec.l{k}.conv2.weight"]
        lvl.conv2_b = repl[f"dec.l{k}.conv2.bias"]
    clone.head_w = repl["head.weight"]
    clone.head_b = repl["head.bias"]
    clone.params = {name: repl[name] for name in model.params}
    return clone


def check_names() -> List[str]:
    return list(_registry())


def run_checks(names: Optional[Sequence[str]] = None, seed: int = 0,
               tol: float = DEFAULT_TOL, perturb: Optional[str] = None) -> List[CheckResult]:
    """Run the named checks (all by default); `perturb` corrupts one of them."""
    reg = _registry()
    if names is None:
        names = list(reg)
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    results = []
    for name in names:
        rng = np.random.default_rng(seed + zlib.crc32(name.encode()) % 10_000)
        fn, inputs, sample, step = reg[name](rng)
        if perturb == name:
            inner = fn
            fn = lambda xs, inner=inner: _corrupt(inner(xs))
        err = finite_diff_check(fn, inputs, rng, step=step or DEFAULT_STEP,
                                sample_per_input=sample)
        results.append(CheckResult(name=name, max_rel_err=err, tol=tol))
    return results
