"""Training loop (Adam + stepped schedule), checkpointing, and evaluation.

Checkpoint container: magic "ALCK", u16 version, u32-length-prefixed key-value
text (architecture config, epoch, Adam step count, RNG state), then one section
per tensor — u16 name length, name bytes, 4 little-endian u32 shape entries
(trailing 1-padded), f32 payload — weights first, then Adam first moments, then
second moments. Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, NonFiniteLossError, UsageError
from .losses import LossConfig, combined_loss, psnr, ssim_metric
from .network import (ModelConfig, ModelWeights, build, enhance, forward,
                      model_config_from_kv, model_config_to_kv, preprocess_raw)
from .rawdata import Pair, augment
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    schedule: Tuple[Tuple[int, float], ...] = ((2000, 2e-5), (3000, 1e-5))
    epochs: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    crop: int = 512
    use_augment: bool = True
    checkpoint_every: int = 0  # 0: only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("lr0, epochs, batch_size must be positive")
        last_t, last_lr = 0, self.lr0
        for t, lr in self.schedule:
            if t <= last_t:
                raise ConfigurationError("schedule thresholds must increase strictly")
            if lr <= 0 or lr >= last_lr:
                raise ConfigurationError("schedule learning rates must decrease")
            last_t, last_lr = t, lr

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """200 epochs with breaks at 100/150 (same 50%/75% split), 64-px crops."""
        args = dict(epochs=200, schedule=((100, 2e-5), (150, 1e-5)), crop=64)
        args.update(overrides)
        return cls(**args)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate; a threshold epoch already uses the lower rate."""
    lr = cfg.lr0
    for t, v in cfg.schedule:
        if epoch >= t:
            lr = v
    return lr


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   t=0)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in parameter-name order."""
    for name in params:
        if name not in grads or grads[name] is None:
            raise UsageError(f"missing gradient for {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    epoch: int
    adam_t: int
    rng_state: Tuple[int, int, int, int]  # PCG64 state, inc, has_uint32, uinteger


def snapshot(weights: ModelWeights, state: AdamState, epoch: int,
             rng: np.random.Generator) -> Checkpoint:
    s = rng.bit_generator.state
    return Checkpoint(
        config=weights.config,
        params={k: t.data.copy() for k, t in weights.params.items()},
        m={k: a.copy() for k, a in state.m.items()},
        v={k: a.copy() for k, a in state.v.items()},
        epoch=epoch,
        adam_t=state.t,
        rng_state=(s["state"]["state"], s["state"]["inc"],
                   int(s["has_uint32"]), int(s["uinteger"])),
    )


def restore(ckpt: Checkpoint) -> Tuple[ModelWeights, AdamState, np.random.Generator]:
    weights = build(ckpt.config)
    for k, t in weights.params.items():
        t.data = ckpt.params[k].copy()
    state = AdamState(m={k: a.copy() for k, a in ckpt.m.items()},
                      v={k: a.copy() for k, a in ckpt.v.items()}, t=ckpt.adam_t)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": ckpt.rng_state[0], "inc": ckpt.rng_state[1]},
        "has_uint32": ckpt.rng_state[2],
        "uinteger": ckpt.rng_state[3],
    }
    return weights, state, rng


def _write_section(out: list, name: str, arr: np.ndarray) -> None:
    nb = name.encode("ascii")
    shape = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    out.append(struct.pack("<H", len(nb)))
    out.append(nb)
    out.append(struct.pack("<4I", *shape))
    out.append(arr.astype("<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    kv = model_config_to_kv(ckpt.config)
    kv["epoch"] = str(ckpt.epoch)
    kv["adam_t"] = str(ckpt.adam_t)
    for i, k in enumerate(("rng_state", "rng_inc", "rng_has_uint32", "rng_uinteger")):
        kv[k] = str(ckpt.rng_state[i])
    text = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("ascii")
    out = [b"ALCK", struct.pack("<H", 1), struct.pack("<I", len(text)), text]
    for group in (ckpt.params, ckpt.m, ckpt.v):
        for name, arr in group.items():
            _write_section(out, name, arr)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != b"ALCK":
        raise DataError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (text_len,) = struct.unpack_from("<I", blob, 6)
    pos = 10 + text_len
    if pos > len(blob):
        raise DataError(f"{path}: truncated header")
    kv: Dict[str, str] = {}
    for line in blob[10:pos].decode("ascii").splitlines():
        k, _, v = line.partition("=")
        kv[k] = v
    try:
        config = model_config_from_kv(kv)
        epoch = int(kv["epoch"])
        adam_t = int(kv["adam_t"])
        rng_state = tuple(int(kv[k]) for k in ("rng_state", "rng_inc",
                                               "rng_has_uint32", "rng_uinteger"))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint header: {e}") from e

    template = build(config)
    names = list(template.params)
    groups: List[Dict[str, np.ndarray]] = []
    for _ in range(3):
        group: Dict[str, np.ndarray] = {}
        for expect in names:
            if pos + 2 > len(blob):
                raise DataError(f"{path}: truncated tensor section")
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("ascii")
            pos += nlen
            shape = struct.unpack_from("<4I", blob, pos)
            pos += 16
            count = int(np.prod(shape))
            payload = blob[pos:pos + 4 * count]
            pos += 4 * count
            if name != expect:
                raise DataError(f"{path}: tensor {name!r} where {expect!r} expected")
            if len(payload) != 4 * count:
                raise DataError(f"{path}: truncated payload for {name!r}")
            want = template.params[name].data.shape
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            group[name] = arr.reshape(want).copy()
        groups.append(group)
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return Checkpoint(config=config, params=groups[0], m=groups[1], v=groups[2],
                      epoch=epoch, adam_t=adam_t, rng_state=rng_state)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[Tuple[int, float, float]]  # (epoch, mean loss, lr)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, pairs: Sequence[Pair],
          loss_cfg: LossConfig = LossConfig(), resume: Optional[Checkpoint] = None,
          out_dir=None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Seeded full training run; optionally continues from a checkpoint."""
    if not pairs:
        raise DataError("empty training dataset")
    if resume is not None:
        if resume.config != model_cfg:
            raise ConfigurationError("checkpoint was built for a different architecture")
        weights, state, rng = restore(resume)
        start_epoch = resume.epoch
    else:
        weights = build(model_cfg)
        state = AdamState.zeros(weights.params)
        rng = np.random.default_rng(train_cfg.seed)
        start_epoch = 0

    history: List[Tuple[int, float, float]] = []
    ckpt = snapshot(weights, state, start_epoch, rng)
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        order = rng.permutation(len(pairs))
        step_losses: List[float] = []
        for base in range(0, len(order), train_cfg.batch_size):
            batch = order[base:base + train_cfg.batch_size]
            losses = []
            for idx in batch:
                pair = pairs[int(idx)]
                if train_cfg.use_augment:
                    pair = augment(pair, int(rng.integers(0, 2 ** 63)),
                                   crop=min(train_cfg.crop, *pair.input.mosaic.shape))
                x = preprocess_raw(pair.input, pair.ratio, model_cfg)
                pred = forward(weights, x)
                losses.append(combined_loss(pred, Tensor(pair.target), loss_cfg))
            loss = losses[0] if len(losses) == 1 else _mean_scalars(losses)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, base // train_cfg.batch_size, value)
            step_losses.append(value)
            weights.zero_grads()
            loss.backward()
            grads = {k: t.grad for k, t in weights.params.items()}
            adam_step(weights.params, grads, state, lr, train_cfg)
        history.append((epoch, float(np.mean(step_losses)), lr))
        if log is not None:
            log(f"epoch {epoch}: loss {history[-1][1]:.6f} lr {lr:g}")
        done = epoch + 1
        ckpt = snapshot(weights, state, done, rng)
        if (out_dir is not None and train_cfg.checkpoint_every
                and done % train_cfg.checkpoint_every == 0 and done < train_cfg.epochs):
            save_checkpoint(Path(out_dir) / f"epoch{done:05d}.alck", ckpt)
    return TrainResult(checkpoint=ckpt, history=history)


def _mean_scalars(losses):
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return T.scale(total, 1.0 / len(losses))


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in history:
            wr.writerow([epoch, repr(float(loss)), repr(float(lr))])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsRow:
    scene: str
    ratio: float
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    rows: List[MetricsRow]
    groups: List[Tuple[str, float, float, int]]  # (label, mean psnr, mean ssim, n)


_CANONICAL_RATIOS = (100.0, 250.0, 300.0)


def _group_rows(rows: List[MetricsRow]) -> List[Tuple[str, float, float, int]]:
    distinct = sorted({r.ratio for r in rows})
    if all(r in _CANONICAL_RATIOS for r in distinct):
        order = [r for r in _CANONICAL_RATIOS if r in distinct]
    else:
        order = distinct
    groups = []
    for ratio in order:
        sub = [r for r in rows if r.ratio == ratio]
        groups.append((f"x{ratio:g}", float(np.mean([r.psnr_db for r in sub])),
                       float(np.mean([r.ssim for r in sub])), len(sub)))
    groups.append(("all", float(np.mean([r.psnr_db for r in rows])),
                   float(np.mean([r.ssim for r in rows])), len(rows)))
    return groups


def model_predictor(weights: ModelWeights) -> Callable[[Pair], np.ndarray]:
    return lambda pair: enhance(weights, pair.input, pair.ratio)


def evaluate(items: Sequence[Tuple[str, Pair]],
             predict_fn: Callable[[Pair], np.ndarray],
             loss_cfg: LossConfig = LossConfig(),
             max_workers: Optional[int] = None) -> MetricsReport:
    """Full-image PSNR/SSIM per pair plus ratio-bucket means.

    Results are collected in dataset order regardless of worker scheduling,
    so reports are deterministic.
    """
    if not items:
        raise DataError("empty evaluation dataset")

    def one(item):
        scene, pair = item
        pred = predict_fn(pair)
        with T.no_grad():
            s = ssim_metric(Tensor(pred), Tensor(pair.target), loss_cfg).item()
        return MetricsRow(scene=scene, ratio=pair.ratio,
                          psnr_db=psnr(pred, pair.target), ssim=s)

    if max_workers is not None and max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(item) for item in items]
    return MetricsReport(rows=rows, groups=_group_rows(rows))


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["scene", "ratio", "psnr_db", "ssim"])
        for r in report.rows:
            wr.writerow([r.scene, f"{r.ratio:g}", repr(r.psnr_db), repr(r.ssim)])


def format_report(report: MetricsReport) -> str:
    lines = [f"{'ratio':>8}  {'psnr_db':>10}  {'ssim':>8}  {'n':>4}"]
    for label, p, s, n in report.groups:
        lines.append(f"{label:>8}  {p:>10.3f}  {s:>8.4f}  {n:>4}")
    return "\n".join(lines)
