"""The enhancement network: a U-net over packed raw input with attention blocks.

Encoder level k runs two 3x3 convs (ReLU) at width base*2^(k-1) followed by an
attention block (mixed attention, or channel attention alone, per config);
levels are joined by inverted-shuffle downsamplers or 2x2 max pooling. The
decoder mirrors with kernel-2 stride-2 transposed convs and skip concatenation.
A 1x1 head produces 12 channels that pixel-shuffle to RGB at twice the packed
resolution, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .blocks import (CabParams, IslParams, MabParams, channel_attention_forward,
                     inverted_shuffle_forward, mixed_attention_forward)
from .errors import ConfigurationError, DataError, DimensionError
from .rawdata import RawFrame, pack_bayer
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    depth: int = 5
    ratios: Tuple[float, float, float, float] = (0.5, 0.8, 1.0, 1.2)
    enable_cab: bool = True
    enable_mab: bool = True
    enable_isl: bool = True
    nonlocal_downsample: int = 2
    cab_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.base_width < 1 or self.depth < 1:
            raise ConfigurationError("base_width and depth must be positive")
        if self.enable_mab and not self.enable_cab:
            raise ConfigurationError("enable_mab requires enable_cab (blocks are cumulative)")
        if len(self.ratios) != 4 or any(r <= 0 for r in self.ratios):
            raise ConfigurationError(f"ratios must be 4 positive values, got {self.ratios}")
        if self.nonlocal_downsample < 1:
            raise ConfigurationError("nonlocal_downsample must be >= 1")

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        """A laptop-sized variant: 8->16->32 widths, 3 levels."""
        args = dict(base_width=8, depth=3)
        args.update(overrides)
        return cls(**args)


@dataclass
class _EncoderLevel:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    attn: object = None  # MabParams | CabParams | None


@dataclass
class _DecoderLevel:
    up_w: Tensor
    up_b: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor


class ModelWeights:
    """The parameter tree plus a flat name->tensor map in construction order."""

    def __init__(self, config: ModelConfig, enc: List[_EncoderLevel],
                 downs: List[Optional[IslParams]], dec: List[_DecoderLevel],
                 head_w: Tensor, head_b: Tensor):
        self.config = config
        self.enc = enc
        self.downs = downs
        self.dec = dec
        self.head_w = head_w
        self.head_b = head_b
        self.params: Dict[str, Tensor] = dict(self._walk())

    def _walk(self) -> Iterator[Tuple[str, Tensor]]:
        depth = self.config.depth
        for k, lvl in enumerate(self.enc, start=1):
            yield f"enc.l{k}.conv1.weight", lvl.conv1_w
            yield f"enc.l{k}.conv1.bias", lvl.conv1_b
            yield f"enc.l{k}.conv2.weight", lvl.conv2_w
            yield f"enc.l{k}.conv2.bias", lvl.conv2_b
            if isinstance(lvl.attn, MabParams):
                yield from lvl.attn.named(f"enc.l{k}.mab")
            elif isinstance(lvl.attn, CabParams):
                yield from lvl.attn.named(f"enc.l{k}.cab")
            if k < depth and self.downs[k - 1] is not None:
                yield from self.downs[k - 1].named(f"down.d{k}")
        for i, lvl in enumerate(self.dec):
            k = depth - 1 - i  # decoder runs from the bottleneck back up
            yield f"dec.l{k}.up.weight", lvl.up_w
            yield f"dec.l{k}.up.bias", lvl.up_b
            yield f"dec.l{k}.conv1.weight", lvl.conv1_w
            yield f"dec.l{k}.conv1.bias", lvl.conv1_b
            yield f"dec.l{k}.conv2.weight", lvl.conv2_w
            yield f"dec.l{k}.conv2.bias", lvl.conv2_b
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def _conv_init(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
    return w, b


def _convt_init(rng, cin, cout, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = Tensor(rng.uniform(-bound, bound, (cin, cout, k, k)).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
    return w, b


def build(config: ModelConfig) -> ModelWeights:
    """Construct seeded weights for the configured architecture.

    Parameters are drawn in a fixed order, so equal configs (same seed)
    produce bitwise-identical weights.
    """
    rng = np.random.default_rng(config.seed)
    widths = [config.base_width * 2 ** k for k in range(config.depth)]

    enc: List[_EncoderLevel] = []
    downs: List[Optional[IslParams]] = []
    cin = 16
    for k, width in enumerate(widths, start=1):
        c1w, c1b = _conv_init(rng, width, cin, 3)
        c2w, c2b = _conv_init(rng, width, width, 3)
        attn = None
        if config.enable_mab:
            attn = MabParams.init(rng, width, config.cab_reduction,
                                  config.nonlocal_downsample)
        elif config.enable_cab:
            attn = CabParams.init(rng, width, config.cab_reduction)
        enc.append(_EncoderLevel(c1w, c1b, c2w, c2b, attn))
        if k < config.depth:
            # the downsampler keeps the channel count; the next level's convs widen
            downs.append(IslParams.init(rng, width, channels_out=width)
                         if config.enable_isl else None)
        cin = width

    dec: List[_DecoderLevel] = []
    for k in range(config.depth - 1, 0, -1):
        upper, lower = widths[k - 1], widths[k]
        up_w, up_b = _convt_init(rng, lower, upper, 2)
        c1w, c1b = _conv_init(rng, upper, 2 * upper, 3)
        c2w, c2b = _conv_init(rng, upper, upper, 3)
        dec.append(_DecoderLevel(up_w, up_b, c1w, c1b, c2w, c2b))

    head_w, head_b = _conv_init(rng, 12, widths[0], 1)
    return ModelWeights(config, enc, downs, dec, head_w, head_b)


def preprocess_raw(raw: RawFrame, w: float, config: ModelConfig) -> Tensor:
    """Normalize, pack, and stack four ratio-amplified copies (16 channels).

    Each copy is packed * (w * ratio_k), clipped to [0, 1]; the ratio-1.0 copy
    is exactly packed * w.
    """
    if w <= 0:
        raise DataError(f"amplification ratio {w} must be positive")
    packed = pack_bayer(raw).data
    amped = packed * np.float32(w)
    blocks = [np.clip(amped * np.float32(r), 0.0, 1.0) for r in config.ratios]
    return Tensor(np.concatenate(blocks, axis=1))


def forward(weights: ModelWeights, x: Tensor) -> Tensor:
    """Map the (N,16,h,w) packed stack to clamped RGB at (N,3,2h,2w)."""
    cfg = weights.config
    if x.data.ndim != 4 or x.shape[1] != 16:
        raise DimensionError(f"expected (N,16,h,w) input, got {x.shape}")
    n, _, h, w = x.shape
    m = 2 ** (cfg.depth - 1)
    if h % m or w % m:
        raise DimensionError(
            f"spatial dims {h}x{w} must be multiples of {m} (raw frames of {2 * m})")

    skips = []
    for k, lvl in enumerate(weights.enc, start=1):
        x = T.relu(T.conv2d(x, lvl.conv1_w, lvl.conv1_b, padding=1))
        x = T.relu(T.conv2d(x, lvl.conv2_w, lvl.conv2_b, padding=1))
        if isinstance(lvl.attn, MabParams):
            x = mixed_attention_forward(x, lvl.attn)
        elif isinstance(lvl.attn, CabParams):
            x = channel_attention_forward(x, lvl.attn)
        if k < cfg.depth:
            skips.append(x)
            isl = weights.downs[k - 1]
            x = inverted_shuffle_forward(x, isl) if isl is not None else T.max_pool2(x)

    for i, lvl in enumerate(weights.dec):
        x = T.conv_transpose2d(x, lvl.up_w, lvl.up_b, stride=2)
        x = T.concat_channels([x, skips[-(i + 1)]])
        x = T.relu(T.conv2d(x, lvl.conv1_w, lvl.conv1_b, padding=1))
        x = T.relu(T.conv2d(x, lvl.conv2_w, lvl.conv2_b, padding=1))

    x = T.conv2d(x, weights.head_w, weights.head_b)
    return T.clamp01(T.pixel_shuffle(x, 2))


def enhance(weights: ModelWeights, raw: RawFrame, w: float) -> np.ndarray:
    """Full inference path: preprocess + forward, no graph, numpy RGB out."""
    with T.no_grad():
        return forward(weights, preprocess_raw(raw, w, weights.config)).data


# ---------------------------------------------------------------------------
# plain-text key-value config files


def parse_config_file(path) -> Dict[str, str]:
    """`key = value` lines; '#' starts a comment; later keys win."""
    out: Dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_MODEL_KEYS = ("base_width", "depth", "ratios", "enable_cab", "enable_mab",
               "enable_isl", "nonlocal_downsample", "cab_reduction", "seed")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise DataError(f"expected a boolean, got {s!r}")


def model_config_from_kv(kv: Dict[str, str]) -> ModelConfig:
    args = {}
    try:
        for key in _MODEL_KEYS:
            if key not in kv:
                continue
            v = kv[key]
            if key in ("base_width", "depth", "nonlocal_downsample", "cab_reduction", "seed"):
                args[key] = int(v)
            elif key == "ratios":
                args[key] = tuple(float(x) for x in v.split(","))
            else:
                args[key] = _parse_bool(v)
    except ValueError as e:
        raise DataError(f"bad value for {key!r}: {kv[key]!r}") from e
    return ModelConfig(**args)


def load_model_config(path) -> ModelConfig:
    return model_config_from_kv(parse_config_file(path))


def model_config_to_kv(cfg: ModelConfig) -> Dict[str, str]:
    return {
        "base_width": str(cfg.base_width),
        "depth": str(cfg.depth),
        "ratios": ",".join(repr(r) for r in cfg.ratios),
        "enable_cab": str(cfg.enable_cab).lower(),
        "enable_mab": str(cfg.enable_mab).lower(),
        "enable_isl": str(cfg.enable_isl).lower(),
        "nonlocal_downsample": str(cfg.nonlocal_downsample),
        "cab_reduction": str(cfg.cab_reduction),
        "seed": str(cfg.seed),
    }
