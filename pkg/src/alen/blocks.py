"""Attention building blocks: channel attention, non-local, mixed, inverted shuffle.

Each block is a plain dataclass of parameter tensors plus a forward function
composed purely from tensor-engine primitives, so every block is differentiable
end to end. ``init`` classmethods draw weights from a centered uniform scaled
by 1/sqrt(fan_in) and zero the biases; construction order is fixed so a seeded
generator reproduces identical weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32), requires_grad=True)


def _zeros(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


@dataclass
class CabParams:
    """Channel attention: squeeze (GAP) -> fc1 -> relu -> fc2 -> sigmoid -> scale."""

    fc1_w: Tensor  # (C/r, C)
    fc1_b: Tensor  # (C/r,)
    fc2_w: Tensor  # (C, C/r)
    fc2_b: Tensor  # (C,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int) -> "CabParams":
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"channel attention: reduction {reduction} must divide {channels} channels")
        mid = channels // reduction
        return cls(
            fc1_w=_uniform(rng, (mid, channels), channels),
            fc1_b=_zeros((mid,)),
            fc2_w=_uniform(rng, (channels, mid), mid),
            fc2_b=_zeros((channels,)),
        )

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.fc1.weight", self.fc1_w
        yield f"{prefix}.fc1.bias", self.fc1_b
        yield f"{prefix}.fc2.weight", self.fc2_w
        yield f"{prefix}.fc2.bias", self.fc2_b


def channel_attention_forward(x: Tensor, p: CabParams) -> Tensor:
    n, c = x.shape[0], x.shape[1]
    s = T.reshape(T.global_avg_pool(x), (n, c))                   # (N,C)
    s = T.matmul(s, T.transpose(p.fc1_w, (1, 0))) + p.fc1_b       # (N,C/r)
    s = T.relu(s)
    s = T.matmul(s, T.transpose(p.fc2_w, (1, 0))) + p.fc2_b       # (N,C)
    s = T.sigmoid(s)
    return x * T.reshape(s, (n, c, 1, 1))


@dataclass
class NonLocalParams:
    """Non-local attention over all spatial positions, queries at full resolution.

    theta/phi/g/out are bias-free 1x1 convs; keys and values come from a
    d-times average-pooled copy of the input to cut the pairwise cost.
    """

    theta: Tensor  # (C/2, C, 1, 1)
    phi: Tensor    # (C/2, C, 1, 1)
    g: Tensor      # (C/2, C, 1, 1)
    out: Tensor    # (C, C/2, 1, 1)
    downsample: int

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, downsample: int) -> "NonLocalParams":
        if channels % 2:
            raise ConfigurationError(f"non-local: channel count {channels} must be even")
        if downsample < 1:
            raise ConfigurationError(f"non-local: downsample factor {downsample} < 1")
        inner = channels // 2
        return cls(
            theta=_uniform(rng, (inner, channels, 1, 1), channels),
            phi=_uniform(rng, (inner, channels, 1, 1), channels),
            g=_uniform(rng, (inner, channels, 1, 1), channels),
            out=_uniform(rng, (channels, inner, 1, 1), inner),
            downsample=downsample,
        )

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.theta.weight", self.theta
        yield f"{prefix}.phi.weight", self.phi
        yield f"{prefix}.g.weight", self.g
        yield f"{prefix}.out.weight", self.out


def non_local_forward(x: Tensor, p: NonLocalParams) -> Tensor:
    n, c, h, w = x.shape
    d = p.downsample
    q = T.conv2d(x, p.theta)                                      # (N,C/2,H,W)
    pooled = T.avg_pool2(x, d) if d > 1 else x
    k = T.conv2d(pooled, p.phi)                                   # (N,C/2,H/d,W/d)
    v = T.conv2d(pooled, p.g)
    inner = q.shape[1]
    hw, m = h * w, (h // d) * (w // d)
    qf = T.transpose(T.reshape(q, (n, inner, hw)), (0, 2, 1))     # (N,HW,C/2)
    kf = T.reshape(k, (n, inner, m))                              # (N,C/2,M)
    attn = T.softmax(T.matmul(qf, kf), axis=2)                    # rows sum to 1
    vf = T.transpose(T.reshape(v, (n, inner, m)), (0, 2, 1))      # (N,M,C/2)
    y = T.matmul(attn, vf)                                        # (N,HW,C/2)
    y = T.reshape(T.transpose(y, (0, 2, 1)), (n, inner, h, w))
    return x + T.conv2d(y, p.out)


@dataclass
class MabParams:
    """Mixed attention: non-local branch, concat with input, channel attention, 1x1 fuse."""

    nl: NonLocalParams
    cab: CabParams        # over 2C channels
    fuse_w: Tensor        # (C, 2C, 1, 1)
    fuse_b: Tensor        # (C,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int,
             downsample: int) -> "MabParams":
        return cls(
            nl=NonLocalParams.init(rng, channels, downsample),
            cab=CabParams.init(rng, 2 * channels, reduction),
            fuse_w=_uniform(rng, (channels, 2 * channels, 1, 1), 2 * channels),
            fuse_b=_zeros((channels,)),
        )

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield from self.nl.named(f"{prefix}.nl")
        yield from self.cab.named(f"{prefix}.cab")
        yield f"{prefix}.fuse.weight", self.fuse_w
        yield f"{prefix}.fuse.bias", self.fuse_b


def mixed_attention_forward(x: Tensor, p: MabParams) -> Tensor:
    y = non_local_forward(x, p.nl)
    z = T.concat_channels([x, y])                                 # (N,2C,H,W)
    z = channel_attention_forward(z, p.cab)
    return T.conv2d(z, p.fuse_w, p.fuse_b)                        # back to C


@dataclass
class IslParams:
    """Inverted shuffle downsampler: space-to-depth (r=2) then a 1x1 projection."""

    proj_w: Tensor  # (Cout, 4*Cin, 1, 1)
    proj_b: Tensor  # (Cout,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels_in: int,
             channels_out: int | None = None) -> "IslParams":
        cout = 2 * channels_in if channels_out is None else channels_out
        return cls(
            proj_w=_uniform(rng, (cout, 4 * channels_in, 1, 1), 4 * channels_in),
            proj_b=_zeros((cout,)),
        )

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.proj.weight", self.proj_w
        yield f"{prefix}.proj.bias", self.proj_b


def inverted_shuffle_forward(x: Tensor, p: IslParams) -> Tensor:
    return T.conv2d(T.pixel_unshuffle(x, 2), p.proj_w, p.proj_b)
