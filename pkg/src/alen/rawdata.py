"""Raw Bayer data handling: packing, synthetic low-light pairs, augmentation, I/O.

File formats:
  - raw container: magic "ALRW", u16 version, u16 pattern, u32 H, u32 W,
    f32 black, f32 white, f32 exposure_s, u32 iso, then H*W little-endian
    f32 counts, row-major.
  - RGB: binary 16-bit PPM (P6, maxval 65535), linear values * 65535.
  - dataset manifest: pairs.csv with header scene,raw,target,ratio.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

# 2x2 cell layout per pattern, row-major
_CELLS = {
    "RGGB": (("R", "G"), ("G", "B")),
    "BGGR": (("B", "G"), ("G", "R")),
    "GRBG": (("G", "R"), ("B", "G")),
    "GBRG": (("G", "B"), ("R", "G")),
}


def _plane_offsets(pattern: str) -> dict:
    """Cell coordinates of R, G1 (green sharing R's row), G2, B."""
    if pattern not in _CELLS:
        raise DataError(f"unknown Bayer pattern {pattern!r}")
    cells = _CELLS[pattern]
    pos = {}
    greens = []
    for dy in range(2):
        for dx in range(2):
            c = cells[dy][dx]
            if c == "G":
                greens.append((dy, dx))
            else:
                pos[c] = (dy, dx)
    g1 = next(g for g in greens if g[0] == pos["R"][0])
    g2 = next(g for g in greens if g != g1)
    pos["G1"], pos["G2"] = g1, g2
    return pos


def _pattern_from_cells(cells) -> str:
    for name, layout in _CELLS.items():
        if tuple(tuple(row) for row in cells) == layout:
            return name
    raise DataError("2x2 cell layout does not form a Bayer pattern")


@dataclass
class RawFrame:
    """A single-sensor mosaic in raw counts with its calibration metadata."""

    mosaic: np.ndarray  # (H, W) counts
    pattern: str
    black_level: float
    white_level: float
    exposure_s: float
    iso: int

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic, dtype=np.float32)
        if self.mosaic.ndim != 2:
            raise DimensionError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise DimensionError(f"mosaic dims {h}x{w} must be even")
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown Bayer pattern {self.pattern!r}")
        if not self.black_level < self.white_level:
            raise DataError(f"black level {self.black_level} must be below white {self.white_level}")
        if float(self.mosaic.min()) < 0:
            raise DataError("negative sensor counts")
        if self.exposure_s <= 0:
            raise DataError(f"exposure {self.exposure_s} must be positive")


@dataclass
class Pair:
    """A short-exposure raw input with its long-exposure RGB reference."""

    input: RawFrame
    target: np.ndarray  # (1, 3, H, W) linear RGB in [0, 1]
    ratio: float        # target exposure / input exposure

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float32)
        if self.target.ndim != 4 or self.target.shape[:2] != (1, 3):
            raise DimensionError(f"target must be (1,3,H,W), got {self.target.shape}")
        if self.target.shape[2:] != self.input.mosaic.shape:
            raise DimensionError(
                f"target {self.target.shape[2:]} vs mosaic {self.input.mosaic.shape}")
        if self.ratio <= 0:
            raise DataError(f"ratio {self.ratio} must be positive")


@dataclass(frozen=True)
class NoiseModel:
    """Heteroscedastic Gaussian sensor noise: variance = shot_gain*signal + read_noise."""

    shot_gain: float = 0.0
    read_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shot_gain < 0 or self.read_noise < 0:
            raise ConfigurationError("noise variance terms must be non-negative")


def normalize_mosaic(raw: RawFrame) -> np.ndarray:
    """(counts - black) / (white - black), clamped below at 0 (no upper clamp)."""
    v = (raw.mosaic - raw.black_level) / (raw.white_level - raw.black_level)
    return np.maximum(v, 0.0).astype(np.float32)


def pack_bayer(raw: RawFrame) -> Tensor:
    """Rearrange the normalized mosaic into 4 half-resolution planes (R,G1,G2,B)."""
    norm = normalize_mosaic(raw)
    pos = _plane_offsets(raw.pattern)
    planes = [norm[pos[c][0]::2, pos[c][1]::2] for c in ("R", "G1", "G2", "B")]
    return Tensor(np.ascontiguousarray(np.stack(planes)[None]))


def unpack_bayer(packed, pattern: str) -> np.ndarray:
    """Scatter (1,4,H/2,W/2) planes back to the (H,W) normalized mosaic."""
    arr = packed.data if isinstance(packed, Tensor) else np.asarray(packed)
    if arr.ndim != 4 or arr.shape[:2] != (1, 4):
        raise DimensionError(f"expected (1,4,h,w), got {arr.shape}")
    pos = _plane_offsets(pattern)
    h, w = arr.shape[2] * 2, arr.shape[3] * 2
    out = np.zeros((h, w), dtype=arr.dtype)
    for i, c in enumerate(("R", "G1", "G2", "B")):
        out[pos[c][0]::2, pos[c][1]::2] = arr[0, i]
    return out


def mosaic_rgb(target: np.ndarray, pattern: str) -> np.ndarray:
    """Sample one color plane per site according to the pattern (no averaging)."""
    if target.ndim != 4 or target.shape[:2] != (1, 3):
        raise DimensionError(f"expected (1,3,H,W), got {target.shape}")
    h, w = target.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"dims {h}x{w} must be even")
    cells = _CELLS.get(pattern)
    if cells is None:
        raise DataError(f"unknown Bayer pattern {pattern!r}")
    chan = {"R": 0, "G": 1, "B": 2}
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(2):
        for dx in range(2):
            out[dy::2, dx::2] = target[0, chan[cells[dy][dx]], dy::2, dx::2]
    return out


def synth_lowlight(target, w: float, nm: NoiseModel = NoiseModel(),
                   pattern: str = "RGGB", black_level: float = 512.0,
                   white_level: float = 16383.0) -> Pair:
    """Fabricate a short-exposure raw capture of a clean RGB target.

    The target is mosaicked, dimmed by 1/w, perturbed with signal-dependent
    Gaussian noise, and converted to sensor counts.
    """
    arr = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if w < 1:
        raise DataError(f"exposure ratio {w} must be >= 1")
    if arr.min() < 0 or arr.max() > 1:
        raise DataError("target values must lie in [0, 1]")
    signal = mosaic_rgb(arr, pattern) / w
    rng = np.random.default_rng(nm.seed)
    var = nm.shot_gain * signal + nm.read_noise
    noisy = signal + rng.standard_normal(signal.shape) * np.sqrt(var)
    counts = black_level + noisy * (white_level - black_level)
    frame = RawFrame(
        mosaic=np.maximum(counts, 0.0),
        pattern=pattern,
        black_level=black_level,
        white_level=white_level,
        exposure_s=10.0 / w,
        iso=1600,
    )
    return Pair(input=frame, target=arr.astype(np.float32), ratio=float(w))


def _flip_cells(cells, axis: str):
    if axis == "h":
        return tuple((row[1], row[0]) for row in cells)
    if axis == "v":
        return (cells[1], cells[0])
    if axis == "t":
        return tuple(tuple(cells[dy][dx] for dy in range(2)) for dx in range(2))
    raise ValueError(axis)


def augment(pair: Pair, seed: int, crop: Optional[int] = None) -> Pair:
    """Random even-aligned crop plus flips/transpose, applied to both halves.

    Flips and the transpose re-label the Bayer pattern (the 2x2 cell layout is
    flipped the same way) so packing stays color-consistent after the transform.
    """
    rng = np.random.default_rng(seed)
    h, w = pair.input.mosaic.shape
    crop = min(h, w) if crop is None else int(crop)
    if crop % 2:
        raise ConfigurationError(f"crop size {crop} must be even")
    if crop > h or crop > w:
        raise DimensionError(f"crop {crop} exceeds image {h}x{w}")

    oy = 2 * int(rng.integers(0, (h - crop) // 2 + 1))
    ox = 2 * int(rng.integers(0, (w - crop) // 2 + 1))
    mosaic = pair.input.mosaic[oy:oy + crop, ox:ox + crop]
    target = pair.target[:, :, oy:oy + crop, ox:ox + crop]
    cells = _CELLS[pair.input.pattern]

    if rng.integers(0, 2):  # horizontal flip
        mosaic = mosaic[:, ::-1]
        target = target[:, :, :, ::-1]
        cells = _flip_cells(cells, "h")
    if rng.integers(0, 2):  # vertical flip
        mosaic = mosaic[::-1, :]
        target = target[:, :, ::-1, :]
        cells = _flip_cells(cells, "v")
    if rng.integers(0, 2):  # transpose
        mosaic = mosaic.T
        target = target.transpose(0, 1, 3, 2)
        cells = _flip_cells(cells, "t")

    frame = replace(pair.input, mosaic=np.ascontiguousarray(mosaic),
                    pattern=_pattern_from_cells(cells))
    return Pair(input=frame, target=np.ascontiguousarray(target), ratio=pair.ratio)


# ---------------------------------------------------------------------------
# file formats

_RAW_HEADER = struct.Struct("<4sHHIIfffI")


def save_raw(path, raw: RawFrame) -> None:
    h, w = raw.mosaic.shape
    header = _RAW_HEADER.pack(b"ALRW", 1, PATTERNS.index(raw.pattern), h, w,
                              raw.black_level, raw.white_level, raw.exposure_s, raw.iso)
    payload = raw.mosaic.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_raw(path) -> RawFrame:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, pat, h, w, black, white, exposure, iso = _RAW_HEADER.unpack_from(blob)
    if magic != b"ALRW":
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise DataError(f"{path}: unsupported version {version}")
    if pat >= len(PATTERNS):
        raise DataError(f"{path}: pattern code {pat} out of range")
    payload = blob[_RAW_HEADER.size:]
    if len(payload) != h * w * 4:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {h * w * 4}")
    mosaic = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    try:
        return RawFrame(mosaic=mosaic, pattern=PATTERNS[pat], black_level=black,
                        white_level=white, exposure_s=exposure, iso=iso)
    except (DataError, DimensionError) as e:
        raise DataError(f"{path}: {e}") from e


def save_rgb(path, image) -> None:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    if arr.ndim != 4 or arr.shape[:2] != (1, 3):
        raise DimensionError(f"expected (1,3,H,W), got {arr.shape}")
    h, w = arr.shape[2:]
    q = np.round(np.clip(arr[0], 0.0, 1.0) * 65535.0).astype(">u2")
    header = f"P6\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + q.transpose(1, 2, 0).tobytes())


def load_rgb(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, i = [], 0
    while len(fields) < 4:
        if i >= len(blob):
            raise DataError(f"{path}: truncated PPM header")
        if blob[i:i + 1] == b"#":  # comment line
            i = blob.index(b"\n", i) + 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        if j > i:
            fields.append(blob[i:j])
        i = j + 1
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:4])
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit maxval, got {maxval}")
    payload = blob[i:]
    if len(payload) != w * h * 3 * 2:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {w * h * 6}")
    img = np.frombuffer(payload, dtype=">u2").reshape(h, w, 3)
    return (img.transpose(2, 0, 1)[None].astype(np.float32) / 65535.0)


def procedural_rgb(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A smooth synthetic scene: a few low-frequency gratings per channel."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.zeros((3, h, w))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-9)
        img[c] = 0.05 + 0.9 * acc
    return img[None].astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories (raw container + target PPM per scene, pairs.csv manifest)


def write_dataset(root, items: List[Tuple[str, Pair]]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "pairs.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["scene", "raw", "target", "ratio"])
        for scene, pair in items:
            raw_name, tgt_name = f"{scene}.alrw", f"{scene}.ppm"
            save_raw(root / raw_name, pair.input)
            save_rgb(root / tgt_name, pair.target)
            wr.writerow([scene, raw_name, tgt_name, repr(pair.ratio)])


def load_dataset(root) -> List[Tuple[str, Pair]]:
    root = Path(root)
    manifest = root / "pairs.csv"
    if not manifest.exists():
        raise DataError(f"no pairs.csv manifest under {root}")
    items: List[Tuple[str, Pair]] = []
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["scene", "raw", "target", "ratio"]:
            raise DataError(f"{manifest}: unexpected columns {reader.fieldnames}")
        for row in reader:
            frame = load_raw(root / row["raw"])
            target = load_rgb(root / row["target"])
            items.append((row["scene"], Pair(input=frame, target=target,
                                             ratio=float(row["ratio"]))))
    if not items:
        raise DataError(f"{manifest}: empty dataset")
    return items
