"""Hyperspectral cubes, synthetic scenes, RGB synthesis and training samples."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .serialize import FormatError, load_tensor, save_tensor

BANDS = 31
WAVELENGTHS = np.arange(400.0, 701.0, 10.0)
HSIC_MAGIC = b"HSIC"


class DataError(ValueError):
    """Invalid dataset, manifest or sample geometry."""


@dataclass
class HsiCube:
    """31-band cube ``[31, H, W]`` with band-center wavelengths in nm; values in [0, 1]."""

    data: np.ndarray
    wavelengths: np.ndarray = field(default_factory=lambda: WAVELENGTHS.copy())

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != BANDS:
            raise DataError(f"HSI cube must be [{BANDS}, H, W], got {self.data.shape}")
        if self.wavelengths.shape != (BANDS,) or not np.all(np.diff(self.wavelengths) > 0):
            raise DataError("wavelengths must be 31 strictly increasing values")
        if self.data.min(initial=0.0) < 0 or self.data.max(initial=0.0) > 1:
            self.data = np.clip(self.data, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class RgbImage:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise DataError(f"RGB image must be [3, H, W], got {self.data.shape}")
        if self.data.min(initial=0.0) < 0 or self.data.max(initial=0.0) > 1:
            raise DataError("RGB values must lie in [0, 1]")


# ---------------------------------------------------------------- HSIC container
def save_cube(path, cube: HsiCube) -> None:
    data = np.ascontiguousarray(cube.data, dtype="<f4")
    header = json.dumps({"dims": list(data.shape), "wavelengths": [float(w) for w in cube.wavelengths],
                         "dtype": "f32le"}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HSIC_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.tobytes())


def cube_from_bytes(buf: bytes) -> HsiCube:
    if len(buf) < 8 or buf[:4] != HSIC_MAGIC:
        raise FormatError("not an HSIC container (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise FormatError("HSIC header truncated")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        wavelengths = header["wavelengths"]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"HSIC header is corrupt: {exc}") from exc
    if dtype != "f32le":
        raise FormatError(f"unsupported HSIC dtype {dtype!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"HSIC dims must be three positive extents, got {dims}")
    payload = buf[8 + hlen:]
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"HSIC payload is {len(payload)} bytes, dims {dims} need {expected} (truncated or corrupt)")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.isfinite(data).all():
        raise FormatError("HSIC payload contains NaN or Inf")
    try:
        return HsiCube(data, np.asarray(wavelengths, dtype=np.float64))
    except DataError as exc:
        raise FormatError(str(exc)) from exc


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        return cube_from_bytes(fh.read())


# ---------------------------------------------------------------- spectral response
@dataclass(frozen=True)
class ResponseMatrix:
    """Camera response ``[3, 31]``; rows are non-negative and sum to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=np.float64)
        if R.shape != (3, BANDS):
            raise DataError(f"response matrix must be 3x{BANDS}, got {R.shape}")
        if (R < 0).any():
            raise DataError("response matrix has negative entries")
        object.__setattr__(self, "matrix", R)

    @classmethod
    def gaussian(cls, centers=(610.0, 540.0, 470.0), sigmas=(35.0, 35.0, 30.0)) -> "ResponseMatrix":
        rows = [np.exp(-0.5 * ((WAVELENGTHS - c) / s) ** 2) for c, s in zip(centers, sigmas)]
        R = np.stack(rows)
        return cls(R / R.sum(axis=1, keepdims=True))

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist()}


DEFAULT_RESPONSE = ResponseMatrix.gaussian()


def hsi_to_rgb(cube, R: ResponseMatrix = DEFAULT_RESPONSE) -> np.ndarray:
    """rgb[c] = sum_b R[c, b] * cube[b]; linear, no gamma. Returns ``[3, H, W]``."""
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    if data.shape[-3] != BANDS:
        raise DataError(f"cube has {data.shape[-3]} bands, response expects {BANDS}")
    M = R.matrix.astype(data.dtype)
    if (M < 0).any():
        raise DataError("response matrix has negative entries")
    out = np.zeros(data.shape[:-3] + (3,) + data.shape[-2:], dtype=data.dtype)
    # Fixed accumulation order per pixel keeps this exactly equivariant to pixel permutations.
    for b in range(BANDS):
        out += M[:, b, None, None] * data[..., b:b + 1, :, :]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- synthetic scenes
def synth_scene(seed: int, height: int, width: int) -> HsiCube:
    """Deterministic smooth scene: 3-6 soft regions, each with a Gaussian-mixture spectrum."""
    if height < 8 or width < 8:
        raise DataError("synthetic scenes need H, W >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    K = int(rng.integers(3, 7))
    logits = []
    for _ in range(K):
        if rng.random() < 0.6:
            cy, cx = rng.uniform(0, 1, 2)
            s = rng.uniform(0.15, 0.4)
            logits.append(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        else:
            theta = rng.uniform(0, 2 * np.pi)
            t = np.cos(theta) * xx + np.sin(theta) * yy
            logits.append((t - rng.uniform(0.2, 0.8)) * rng.uniform(2, 6))
    L = np.stack(logits) * rng.uniform(2.0, 4.0)
    L -= L.max(axis=0, keepdims=True)
    weights = np.exp(L)
    weights /= weights.sum(axis=0, keepdims=True)

    spectra = []
    for _ in range(K):
        s = np.full(BANDS, rng.uniform(0.05, 0.2))
        for _ in range(int(rng.integers(2, 5))):
            mu = rng.uniform(380, 720)
            sigma = rng.uniform(25, 80)
            s += rng.uniform(0.1, 0.6) * np.exp(-0.5 * ((WAVELENGTHS - mu) / sigma) ** 2)
        spectra.append(s / s.max() * rng.uniform(0.6, 0.95))
    spectra = np.stack(spectra)  # [K, 31]

    fy, fx, ph = rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)
    shading = 0.8 + 0.2 * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    cube = np.einsum("kb,khw->bhw", spectra, weights) * shading
    return HsiCube(np.clip(cube, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------- pyramids
def downsample2(arr: np.ndarray) -> np.ndarray:
    """Bilinear x0.5 with half-pixel centers, i.e. the mean of each 2x2 block."""
    H, W = arr.shape[-2:]
    if H % 2 or W % 2:
        raise DataError(f"cannot halve odd extents {H}x{W}")
    a = arr.reshape(arr.shape[:-2] + (H // 2, 2, W // 2, 2))
    return a.mean(axis=(-3, -1)).astype(arr.dtype)


def make_pyramid(cube) -> list[np.ndarray]:
    """[Y^1, Y^2, Y^3]: full, half and quarter resolution."""
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    H, W = data.shape[-2:]
    if H % 4 or W % 4:
        raise DataError(f"pyramid needs H, W divisible by 4, got {H}x{W}")
    half = downsample2(data)
    return [data, half, downsample2(half)]


# ---------------------------------------------------------------- samples
@dataclass
class SamplePair:
    rgb: np.ndarray                # [3, H, W]
    gt: list = field(default_factory=list)   # [Y^1, Y^2, Y^3], each [31, H/2^s, W/2^s]

    @classmethod
    def from_cube(cls, cube, R: ResponseMatrix = DEFAULT_RESPONSE, rgb: Optional[np.ndarray] = None) -> "SamplePair":
        c = cube if isinstance(cube, HsiCube) else HsiCube(cube)
        return cls(hsi_to_rgb(c, R) if rgb is None else np.asarray(rgb, dtype=c.data.dtype), make_pyramid(c))


def _geom(arr: np.ndarray, k: int, flip_h: bool, flip_v: bool) -> np.ndarray:
    out = np.rot90(arr, k, axes=(-2, -1))
    if flip_h:
        out = out[..., :, ::-1]
    if flip_v:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def augment_params(seed, height: int, width: int, crop: int) -> dict:
    if crop > min(height, width):
        raise DataError(f"crop {crop} larger than image {height}x{width}")
    if crop % 4:
        raise DataError(f"crop size must be a multiple of 4, got {crop}")
    rng = np.random.default_rng(seed)
    y0 = 4 * int(rng.integers(0, (height - crop) // 4 + 1))
    x0 = 4 * int(rng.integers(0, (width - crop) // 4 + 1))
    return {"y0": y0, "x0": x0, "k": int(rng.integers(0, 4)),
            "flip_h": bool(rng.integers(0, 2)), "flip_v": bool(rng.integers(0, 2))}


def apply_augment(pair: SamplePair, y0: int, x0: int, crop: int, k: int = 0,
                  flip_h: bool = False, flip_v: bool = False) -> SamplePair:
    rgb = _geom(pair.rgb[:, y0:y0 + crop, x0:x0 + crop], k, flip_h, flip_v)
    gt = []
    for s, y in enumerate(pair.gt):
        f = 2 ** s
        gt.append(_geom(y[:, y0 // f:(y0 + crop) // f, x0 // f:(x0 + crop) // f], k, flip_h, flip_v))
    return SamplePair(rgb, gt)


def crop_and_augment(pair: SamplePair, seed, crop: int, augment: bool = True) -> SamplePair:
    """One seeded crop plus rotation by k*90 degrees and independent h/v flips.

    The same geometry is applied to the RGB input and every pyramid level.
    Crop offsets are multiples of 4 so the quarter-scale crop stays aligned.
    """
    H, W = pair.rgb.shape[-2:]
    p = augment_params(seed, H, W, crop)
    if not augment:
        p.update(k=0, flip_h=False, flip_v=False)
    return apply_augment(pair, crop=crop, **p)


# ---------------------------------------------------------------- datasets
class Dataset:
    """In-memory list of sample pairs with deterministic epoch ordering."""

    def __init__(self, pairs: Sequence[SamplePair], seed: int = 0):
        if not pairs:
            raise DataError("dataset is empty")
        self.pairs = list(pairs)
        self.seed = seed

    def __len__(self) -> int:
        return len(self.pairs)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.pairs))

    def sample(self, epoch: int, position: int, crop: int, augment: bool = True) -> SamplePair:
        """Sample ``position`` of ``epoch``; depends only on (seed, epoch, position)."""
        idx = int(self.epoch_order(epoch)[position])
        return crop_and_augment(self.pairs[idx], [self.seed, epoch, position], crop, augment)

    def batch_for_step(self, step: int, batch_size: int, crop: int, augment: bool = True):
        per_epoch = math.ceil(len(self) / batch_size)
        epoch, b = divmod(step, per_epoch)
        positions = range(b * batch_size, min((b + 1) * batch_size, len(self)))
        samples = [self.sample(epoch, p, crop, augment) for p in positions]
        rgb = np.stack([s.rgb for s in samples])
        gt = [np.stack([s.gt[i] for s in samples]) for i in range(3)]
        return rgb, gt

    @classmethod
    def synthetic(cls, count: int, size: int, seed: int = 0, R: ResponseMatrix = DEFAULT_RESPONSE) -> "Dataset":
        return cls([SamplePair.from_cube(synth_scene(seed + i, size, size), R) for i in range(count)], seed)

    @classmethod
    def from_manifest(cls, path, R: ResponseMatrix = DEFAULT_RESPONSE, seed: int = 0) -> "Dataset":
        """Load a JSON list of ``{"cube_path", "rgb_path"?}``; paths relative to the manifest.

        Missing RGB files are synthesized with ``R``; ``rgb_path`` points to a TNSR tensor.
        """
        path = Path(path)
        try:
            entries = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(entries, list) or not entries:
            raise DataError(f"manifest {path} must be a non-empty JSON list")
        pairs = []
        for e in entries:
            if not isinstance(e, dict) or "cube_path" not in e or set(e) - {"cube_path", "rgb_path"}:
                raise DataError(f"bad manifest entry {e!r}")
            try:
                cube = load_cube(path.parent / e["cube_path"])
                rgb = load_tensor(path.parent / e["rgb_path"]).astype(np.float32) if e.get("rgb_path") else None
            except (OSError, FormatError) as exc:
                raise DataError(f"cannot load sample {e!r}: {exc}") from exc
            pairs.append(SamplePair.from_cube(cube, R, rgb))
        return cls(pairs, seed)


def write_synthetic_dataset(out_dir, count: int, size: int, seed: int = 0,
                            R: ResponseMatrix = DEFAULT_RESPONSE, with_rgb: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        cube = synth_scene(seed + i, size, size)
        name = f"scene_{seed + i:05d}.hsic"
        save_cube(out / name, cube)
        entry = {"cube_path": name}
        if with_rgb:
            rgb_name = f"scene_{seed + i:05d}.rgb.tnsr"
            save_tensor(out / rgb_name, hsi_to_rgb(cube, R).astype(np.float32))
            entry["rgb_path"] = rgb_name
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2))
    return manifest
