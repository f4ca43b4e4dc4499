"""Multi-scale training objective: SSIM/L1 mix plus relative absolute error."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 100.0
    mix_alpha: float = 0.84
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    mrae_eps: float = 1e-6

    def __post_init__(self):
        if not self.lambda1 >= 0:
            raise ValueError(f"lambda1 must be non-negative, got {self.lambda1}")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ValueError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")


@dataclass
class LossTerms:
    mix: Tensor
    mrae: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {"mix": float(self.mix.data), "mrae": float(self.mrae.data), "total": float(self.total.data)}


def _const(y, like: Tensor) -> Tensor:
    if isinstance(y, Tensor):
        return y
    return Tensor(np.asarray(y, dtype=like.dtype))


def _check_pairs(pred: Sequence, gt: Sequence) -> list:
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} scales, target has {len(gt)}")
    pairs = []
    for x, y in zip(pred, gt):
        y = _const(y, x)
        if y.shape != x.shape:
            raise ValueError(f"prediction {x.shape} and target {y.shape} differ in shape")
        pairs.append((x, y))
    return pairs


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def effective_window(size: int, height: int, width: int) -> int:
    """Largest odd window not exceeding ``size`` or the image."""
    k = min(size, height, width)
    return k if k % 2 else k - 1


def ssim(x: Tensor, y, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean SSIM over batch, bands and valid window positions (data range 1)."""
    y = _const(y, x)
    if x.shape != y.shape:
        raise ValueError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    B, C, H, W = x.shape
    k = effective_window(cfg.ssim_window, H, W)
    kern = Tensor(gaussian_window(k, cfg.ssim_sigma).astype(x.dtype)[None, None])
    c1, c2 = cfg.k1 ** 2, cfg.k2 ** 2

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t.reshape(B * C, 1, H, W), kern)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return F.mean(num / den)


def loss_mix(pred: Sequence[Tensor], gt: Sequence, cfg: LossConfig = LossConfig()) -> Tensor:
    """sum_s alpha * (1 - SSIM) + (1 - alpha) * L1."""
    a = cfg.mix_alpha
    total = None
    for x, y in _check_pairs(pred, gt):
        term = (1 - a) * F.mean(F.abs(x - y))
        if a > 0:
            term = term + a * (1 - ssim(x, y, cfg))
        total = term if total is None else total + term
    return total


def loss_mrae(pred: Sequence[Tensor], gt: Sequence, eps: float = 1e-6) -> Tensor:
    """sum_s mean(|Y - X| / (Y + eps))."""
    total = None
    for x, y in _check_pairs(pred, gt):
        term = F.mean(F.abs(y - x) / (y + eps))
        total = term if total is None else total + term
    return total


def loss_terms(pred: Sequence[Tensor], gt: Sequence, cfg: LossConfig = LossConfig()) -> LossTerms:
    mix = loss_mix(pred, gt, cfg)
    mrae = loss_mrae(pred, gt, cfg.mrae_eps)
    return LossTerms(mix, mrae, mix + cfg.lambda1 * mrae)


def loss_total(pred: Sequence[Tensor], gt: Sequence, cfg: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(pred, gt, cfg).total


def combine(mix: Union[float, Tensor], mrae: Union[float, Tensor], lambda1: float = 100.0):
    return mix + lambda1 * mrae
