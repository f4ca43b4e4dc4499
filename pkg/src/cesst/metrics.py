"""Reconstruction metrics computed in float64 on ``[bands, H, W]`` cubes."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import WAVELENGTHS, HsiCube

MRAE_EPS = 1e-6


def _arr(c) -> np.ndarray:
    return np.asarray(c.data if isinstance(c, HsiCube) else c, dtype=np.float64)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _arr(x), _arr(y)
    if x.shape != y.shape:
        raise ValueError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise ValueError(f"metrics expect [bands, H, W] cubes, got {x.shape}")
    return x, y


def mrae(x, y, eps: float = MRAE_EPS) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(y - x) / (y + eps)))


def rmse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.sqrt(np.mean((y - x) ** 2)))


def psnr(x, y) -> float:
    """10 log10(1 / MSE) over the whole cube; +inf for identical inputs."""
    x, y = _pair(x, y)
    mse = float(np.mean((y - x) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def sam(x, y) -> float:
    """Mean spectral angle in radians; pixels where either spectrum is zero count as 0."""
    x, y = _pair(x, y)
    dot = np.sum(x * y, axis=0)
    den = np.sqrt(np.sum(x * x, axis=0) * np.sum(y * y, axis=0))
    cos = np.divide(dot, den, out=np.ones_like(dot), where=den > 0)
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def per_band_rmse(x, y) -> np.ndarray:
    x, y = _pair(x, y)
    return np.sqrt(np.mean((y - x) ** 2, axis=(1, 2)))


def ergas(x, y) -> float:
    """100 * sqrt(mean_b (RMSE_b / mean_b(y))^2), resolution ratio 1."""
    x, y = _pair(x, y)
    rb = per_band_rmse(x, y)
    mb = y.mean(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rb == 0, 0.0, rb / mb)
    return float(100.0 * np.sqrt(np.mean(ratio ** 2)))


def _json_float(v: float):
    return "+inf" if v == math.inf else v


@dataclass
class MetricReport:
    mrae: float
    rmse: float
    psnr: float
    sam: float
    ergas: float
    per_band_rmse: list = field(default_factory=list)
    params: int = 0
    flops: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = _json_float(self.psnr)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        if d.get("psnr") == "+inf":
            d["psnr"] = math.inf
        return cls(**d)

    def band_csv(self, wavelengths: Sequence[float] = WAVELENGTHS) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["band_nm", "rmse"])
        for nm, v in zip(wavelengths, self.per_band_rmse):
            w.writerow([int(round(nm)), repr(float(v))])
        return buf.getvalue()


def metric_suite(x, y, params: int = 0, flops: int = 0) -> MetricReport:
    """All five metrics of reconstruction ``x`` against reference ``y``."""
    return MetricReport(mrae(x, y), rmse(x, y), psnr(x, y), sam(x, y), ergas(x, y),
                        [float(v) for v in per_band_rmse(x, y)], params, flops)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-image metrics averaged over a set (PSNR stays +inf only if all are +inf)."""
    if not reports:
        raise ValueError("no reports to average")
    n = len(reports)

    def avg(name):
        return float(sum(getattr(r, name) for r in reports) / n)

    bands = np.mean([r.per_band_rmse for r in reports], axis=0)
    return MetricReport(avg("mrae"), avg("rmse"), avg("psnr"), avg("sam"), avg("ergas"),
                        [float(v) for v in bands], reports[0].params, reports[0].flops)
