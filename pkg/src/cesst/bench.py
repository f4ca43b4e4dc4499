"""Analytic MAC counts and measured wallclock of the MSA variants versus token count."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import (VARIANTS, ShuffleWindowMSA, SpectralAttention, WindowAttention, WindowSpec,
                        count_flops, global_msa, spectral_msa, window_msa)
from .tensor import Tensor, no_grad

BENCH_HEADER = ["variant", "tokens", "H", "W", "macs_scores", "macs_total", "median_seconds"]


@dataclass
class BenchRow:
    variant: str
    tokens: int
    H: int
    W: int
    macs_scores: int
    macs_total: int
    median_seconds: float


def linear_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line y = a x + b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


def grid_for(tokens: int, window: int) -> tuple[int, int]:
    """Squarest H x W with H * W = tokens and both divisible by the window."""
    side = int(math.isqrt(tokens))
    for h in range(side, 0, -1):
        if tokens % h == 0 and h % window == 0 and (tokens // h) % window == 0:
            return h, tokens // h
    raise ValueError(f"no {window}-divisible grid has {tokens} tokens")


def _runner(variant: str, C: int, heads: int, M: int, rng):
    if variant == "window":
        p = WindowAttention(C, heads, rng=rng)
        return lambda x: window_msa(x, p, WindowSpec.for_input(x, M))
    if variant == "shuffle_window":
        m = ShuffleWindowMSA(C, heads, M, rng=rng)
        return m
    if variant == "spectral":
        p = SpectralAttention(C, heads, rng=rng)
        return lambda x: spectral_msa(x, p)
    p = WindowAttention(C, heads, rng=rng)
    return lambda x: global_msa(x, p)


def time_call(fn, x, repeats: int = 5) -> float:
    times = []
    with no_grad():
        fn(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(x)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_scaling(variants: Sequence[str] = ("window", "shuffle_window", "spectral"),
                  sizes: Sequence[int] = (64, 256, 1024, 4096), C: int = 16, heads: int = 2,
                  M: int = 4, repeats: int = 5, batch: int = 32, seed: int = 0) -> tuple[list[BenchRow], dict]:
    """Median-of-``repeats`` forward wallclock per variant and token count.

    Returns the rows and a per-variant R^2 of a linear fit of time against
    tokens.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    r2 = {}
    for v in variants:
        fn = _runner(v, C, heads, M, rng)
        times = []
        for n in sizes:
            H, W = grid_for(n, M)
            x = Tensor(rng.standard_normal((batch, C, H, W)).astype(np.float32))
            t = time_call(fn, x, repeats)
            fc = count_flops(v, C, H, W, M, heads)
            rows.append(BenchRow(v, n, H, W, fc.scores, fc.total, t))
            times.append(t)
        r2[v] = linear_r2(sizes, times)
    return rows, r2


def bench_csv(rows: Sequence[BenchRow], r2: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER + ["linear_r2"])
    for r in rows:
        w.writerow([r.variant, r.tokens, r.H, r.W, r.macs_scores, r.macs_total,
                    f"{r.median_seconds:.6g}", f"{r2[r.variant]:.6f}"])
    return buf.getvalue()
