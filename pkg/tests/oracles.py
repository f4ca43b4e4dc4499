"""Brute-force loop implementations used as independent test oracles."""
import math

import numpy as np


def naive_mrae(x, y, eps=1e-6):
    tot, n = 0.0, 0
    for b in range(x.shape[0]):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                tot += abs(y[b, i, j] - x[b, i, j]) / (y[b, i, j] + eps)
                n += 1
    return tot / n


def naive_band_rmse(x, y):
    out = []
    for b in range(x.shape[0]):
        s = 0.0
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                s += (y[b, i, j] - x[b, i, j]) ** 2
        out.append(math.sqrt(s / (x.shape[1] * x.shape[2])))
    return out


def naive_rmse(x, y):
    s, n = 0.0, 0
    for v in np.nditer(y - x):
        s += float(v) ** 2
        n += 1
    return math.sqrt(s / n)


def naive_sam(x, y):
    angles = []
    for i in range(x.shape[1]):
        for j in range(x.shape[2]):
            dot = sum(x[b, i, j] * y[b, i, j] for b in range(x.shape[0]))
            nx = math.sqrt(sum(x[b, i, j] ** 2 for b in range(x.shape[0])))
            ny = math.sqrt(sum(y[b, i, j] ** 2 for b in range(x.shape[0])))
            angles.append(0.0 if nx * ny == 0 else math.acos(max(-1.0, min(1.0, dot / (nx * ny)))))
    return sum(angles) / len(angles)


def naive_ergas(x, y):
    rb = naive_band_rmse(x, y)
    means = [float(np.sum(y[b])) / y[b].size for b in range(x.shape[0])]
    return 100 * math.sqrt(sum((r / m) ** 2 for r, m in zip(rb, means)) / x.shape[0])


def naive_ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM by explicit loops over [C, H, W]."""
    C, H, W = x.shape
    k = min(window, H, W)
    k -= 1 - k % 2
    ax = [i - (k - 1) / 2 for i in range(k)]
    g = [math.exp(-0.5 * (a / sigma) ** 2) for a in ax]
    g = [v / sum(g) for v in g]
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for c in range(C):
        for i in range(H - k + 1):
            for j in range(W - k + 1):
                mx = my = sxx = syy = sxy = 0.0
                for u in range(k):
                    for v in range(k):
                        w = g[u] * g[v]
                        a, b = x[c, i + u, j + v], y[c, i + u, j + v]
                        mx += w * a
                        my += w * b
                        sxx += w * a * a
                        syy += w * b * b
                        sxy += w * a * b
                sxx -= mx * mx
                syy -= my * my
                sxy -= mx * my
                vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)
