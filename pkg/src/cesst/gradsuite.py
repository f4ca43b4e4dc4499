"""Finite-difference gradient suites over ops, blocks and the toy model (float64)."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .attention import (ShuffleWindowMSA, SpectralAttention, WindowAttention, WindowSpec,
                        global_msa, spectral_msa, window_msa)
from .blocks import FEB, RCAB, SCCM, SFAM, SSAB, ChannelLearning
from .config import CesstConfig, SsabConfig
from .gradcheck import GradCheckResult, check_gradients, check_gradients_pooled
from .losses import LossConfig, loss_total
from .model import CESST
from .nn import Module
from .tensor import Tensor

SCOPES = ("ops", "blocks", "model")
F64 = np.float64
TOL = 1e-4
SSIM_TOL = 1e-3


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return F.sum(out * Tensor(w))


def _op_check(name: str, f: Callable[..., Tensor], inputs: dict, rng) -> list[GradCheckResult]:
    probe = {}

    def fn():
        out = f(**inputs)
        if "w" not in probe:
            probe["w"] = _probe(rng, out.shape)
        return _weighted(out, probe["w"])

    fn()
    res = check_gradients(fn, inputs, tol=TOL)
    return [GradCheckResult(f"{name}:{r.name}", r.rel_error, r.checked, r.passed) for r in res]


def op_suite(seed: int) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    L = lambda *s, lo=-1.0, hi=1.0: _leaf(rng, s, lo, hi)  # noqa: E731
    cases = [
        ("add", lambda a, b: a + b, dict(a=L(3, 4), b=L(4))),
        ("sub", lambda a, b: a - b, dict(a=L(3, 4), b=L(3, 1))),
        ("mul", lambda a, b: a * b, dict(a=L(3, 4), b=L(3, 4))),
        ("div", lambda a, b: a / b, dict(a=L(3, 4), b=L(3, 4, lo=0.5, hi=2.0))),
        ("neg", lambda a: -a, dict(a=L(5))),
        ("power", lambda a: F.power(a, 3.0), dict(a=L(5, lo=0.2, hi=2.0))),
        ("exp", lambda a: F.exp(a), dict(a=L(5))),
        ("log", lambda a: F.log(a), dict(a=L(5, lo=0.2, hi=2.0))),
        ("sqrt", lambda a: F.sqrt(a), dict(a=L(5, lo=0.2, hi=2.0))),
        ("abs", lambda a: F.abs(a), dict(a=L(5, lo=0.1, hi=1.0))),
        ("tanh", lambda a: F.tanh(a), dict(a=L(5))),
        ("sigmoid", lambda a: F.sigmoid(a), dict(a=L(5))),
        ("gelu", lambda a: F.gelu(a), dict(a=L(2, 5, lo=-3, hi=3))),
        ("sum", lambda a: F.sum(a, axis=1, keepdims=True), dict(a=L(3, 4, 2))),
        ("mean", lambda a: F.mean(a, axis=(0, 2)), dict(a=L(3, 4, 2))),
        ("reshape_transpose", lambda a: a.reshape(4, 6).transpose(1, 0), dict(a=L(2, 3, 4))),
        ("getitem", lambda a: a[:, 1:3], dict(a=L(3, 4))),
        ("take", lambda a: F.take(a, np.array([2, 0, 2, 1]), axis=1), dict(a=L(2, 3))),
        ("concat", lambda a, b: F.concat([a, b], axis=1), dict(a=L(2, 3), b=L(2, 2))),
        ("split", lambda a: F.split(a, [1, 3], axis=1)[1], dict(a=L(2, 4))),
        ("matmul", lambda a, b: F.matmul(a, b), dict(a=L(2, 3, 4), b=L(4, 5))),
        ("softmax", lambda a: F.softmax(a, axis=-1), dict(a=L(3, 6, lo=-3, hi=3))),
        ("layer_norm", lambda x, g, b: F.layer_norm(x, 1, g, b),
         dict(x=L(2, 5, 3, 3), g=L(5), b=L(5))),
        ("l2_normalize", lambda a: F.l2_normalize(a, axis=-1), dict(a=L(3, 6))),
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, padding="same"),
         dict(x=L(2, 3, 5, 5), w=L(4, 3, 3, 3), b=L(4))),
        ("conv2d_stride", lambda x, w: F.conv2d(x, w, stride=2, padding=1),
         dict(x=L(1, 2, 6, 6), w=L(3, 2, 3, 3))),
        ("conv2d_depthwise_even", lambda x, w: F.conv2d(x, w, padding="same", groups=3),
         dict(x=L(1, 3, 4, 4), w=L(3, 1, 2, 2))),
        ("conv2d_grouped", lambda x, w: F.conv2d(x, w, padding="same", groups=2),
         dict(x=L(1, 4, 4, 4), w=L(6, 2, 3, 3))),
        ("conv2d_pointwise", lambda x, w: F.conv2d(x, w), dict(x=L(2, 3, 3, 3), w=L(5, 3, 1, 1))),
        ("conv2d_reflect", lambda x, w: F.conv2d(x, w, padding="same", padding_mode="reflect"),
         dict(x=L(1, 2, 4, 5), w=L(2, 2, 3, 3))),
        ("pad_reflect", lambda x: F.pad2d(x, (1, 2, 2, 1), mode="reflect"), dict(x=L(1, 2, 4, 4))),
        ("resize_bilinear_down", lambda x: F.resize(x, 0.5, "bilinear"), dict(x=L(1, 2, 4, 6))),
        ("resize_bilinear_up", lambda x: F.resize(x, 2.0, "bilinear"), dict(x=L(1, 2, 3, 3))),
        ("resize_nearest_up", lambda x: F.resize(x, 2.0, "nearest"), dict(x=L(1, 2, 3, 3))),
    ]
    out = []
    for name, f, inputs in cases:
        out.extend(_op_check(name, f, inputs, rng))
    return out


def _module_check(name: str, module: Module, forward: Callable[[], Tensor], inputs: dict,
                  rng, tol: float = TOL, pooled: int = 48) -> GradCheckResult:
    tensors = dict(inputs)
    tensors.update({f"param.{k}": p for k, p in module.named_parameters()})
    probe = {}

    def fn():
        out = forward()
        if "w" not in probe:
            probe["w"] = _probe(rng, out.shape)
        return _weighted(out, probe["w"])

    fn()
    return check_gradients_pooled(fn, tensors, name, n_entries=pooled, tol=tol, rng=rng)


def block_suite(seed: int) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    mrng = np.random.default_rng(seed + 1000)
    res = []
    x = _leaf(rng, (1, 8, 8, 8))
    for msa in ("spatio_spectral", "shuffle_only", "shifted_window", "spatial_only", "spectral_only"):
        blk = SSAB(SsabConfig(8, window_size=2, spatial_heads=2, spectral_heads=2, msa=msa), rng=mrng, dtype=F64)
        res.append(_module_check(f"ssab[{msa}]", blk, lambda b=blk: b(x), {"x": x}, rng))
    wa = WindowAttention(8, 2, rng=mrng, dtype=F64)
    spec = WindowSpec(2, 8, 8)
    res.append(_module_check("window_msa", wa, lambda: window_msa(x, wa, spec), {"x": x}, rng))
    res.append(_module_check("global_msa", wa, lambda: global_msa(x, wa), {"x": x}, rng))
    sw = ShuffleWindowMSA(8, 2, 2, rng=mrng, dtype=F64)
    res.append(_module_check("shuffle_window_msa", sw, lambda: sw(x), {"x": x}, rng))
    sa = SpectralAttention(8, 2, rng=mrng, dtype=F64)
    y = _leaf(rng, (1, 8, 8, 8))
    res.append(_module_check("spectral_msa", sa, lambda: spectral_msa(x, sa, y), {"x": x, "y": y}, rng))
    res.append(_module_check("spectral_msa[swap]", sa, lambda: spectral_msa(x, sa, y, swap_query_source=True),
                             {"x": x, "y": y}, rng))

    cfg = CesstConfig(base_width=4, window_size=2)
    feb = FEB(cfg.feb(), 1, cfg.ssab, rng=mrng, dtype=F64)
    xf = _leaf(rng, (1, 1, 8, 8), 0.0, 1.0)
    res.append(_module_check("feb", feb, lambda: feb(xf), {"x": xf}, rng))

    e, p = _leaf(rng, (1, 31, 4, 4)), _leaf(rng, (1, 31, 4, 4))
    cl = ChannelLearning(31, 1, rng=mrng, dtype=F64)
    res.append(_module_check("channel_learning", cl, lambda: cl(e, p), {"e": e, "p": p}, rng))
    cls = ChannelLearning(31, 1, swap_query_source=True, rng=mrng, dtype=F64)
    res.append(_module_check("channel_learning[swap]", cls, lambda: cls(e, p), {"e": e, "p": p}, rng))
    fb = _leaf(rng, (1, 31, 4, 4))
    sfam = SFAM(rng=mrng, dtype=F64)
    res.append(_module_check("sfam", sfam, lambda: sfam(e, p, fb), {"fr": e, "fg": p, "fb": fb}, rng))
    rcab = RCAB(31, rng=mrng, dtype=F64)
    res.append(_module_check("rcab", rcab, lambda: rcab(e), {"x": e}, rng))
    sccm = SCCM(rng=mrng, dtype=F64)
    res.append(_module_check("sccm", sccm, lambda: F.concat([t.reshape(-1) for t in sccm(e, p)], axis=0),
                             {"features": e, "residual": p}, rng))
    return res


def model_suite(seed: int, size: int = 16) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    cfg = CesstConfig(seed=seed)
    model = CESST(cfg, dtype=F64)
    rgb = _leaf(rng, (1, 3, size, size), 0.0, 1.0)
    probes = {}

    def weighted():
        outs = model(rgb)
        total = None
        for s, o in enumerate(outs):
            if s not in probes:
                probes[s] = _probe(rng, o.shape)
            t = _weighted(o, probes[s])
            total = t if total is None else total + t
        return total

    tensors = {"rgb": rgb}
    tensors.update({f"param.{k}": p for k, p in model.named_parameters()})
    res = [check_gradients_pooled(weighted, tensors, "model", n_entries=32, tol=TOL, rng=rng)]
    gt = [rng.uniform(0.05, 1.0, (1, 31, size >> s, size >> s)) for s in range(3)]
    lcfg = LossConfig()
    res.append(check_gradients_pooled(lambda: loss_total(list(model(rgb)), gt, lcfg), tensors,
                                      "model+loss_total", n_entries=24, tol=SSIM_TOL, rng=rng))
    return res


def run_suite(scope: str, seeds=(0, 1, 2)) -> list[GradCheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    fn = {"ops": op_suite, "blocks": block_suite, "model": model_suite}[scope]
    out = []
    for s in seeds:
        for r in fn(s):
            out.append(GradCheckResult(f"{r.name}@seed{s}", r.rel_error, r.checked, r.passed))
    return out
