"""Three-scale CESST network, inference wrapper, ablation variants and parameter census."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import functional as F
from .blocks import FEB, SCCM, SFAM, SSAB, ChannelLearning, ConcatConvFusion, RCAB, ResBlock
from .config import BANDS, SCALES, CesstConfig, ConfigError
from .data import HsiCube, WAVELENGTHS
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor, no_grad

CHANNELS = ("r", "g", "b")


@dataclass
class MultiScalePrediction:
    """X^1 (full), X^2 (half), X^3 (quarter) resolution predictions."""

    scales: list

    def __getitem__(self, s: int) -> Tensor:
        return self.scales[s]

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)


class CESST(Module):
    def __init__(self, cfg: CesstConfig, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        feb_cfg = cfg.feb()
        n_feb = 3 if cfg.independent_modeling else 1
        cin = 1 if cfg.independent_modeling else 3
        self.scale = ModuleList()
        for s in range(SCALES):
            level = Module()
            if cfg.independent_modeling:
                for c in CHANNELS:
                    setattr(level, f"feb{c.upper()}", FEB(feb_cfg, cin, cfg.ssab, rng=rng, dtype=dtype))
            else:
                level.febRGB = FEB(feb_cfg, cin, cfg.ssab, rng=rng, dtype=dtype)
            if cfg.fusion == "sfam":
                level.fusion = SFAM(cfg.fusion_heads, cfg.ffn_ratio, cfg.rcab_reduction,
                                    cfg.swap_query_source, rng=rng, dtype=dtype)
            else:
                level.fusion = ConcatConvFusion(n_feb, rng=rng, dtype=dtype)
            if s > 0:
                level.sccm = SCCM(BANDS, rng=rng, dtype=dtype)
            self.scale.append(level)
        self.global_residual = Conv2d(3, BANDS, 1, rng=rng, dtype=dtype)
        if cfg.safe_init:
            apply_safe_init(self)

    def febs(self, s: int) -> list[FEB]:
        level = self.scale[s]
        if self.cfg.independent_modeling:
            return [getattr(level, f"feb{c.upper()}") for c in CHANNELS]
        return [level.febRGB]

    def forward(self, rgb: Tensor) -> MultiScalePrediction:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ValueError(f"expected RGB input [B,3,H,W], got {rgb.shape}")
        H, W = rgb.shape[-2:]
        if H % 16 or W % 16:
            raise ValueError(f"H and W must be multiples of 16 (got {H}x{W}); use cesst_infer for arbitrary sizes")
        pyramid = [rgb]
        for _ in range(SCALES - 1):
            pyramid.append(F.resize(pyramid[-1], 0.5, "bilinear"))
        preds: list[Optional[Tensor]] = [None] * SCALES
        guidance = None
        for s in reversed(range(SCALES)):
            x = pyramid[s]
            if self.cfg.independent_modeling:
                feats = [feb(x[:, c:c + 1]) for c, feb in enumerate(self.febs(s))]
            else:
                feats = [self.febs(s)[0](x)]
            if guidance is not None:
                feats = [f + guidance for f in feats]
            fused = self.scale[s].fusion(*feats)
            residual = self.global_residual(x)
            if s > 0:
                preds[s], guidance = self.scale[s].sccm(fused, residual)
            else:
                preds[s] = fused + residual
        return MultiScalePrediction(preds)


def apply_safe_init(model: Module) -> None:
    """Zero every non-residual output path so each block starts as the identity."""
    for _, m in model.named_modules():
        fn = getattr(m, "zero_residual_paths", None)
        if fn is not None:
            fn()


def cesst_forward(model: CESST, rgb: Union[Tensor, np.ndarray]) -> MultiScalePrediction:
    if not isinstance(rgb, Tensor):
        rgb = Tensor(np.asarray(rgb, dtype=model.global_residual.weight.dtype))
    return model(rgb)


def cesst_infer(model: CESST, rgb: Union[Tensor, np.ndarray]):
    """Reconstruct a 31-band cube from an RGB image of any size.

    The image is reflection-padded to multiples of 16, run through the
    network, cropped back and clamped to [0, 1].  ``[3,H,W]`` gives one
    cube, ``[B,3,H,W]`` a list of B cubes.
    """
    arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected RGB [3,H,W] or [B,3,H,W], got {arr.shape}")
    dtype = model.global_residual.weight.dtype
    H, W = arr.shape[-2:]
    ph, pw = (-H) % 16, (-W) % 16
    with no_grad():
        x = Tensor(arr.astype(dtype))
        if ph or pw:
            x = F.pad2d(x, (0, ph, 0, pw), mode="reflect")
        out = model(x)[0].data[:, :, :H, :W]
    out = np.clip(out, 0.0, 1.0)
    if squeeze:
        return HsiCube(out[0])
    return [HsiCube(o) for o in out]


# ---------------------------------------------------------------- ablation rows
ABLATION_ROWS = {
    # break-down ablation
    "baseline": dict(independent_modeling=False, block="resnet", fusion="concat_conv", msa="spatio_spectral"),
    "+independent": dict(independent_modeling=True, block="resnet", fusion="concat_conv", msa="spatio_spectral"),
    "+ssab": dict(independent_modeling=True, block="ssab", fusion="concat_conv", msa="spatio_spectral"),
    "full": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="spatio_spectral"),
    # MSA comparison (full pipeline, MSA swapped)
    "spatial-msa": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="spatial_only"),
    "shifted-window": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="shifted_window"),
    "spectral-msa": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="spectral_only"),
    "shuffle-window": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="shuffle_only"),
    "spatio-spectral": dict(independent_modeling=True, block="ssab", fusion="sfam", msa="spatio_spectral"),
}


def make_variant(cfg: CesstConfig, row: str) -> CesstConfig:
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {sorted(ABLATION_ROWS)}")
    return dataclasses.replace(cfg, **ABLATION_ROWS[row]).validate()


# ---------------------------------------------------------------- census
def _conv(cin: int, cout: int, k: int, bias: bool = True, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _ln(c: int) -> int:
    return 2 * c


def _ffn(c: int, r: int) -> int:
    return _conv(c, c * r, 1) + _conv(c * r, c, 1)


def _window_attn(c: int, heads: int, m: int, rel: bool) -> int:
    n = (c * 3 * c + 3 * c) + (c * c + c)
    return n + ((2 * m - 1) ** 2 * heads if rel else 0)


def _spectral_attn(c: int, heads: int) -> int:
    return _conv(c, c, 1, bias=False) + _conv(c, 2 * c, 1, bias=False) + _conv(c, c, 1) + heads


def count_ssab(cfg: CesstConfig, c: int) -> int:
    n = _ln(c) + _ln(c) + _ffn(c, cfg.ffn_ratio)
    branches = 0
    m = cfg.window_size
    if cfg.msa in ("spatio_spectral", "shuffle_only"):
        n += 2 * _window_attn(c, cfg.spatial_heads, m, cfg.rel_pos_bias) + _conv(c, c, m, groups=c)
        branches += 1
    elif cfg.msa == "shifted_window":
        n += 2 * _window_attn(c, cfg.spatial_heads, m, cfg.rel_pos_bias)
        branches += 1
    elif cfg.msa == "spatial_only":
        n += _window_attn(c, cfg.spatial_heads, m, False)
        branches += 1
    if cfg.msa in ("spatio_spectral", "spectral_only"):
        n += _spectral_attn(c, cfg.spectral_heads)
        branches += 1
    return n + _conv(branches * c, c, 1)


def count_feb(cfg: CesstConfig, cin: int) -> int:
    w1, w2, w3, _, _ = cfg.level_widths()

    def level(c):
        per = count_ssab(cfg, c) if cfg.block == "ssab" else 2 * _conv(c, c, 3)
        return cfg.ssabs_per_level * per

    return (_conv(cin, w1, 3) + level(w1) + _conv(w1, w2, 3) + level(w2) + _conv(w2, w3, 3)
            + level(w3) + _conv(w3, w2, 3) + _conv(2 * w2, w2, 1) + level(w2)
            + _conv(w2, w1, 3) + _conv(2 * w1, w1, 1) + level(w1) + _conv(w1, BANDS, 3))


def count_channel_learning(cfg: CesstConfig) -> int:
    return 3 * _ln(BANDS) + _spectral_attn(BANDS, cfg.fusion_heads) + _ffn(BANDS, cfg.ffn_ratio)


def count_rcab(c: int, reduction: int) -> int:
    mid = max(4, c // reduction)
    return 2 * _conv(c, c, 3) + _conv(c, mid, 1) + 2 * _conv(mid, c, 1)


def count_sfam(cfg: CesstConfig) -> int:
    return (6 * count_channel_learning(cfg) + 3 * _conv(2 * BANDS, BANDS, 3)
            + _conv(3 * BANDS, BANDS, 1) + count_rcab(BANDS, cfg.rcab_reduction))


def analytic_param_count(cfg: CesstConfig) -> int:
    """Parameter count derived from the configuration alone (no model instance)."""
    if cfg.independent_modeling:
        febs = 3 * count_feb(cfg, 1)
        fusion = count_sfam(cfg) if cfg.fusion == "sfam" else _conv(3 * BANDS, BANDS, 3)
    else:
        febs = count_feb(cfg, 3)
        fusion = _conv(BANDS, BANDS, 3)
    sccm = _conv(BANDS, BANDS, 3) + _conv(BANDS, BANDS, 1) + _conv(BANDS, BANDS, 1)
    return SCALES * (febs + fusion) + (SCALES - 1) * sccm + _conv(3, BANDS, 1)


def census(model: Module) -> dict[str, int]:
    """Parameter counts per top-level component, from the instantiated tensors."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:3])
        out[key] = out.get(key, 0) + p.size
    out["total"] = model.num_parameters()
    return out


def count_model_macs(model: CESST, height: int, width: int) -> int:
    """MACs of one forward pass on a ``1x3xHxW`` input, measured by instrumentation."""
    from .tensor import count_macs

    dtype = model.global_residual.weight.dtype
    with no_grad(), count_macs() as counter:
        model(Tensor(np.zeros((1, 3, height, width), dtype=dtype)))
    return counter.total


__all__ = [
    "CESST", "MultiScalePrediction", "cesst_forward", "cesst_infer", "make_variant", "ABLATION_ROWS",
    "analytic_param_count", "census", "count_model_macs", "apply_safe_init", "WAVELENGTHS",
    "SSAB", "FEB", "SFAM", "SCCM", "RCAB", "ResBlock", "ChannelLearning",
]
