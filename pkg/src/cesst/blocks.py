"""Composite blocks: SSAB, FEB, channel learning, SFAM, RCAB and SCCM."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .attention import ShuffleWindowMSA, SpectralAttention, spectral_msa
from .config import BANDS, FebConfig, SsabConfig
from .nn import Conv2d, LayerNorm2d, Module, ModuleList
from .tensor import Tensor

BRANCHES = ("rg", "rb", "gr", "gb", "br", "bg")


class FeedForward(Module):
    def __init__(self, dim: int, ratio: int = 2, rng=None, dtype=np.float32):
        super().__init__()
        self.fc1 = Conv2d(dim, dim * ratio, 1, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(dim * ratio, dim, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SSAB(Module):
    """Spatio-spectral attention block.

    z = x + fuse(concat[spatial(LN(x)), spectral(LN(x))]);  y = z + FFN(LN(z)).
    Which branches exist depends on ``cfg.msa``.
    """

    def __init__(self, cfg: SsabConfig, rng=None, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.dim
        self.norm1 = LayerNorm2d(C, dtype=dtype)
        n = 0
        if cfg.has_spatial:
            self.spatial = ShuffleWindowMSA(C, cfg.spatial_heads, cfg.window_size, cfg.spatial_mode,
                                            cfg.rel_pos_bias, rng=rng, dtype=dtype)
            n += 1
        if cfg.has_spectral:
            self.spectral = SpectralAttention(C, cfg.spectral_heads, rng=rng, dtype=dtype)
            n += 1
        self.fuse = Conv2d(n * C, C, 1, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm2d(C, dtype=dtype)
        self.ffn = FeedForward(C, cfg.ffn_ratio, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm1(x)
        parts = []
        if self.cfg.has_spatial:
            parts.append(self.spatial(z))
        if self.cfg.has_spectral:
            parts.append(spectral_msa(z, self.spectral))
        fused = self.fuse(parts[0] if len(parts) == 1 else F.concat(parts, axis=1))
        x = x + fused
        return x + self.ffn(self.norm2(x))

    def zero_residual_paths(self) -> None:
        self.fuse.zero_()
        self.ffn.fc2.zero_()


class ResBlock(Module):
    """conv3x3 -> GELU -> conv3x3 with identity skip (ablation baseline block)."""

    def __init__(self, dim: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(dim, dim, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(dim, dim, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))

    def zero_residual_paths(self) -> None:
        self.conv2.zero_()


def _level(cfg: FebConfig, dim: int, ssab_cfg: Optional[SsabConfig], rng, dtype) -> ModuleList:
    if cfg.block == "ssab":
        return ModuleList(SSAB(ssab_cfg, rng=rng, dtype=dtype) for _ in range(cfg.blocks_per_level))
    return ModuleList(ResBlock(dim, rng=rng, dtype=dtype) for _ in range(cfg.blocks_per_level))


def _run(level: ModuleList, x: Tensor) -> Tensor:
    for blk in level:
        x = blk(x)
    return x


class FEB(Module):
    """UNet feature-extraction block mapping ``in_channels`` to 31 bands.

    stem -> enc1 -> down -> enc2 -> down -> bottleneck -> up (+skip enc2) -> dec1
    -> up (+skip enc1) -> dec2 -> head.  Downsampling is a stride-2 conv,
    upsampling nearest x2 followed by a conv, skips are concat + 1x1 conv.
    """

    def __init__(self, cfg: FebConfig, in_channels: int = 1, ssab_cfg=None, rng=None, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w1, w2, w3, _, _ = cfg.widths

        def sc(d):
            return ssab_cfg(d) if callable(ssab_cfg) else ssab_cfg

        self.stem = Conv2d(in_channels, w1, 3, rng=rng, dtype=dtype)
        self.enc1 = _level(cfg, w1, sc(w1), rng, dtype)
        self.down1 = Conv2d(w1, w2, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.enc2 = _level(cfg, w2, sc(w2), rng, dtype)
        self.down2 = Conv2d(w2, w3, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bottleneck = _level(cfg, w3, sc(w3), rng, dtype)
        self.up1 = Conv2d(w3, w2, 3, rng=rng, dtype=dtype)
        self.skip1 = Conv2d(2 * w2, w2, 1, rng=rng, dtype=dtype)
        self.dec1 = _level(cfg, w2, sc(w2), rng, dtype)
        self.up2 = Conv2d(w2, w1, 3, rng=rng, dtype=dtype)
        self.skip2 = Conv2d(2 * w1, w1, 1, rng=rng, dtype=dtype)
        self.dec2 = _level(cfg, w1, sc(w1), rng, dtype)
        self.head = Conv2d(w1, BANDS, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        ph, pw = (-H) % 4, (-W) % 4
        if ph or pw:
            x = F.pad2d(x, (0, ph, 0, pw), mode="reflect")
        e1 = _run(self.enc1, self.stem(x))
        e2 = _run(self.enc2, self.down1(e1))
        b = _run(self.bottleneck, self.down2(e2))
        d1 = self.up1(F.resize(b, 2.0, "nearest"))
        d1 = _run(self.dec1, self.skip1(F.concat([d1, e2], axis=1)))
        d2 = self.up2(F.resize(d1, 2.0, "nearest"))
        d2 = _run(self.dec2, self.skip2(F.concat([d2, e1], axis=1)))
        out = self.head(d2)
        if ph or pw:
            out = out[:, :, :H, :W]
        return out


class ChannelLearning(Module):
    """Cross spectral attention enriching one embedding with another.

    z = e + S-MSA(Q from LN(e), K/V from LN(p));  y = z + FFN(LN(z)).
    ``swap_query_source`` takes Q and V from the partner and K from the enrichee.
    """

    def __init__(self, dim: int = BANDS, heads: int = 1, ffn_ratio: int = 2,
                 swap_query_source: bool = False, rng=None, dtype=np.float32):
        super().__init__()
        self.swap_query_source = swap_query_source
        self.norm_q = LayerNorm2d(dim, dtype=dtype)
        self.norm_kv = LayerNorm2d(dim, dtype=dtype)
        self.attn = SpectralAttention(dim, heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm2d(dim, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_ratio, rng=rng, dtype=dtype)

    def forward(self, enrichee: Tensor, partner: Tensor) -> Tensor:
        if enrichee.shape != partner.shape:
            raise ValueError(f"channel learning inputs differ in shape: {enrichee.shape} vs {partner.shape}")
        z = enrichee + spectral_msa(self.norm_q(enrichee), self.attn, self.norm_kv(partner),
                                    swap_query_source=self.swap_query_source)
        return z + self.ffn(self.norm2(z))

    def zero_residual_paths(self) -> None:
        self.attn.proj.zero_()
        self.ffn.fc2.zero_()


class RCAB(Module):
    """Residual block gated by coordinate attention (pooled along H and along W)."""

    def __init__(self, dim: int, reduction: int = 8, rng=None, dtype=np.float32):
        super().__init__()
        mid = max(4, dim // reduction)
        self.body1 = Conv2d(dim, dim, 3, padding_mode="reflect", rng=rng, dtype=dtype)
        self.body2 = Conv2d(dim, dim, 3, padding_mode="reflect", rng=rng, dtype=dtype)
        self.squeeze = Conv2d(dim, mid, 1, rng=rng, dtype=dtype)
        self.gate_h = Conv2d(mid, dim, 1, rng=rng, dtype=dtype)
        self.gate_w = Conv2d(mid, dim, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        r = self.body2(F.gelu(self.body1(x)))
        B, C, H, W = r.shape
        pool_h = F.mean(r, axis=3, keepdims=True)                       # [B,C,H,1]
        pool_w = F.mean(r, axis=2, keepdims=True).transpose(0, 1, 3, 2)  # [B,C,W,1]
        y = F.gelu(self.squeeze(F.concat([pool_h, pool_w], axis=2)))
        yh, yw = F.split(y, [H, W], axis=2)
        a_h = F.sigmoid(self.gate_h(yh))
        a_w = F.sigmoid(self.gate_w(yw)).transpose(0, 1, 3, 2)
        return x + r * a_h * a_w

    def zero_residual_paths(self) -> None:
        self.body2.zero_()


class SFAM(Module):
    """Spectrum-fusion attention module: six channel-learning branches + RCAB.

    Branch ``xy`` enriches embedding ``x`` with embedding ``y``.  Each
    embedding's two branches are concatenated and reduced by a 3x3 conv; the
    three results are concatenated, reduced to 31 bands and passed to RCAB.
    """

    def __init__(self, heads: int = 1, ffn_ratio: int = 2, rcab_reduction: int = 8,
                 swap_query_source: bool = False, rng=None, dtype=np.float32):
        super().__init__()
        for name in BRANCHES:
            setattr(self, name, ChannelLearning(BANDS, heads, ffn_ratio, swap_query_source, rng=rng, dtype=dtype))
        self.fuse_r = Conv2d(2 * BANDS, BANDS, 3, rng=rng, dtype=dtype)
        self.fuse_g = Conv2d(2 * BANDS, BANDS, 3, rng=rng, dtype=dtype)
        self.fuse_b = Conv2d(2 * BANDS, BANDS, 3, rng=rng, dtype=dtype)
        self.reduce = Conv2d(3 * BANDS, BANDS, 1, rng=rng, dtype=dtype)
        self.rcab = RCAB(BANDS, rcab_reduction, rng=rng, dtype=dtype)

    def branches(self) -> list[ChannelLearning]:
        return [getattr(self, n) for n in BRANCHES]

    def forward(self, fr: Tensor, fg: Tensor, fb: Tensor, return_intermediate: bool = False):
        if not (fr.shape == fg.shape == fb.shape):
            raise ValueError(f"SFAM inputs differ in shape: {fr.shape}, {fg.shape}, {fb.shape}")
        r = self.fuse_r(F.concat([self.rg(fr, fg), self.rb(fr, fb)], axis=1))
        g = self.fuse_g(F.concat([self.gr(fg, fr), self.gb(fg, fb)], axis=1))
        b = self.fuse_b(F.concat([self.br(fb, fr), self.bg(fb, fg)], axis=1))
        x = self.rcab(self.reduce(F.concat([r, g, b], axis=1)))
        if return_intermediate:
            return x, (r, g, b)
        return x


class ConcatConvFusion(Module):
    """Ablation baseline fusion: concatenate embeddings, 3x3 conv back to 31 bands."""

    def __init__(self, n_inputs: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(n_inputs * BANDS, BANDS, 3, rng=rng, dtype=dtype)

    def forward(self, *feats: Tensor) -> Tensor:
        return self.conv(feats[0] if len(feats) == 1 else F.concat(list(feats), axis=1))


class SCCM(Module):
    """Supervised spectrum-consistency module.

    Produces the 31-band prediction at this scale and guidance features for
    the next finer scale: a sigmoid mask computed from the prediction gates a
    1x1 transform of the features, which is added back and upsampled x2.
    """

    def __init__(self, dim: int = BANDS, rng=None, dtype=np.float32):
        super().__init__()
        self.head = Conv2d(dim, BANDS, 3, rng=rng, dtype=dtype)
        self.mask = Conv2d(BANDS, dim, 1, rng=rng, dtype=dtype)
        self.transform = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)

    def forward(self, features: Tensor, residual: Optional[Tensor] = None):
        pred = self.head(features)
        if residual is not None:
            pred = pred + residual
        gate = F.sigmoid(self.mask(pred))
        modulated = features + self.transform(features) * gate
        guidance = F.resize(modulated, 2.0, "bilinear")
        return pred, guidance

    def zero_residual_paths(self) -> None:
        self.mask.zero_()
        self.transform.zero_()
