"""Architecture configuration with strict JSON loading (unknown keys rejected)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

BANDS = 31
SCALES = 3

BLOCKS = ("ssab", "resnet")
FUSIONS = ("sfam", "concat_conv")
MSAS = ("spatio_spectral", "spatial_only", "spectral_only", "shuffle_only", "shifted_window")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SsabConfig:
    dim: int
    window_size: int = 4
    spatial_heads: int = 2
    spectral_heads: int = 2
    ffn_ratio: int = 2
    msa: str = "spatio_spectral"
    rel_pos_bias: bool = False

    def validate(self) -> None:
        if self.msa not in MSAS:
            raise ConfigError(f"msa must be one of {MSAS}, got {self.msa!r}")
        if self.dim % self.spatial_heads or self.dim % self.spectral_heads:
            raise ConfigError(f"heads ({self.spatial_heads}, {self.spectral_heads}) must divide dim {self.dim}")
        if self.window_size < 1 or self.ffn_ratio < 1:
            raise ConfigError("window_size and ffn_ratio must be positive")

    @property
    def has_spatial(self) -> bool:
        return self.msa != "spectral_only"

    @property
    def has_spectral(self) -> bool:
        return self.msa in ("spatio_spectral", "spectral_only")

    @property
    def spatial_mode(self) -> str:
        return {"spatio_spectral": "shuffle", "shuffle_only": "shuffle",
                "shifted_window": "shifted", "spatial_only": "global"}.get(self.msa, "")


@dataclass(frozen=True)
class FebConfig:
    """Widths are [enc1, enc2, bottleneck, dec1, dec2]."""

    widths: tuple[int, int, int, int, int]
    blocks_per_level: int = 1
    block: str = "ssab"
    out_channels: int = BANDS

    def validate(self) -> None:
        w = self.widths
        if len(w) != 5 or min(w) < 1:
            raise ConfigError(f"FEB needs five positive widths, got {w}")
        if w[0] != w[4] or w[1] != w[3]:
            raise ConfigError(f"encoder/decoder widths must be symmetric, got {w}")
        if self.out_channels != BANDS:
            raise ConfigError(f"FEB output channels are fixed at {BANDS}")
        if self.block not in BLOCKS:
            raise ConfigError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")


@dataclass
class CesstConfig:
    scales: int = SCALES
    base_width: int = 16
    widths: Optional[list[int]] = None
    ssabs_per_level: int = 1
    window_size: int = 4
    spatial_heads: int = 2
    spectral_heads: int = 2
    ffn_ratio: int = 2
    fusion_heads: int = 1
    rcab_reduction: int = 8
    independent_modeling: bool = True
    block: str = "ssab"
    fusion: str = "sfam"
    msa: str = "spatio_spectral"
    swap_query_source: bool = False
    rel_pos_bias: bool = False
    safe_init: bool = False
    seed: int = 0

    def level_widths(self) -> tuple[int, int, int, int, int]:
        if self.widths is not None:
            return tuple(int(v) for v in self.widths)  # type: ignore[return-value]
        b = self.base_width
        return (b, 2 * b, 4 * b, 2 * b, b)

    def feb(self) -> FebConfig:
        return FebConfig(self.level_widths(), self.ssabs_per_level, self.block)

    def ssab(self, dim: int) -> SsabConfig:
        return SsabConfig(dim, self.window_size, self.spatial_heads, self.spectral_heads,
                          self.ffn_ratio, self.msa, self.rel_pos_bias)

    def validate(self) -> "CesstConfig":
        if self.scales != SCALES:
            raise ConfigError(f"scales is fixed at {SCALES}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "sfam" and not self.independent_modeling:
            raise ConfigError("sfam fusion needs three per-channel embeddings (independent_modeling=true)")
        if BANDS % self.fusion_heads:
            raise ConfigError(f"fusion_heads must divide {BANDS}")
        if self.rcab_reduction < 1:
            raise ConfigError("rcab_reduction must be >= 1")
        feb = self.feb()
        feb.validate()
        if self.block == "ssab":
            for w in sorted(set(feb.widths)):
                self.ssab(w).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CesstConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in d.items():
            t = str(types[k])
            if t == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{k} must be a boolean")
            if t == "int" and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{k} must be an integer")
            if t == "str" and not isinstance(v, str):
                raise ConfigError(f"{k} must be a string")
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CesstConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **kw) -> "CesstConfig":
        return dataclasses.replace(self, **kw).validate()


def load_config(path) -> CesstConfig:
    with open(path) as fh:
        return CesstConfig.from_json(fh.read())
