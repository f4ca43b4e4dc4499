"""Window, shuffle-window and spectral multi-head self-attention.

Spatial attention works on pixel tokens inside non-overlapping ``M x M``
windows.  The shuffle variant interleaves tokens from distant windows between
two window passes so that every output sees more than one original window;
spectral attention instead treats each channel map as one token, which keeps
its cost linear in the number of pixels.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module, Parameter
from .tensor import Tensor

MASK_NEG = -1e9


class WindowError(ValueError):
    pass


# ---------------------------------------------------------------- permutations
def shuffle_permutation(n: int, m: int) -> np.ndarray:
    """Source index for every output slot of the spatial shuffle.

    The token at flat index ``i = a * (n // m) + b`` lands at ``b * m + a``.
    """
    if m < 1 or n % m:
        raise WindowError(f"window size {m} must divide token count {n}")
    return np.arange(n).reshape(m, n // m).T.reshape(-1)


def alignment_permutation(n: int, m: int) -> np.ndarray:
    if m < 1 or n % m:
        raise WindowError(f"window size {m} must divide token count {n}")
    return np.arange(n).reshape(n // m, m).T.reshape(-1)


@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    height: int
    width: int

    def __post_init__(self):
        M, H, W = self.window_size, self.height, self.width
        if min(M, H, W) < 1:
            raise WindowError(f"window spec extents must be positive: M={M}, H={H}, W={W}")
        if H % M or W % M:
            raise WindowError(f"window size {M} must divide both H={H} and W={W}")

    @property
    def token_count(self) -> int:
        return self.height * self.width

    @property
    def num_windows(self) -> int:
        return (self.height // self.window_size) * (self.width // self.window_size)

    @property
    def shuffle_perm(self) -> np.ndarray:
        return shuffle_permutation(self.token_count, self.window_size)

    @property
    def alignment_perm(self) -> np.ndarray:
        return alignment_permutation(self.token_count, self.window_size)

    @classmethod
    def for_input(cls, x: Tensor, window_size: int) -> "WindowSpec":
        return cls(window_size, x.shape[-2], x.shape[-1])


def _window_of(tokens: Tensor, spec) -> int:
    N = tokens.shape[1]
    if isinstance(spec, WindowSpec):
        if N != spec.token_count:
            raise WindowError(f"token count {N} does not match spec ({spec.token_count})")
        return spec.window_size
    M = int(spec)
    if M < 1 or N % M:
        raise WindowError(f"window size {M} must divide token count {N}")
    return M


def spatial_shuffle(tokens: Tensor, spec: Union[WindowSpec, int]) -> Tensor:
    """Reshape the token axis of ``[B, N, C]`` to (M, N/M), transpose, flatten.

    ``spec`` is a :class:`WindowSpec` or just the window size ``M`` (any divisor of N).
    """
    B, N, C = tokens.shape
    M = _window_of(tokens, spec)
    return tokens.reshape(B, M, N // M, C).transpose(0, 2, 1, 3).reshape(B, N, C)


def spatial_alignment(tokens: Tensor, spec: Union[WindowSpec, int]) -> Tensor:
    """Inverse of :func:`spatial_shuffle`: reshape to (N/M, M), transpose, flatten."""
    B, N, C = tokens.shape
    M = _window_of(tokens, spec)
    return tokens.reshape(B, N // M, M, C).transpose(0, 2, 1, 3).reshape(B, N, C)


def _shuffle_grid(x: Tensor, m: int, inverse: bool = False) -> Tensor:
    # Same permutation as spatial_shuffle, applied to [B, C, H, W] with row-major tokens.
    B, C, H, W = x.shape
    N = H * W
    if inverse:
        t = x.reshape(B, C, N // m, m).transpose(0, 1, 3, 2)
    else:
        t = x.reshape(B, C, m, N // m).transpose(0, 1, 3, 2)
    return t.reshape(B, C, H, W)


# ---------------------------------------------------------------- parameters
class WindowAttention(Module):
    """Q/K/V and output projections for one spatial MSA pass."""

    def __init__(self, dim: int, heads: int, window_size: int = 0, rel_pos_bias: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.window_size = window_size
        if rel_pos_bias:
            if window_size < 1:
                raise ValueError("relative position bias needs a fixed window size")
            self.rel_bias = Parameter(np.zeros(((2 * window_size - 1) ** 2, heads), dtype=dtype))
            self._rel_index = _relative_index(window_size)
        else:
            self.rel_bias = None


def _relative_index(m: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return (rel[0] * (2 * m - 1) + rel[1]).reshape(-1)


class SpectralAttention(Module):
    """Pointwise Q / KV / output projections plus one learnable temperature per head."""

    def __init__(self, dim: int, heads: int, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.dim, self.heads = dim, heads
        self.q = Conv2d(dim, dim, 1, bias=False, rng=rng, dtype=dtype)
        self.kv = Conv2d(dim, 2 * dim, 1, bias=False, rng=rng, dtype=dtype)
        self.proj = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)
        self.temperature = Parameter(np.ones(heads, dtype=dtype))


# ---------------------------------------------------------------- attention core
def _attend(tokens: Tensor, p: WindowAttention, mask: Optional[np.ndarray] = None,
            record: Optional[list] = None) -> Tensor:
    # tokens: [Bn, T, C] -> [Bn, T, C]
    Bn, T, C = tokens.shape
    h = p.heads
    d = C // h
    qkv = p.qkv(tokens).reshape(Bn, T, 3, h, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if p.rel_bias is not None and T == p.window_size ** 2:
        bias = F.take(p.rel_bias, p._rel_index, axis=0).reshape(T, T, h).transpose(2, 0, 1)
        scores = scores + bias
    if mask is not None:
        scores = scores + Tensor(mask.astype(scores.dtype))
    attn = F.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data)
    out = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(Bn, T, C)
    return p.proj(out)


def _partition(x: Tensor, mh: int, mw: int) -> Tensor:
    B, C, H, W = x.shape
    return (x.reshape(B, C, H // mh, mh, W // mw, mw)
            .transpose(0, 2, 4, 3, 5, 1)
            .reshape(B * (H // mh) * (W // mw), mh * mw, C))


def _merge(t: Tensor, B: int, C: int, H: int, W: int, mh: int, mw: int) -> Tensor:
    return (t.reshape(B, H // mh, W // mw, mh, mw, C)
            .transpose(0, 5, 1, 3, 2, 4)
            .reshape(B, C, H, W))


def window_msa(x: Tensor, p: WindowAttention, spec: WindowSpec, mask: Optional[np.ndarray] = None,
               record: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention restricted to non-overlapping ``M x M`` windows."""
    B, C, H, W = x.shape
    if (H, W) != (spec.height, spec.width):
        raise WindowError(f"input spatial size {(H, W)} does not match spec {(spec.height, spec.width)}")
    M = spec.window_size
    out = _attend(_partition(x, M, M), p, mask, record)
    return _merge(out, B, C, H, W, M, M)


def global_msa(x: Tensor, p: WindowAttention, record: Optional[list] = None) -> Tensor:
    """Attention over all ``H * W`` tokens at once (quadratic in HW)."""
    B, C, H, W = x.shape
    out = _attend(_partition(x, H, W), p, None, record)
    return _merge(out, B, C, H, W, H, W)


def depthwise_bridge(a: Tensor, dw: Conv2d) -> Tensor:
    return a + dw(a)


def shuffle_window_msa(x: Tensor, p1: WindowAttention, p2: WindowAttention, dw: Optional[Conv2d],
                       spec: WindowSpec, shuffle: bool = True, record: Optional[list] = None) -> Tensor:
    """window MSA -> depthwise residual bridge -> shuffle -> window MSA -> alignment.

    With ``shuffle=False`` this is two stacked window MSAs (no cross-window flow
    apart from the depthwise bridge; pass ``dw=None`` to drop that too).
    """
    a = window_msa(x, p1, spec, record=record)
    if dw is not None:
        a = depthwise_bridge(a, dw)
    M = spec.window_size
    if shuffle:
        a = _shuffle_grid(a, M)
    b = window_msa(a, p2, spec, record=record)
    if shuffle:
        b = _shuffle_grid(b, M, inverse=True)
    return b


def shift_mask(spec: WindowSpec, shift: int) -> np.ndarray:
    """Additive mask keeping cyclically-wrapped regions from attending to each other."""
    H, W, M = spec.height, spec.width, spec.window_size
    labels = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, H - M), slice(H - M, H - shift), slice(H - shift, H)):
        for ws in (slice(0, W - M), slice(W - M, W - shift), slice(W - shift, W)):
            labels[hs, ws] = cnt
            cnt += 1
    win = labels.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)[:, None]  # [nW, 1, T, T]


def shifted_window_msa(x: Tensor, p1: WindowAttention, p2: WindowAttention, spec: WindowSpec,
                       record: Optional[list] = None) -> Tensor:
    """Two window MSAs, the second on a cyclically shifted grid (shift M // 2)."""
    a = window_msa(x, p1, spec, record=record)
    s = spec.window_size // 2
    if s == 0 or spec.window_size >= min(spec.height, spec.width):
        return window_msa(a, p2, spec, record=record)
    B = x.shape[0]
    H, W = spec.height, spec.width
    fwd_h, fwd_w = (np.arange(H) + s) % H, (np.arange(W) + s) % W
    back_h, back_w = (np.arange(H) - s) % H, (np.arange(W) - s) % W
    shifted = F.take(F.take(a, fwd_h, axis=2), fwd_w, axis=3)
    mask = np.tile(shift_mask(spec, s), (B, 1, 1, 1))
    b = window_msa(shifted, p2, spec, mask=mask, record=record)
    return F.take(F.take(b, back_h, axis=2), back_w, axis=3)


def spectral_msa(x: Tensor, p: SpectralAttention, y: Optional[Tensor] = None,
                 swap_query_source: bool = False, record: Optional[list] = None) -> Tensor:
    """Channel-token attention; ``y`` (default ``x``) supplies keys and values.

    With ``swap_query_source`` the query comes from ``y`` and the key from
    ``x`` (values still from ``y``).
    """
    y = x if y is None else y
    if x.shape != y.shape:
        raise ValueError(f"query/key inputs differ in shape: {x.shape} vs {y.shape}")
    B, C, H, W = x.shape
    h = p.heads
    d = C // h
    N = H * W
    if swap_query_source:
        q = p.q(y)
        k, v = F.split(p.kv(x), [C, C], axis=1)
        _, v = F.split(p.kv(y), [C, C], axis=1)
    else:
        q = p.q(x)
        k, v = F.split(p.kv(y), [C, C], axis=1)
    q = F.l2_normalize(q.reshape(B, h, d, N), axis=-1)
    k = F.l2_normalize(k.reshape(B, h, d, N), axis=-1)
    v = v.reshape(B, h, d, N)
    scores = F.matmul(q, F.swapaxes(k, -1, -2)) * p.temperature.reshape(1, h, 1, 1)
    attn = F.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data)
    out = F.matmul(attn, v).reshape(B, C, H, W)
    return p.proj(out)


# ---------------------------------------------------------------- complexity
VARIANTS = ("window", "shuffle_window", "spectral", "global")


@dataclass
class FlopCount:
    """Multiply-accumulate counts for one MSA pass, broken down per sub-op."""

    variant: str
    C: int
    H: int
    W: int
    M: int
    heads: int
    parts: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.parts.values()))

    @property
    def scores(self) -> int:
        return self.parts.get("scores", 0)

    @property
    def proj(self) -> int:
        return self.parts.get("proj", 0)

    def csv_row(self) -> list:
        return [self.variant, self.C, self.H, self.W, self.M, self.heads,
                self.scores, self.proj, self.total]


CSV_HEADER = ["variant", "C", "H", "W", "M", "heads", "macs_scores", "macs_proj", "macs_total"]


def count_flops(variant: str, C: int, H: int, W: int, M: int, h: int) -> FlopCount:
    """Closed-form MAC counts (batch size 1).

    ``scores`` is the Q.K^T product, ``attn_v`` the weighted sum of values,
    ``proj`` the Q/K/V/output projections and ``dwconv`` the depthwise bridge.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if min(C, H, W, M, h) < 1 or C % h:
        raise ValueError(f"invalid dims C={C} H={H} W={W} M={M} heads={h}")
    N = H * W
    proj = 4 * N * C * C
    if variant == "window":
        parts = {"scores": N * M * M * C, "attn_v": N * M * M * C, "proj": proj}
    elif variant == "shuffle_window":
        parts = {"scores": 2 * N * M * M * C, "attn_v": 2 * N * M * M * C,
                 "proj": 2 * proj, "dwconv": N * C * M * M}
    elif variant == "spectral":
        parts = {"scores": N * C * C // h, "attn_v": N * C * C // h, "proj": proj}
    else:
        parts = {"scores": C * N * N, "attn_v": C * N * N, "proj": proj}
    return FlopCount(variant, C, H, W, M, h, {k: int(v) for k, v in parts.items()})


def flops_csv(counts: list[FlopCount]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in counts:
        w.writerow(c.csv_row())
    return buf.getvalue()


# ---------------------------------------------------------------- modules
def pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, int, int]:
    """Reflection-pad bottom/right so H and W are multiples of ``m``."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph or pw:
        x = F.pad2d(x, (0, ph, 0, pw), mode="reflect")
    return x, H, W


class ShuffleWindowMSA(Module):
    """Spatial branch of the spatio-spectral block (arbitrary H, W via padding).

    ``mode`` selects the spatial scheme: ``shuffle`` (default), ``stacked``
    (no shuffle), ``shifted`` (cyclic shift) or ``global``.
    """

    def __init__(self, dim: int, heads: int, window_size: int, mode: str = "shuffle",
                 rel_pos_bias: bool = False, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if mode not in ("shuffle", "stacked", "shifted", "global"):
            raise ValueError(f"unknown spatial attention mode {mode!r}")
        self.mode = mode
        self.window_size = window_size
        self.wmsa1 = WindowAttention(dim, heads, window_size, rel_pos_bias and mode != "global", rng=rng, dtype=dtype)
        if mode != "global":
            self.wmsa2 = WindowAttention(dim, heads, window_size, rel_pos_bias, rng=rng, dtype=dtype)
        if mode in ("shuffle", "stacked"):
            self.dw = Conv2d(dim, dim, window_size, padding="same", groups=dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        if self.mode == "global":
            return global_msa(x, self.wmsa1, record)
        M = self.window_size
        xp, H, W = pad_to_multiple(x, M)
        spec = WindowSpec.for_input(xp, M)
        if self.mode == "shifted":
            out = shifted_window_msa(xp, self.wmsa1, self.wmsa2, spec, record)
        else:
            out = shuffle_window_msa(xp, self.wmsa1, self.wmsa2, self.dw, spec,
                                     shuffle=self.mode == "shuffle", record=record)
        if out.shape[-2:] != (H, W):
            out = out[:, :, :H, :W]
        return out

    def zero_output(self) -> None:
        last = self.wmsa1 if self.mode == "global" else self.wmsa2
        last.proj.zero_()
