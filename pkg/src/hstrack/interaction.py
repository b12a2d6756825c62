"""Attention blocks, per-band spatial interaction, inclusion-exclusion fusion.

Template and search features interact in two steps. First, each spectral
band is treated as an independent grayscale map: a shared self-attention
block refines context within each patch and a shared cross-attention block
fuses the search tokens with the template tokens, band by band. Second,
the per-band interaction maps are combined as set union via the
inclusion-exclusion principle: a chained cross-fusion extracts what all
bands share, subtracting the pairwise intersections from each band
isolates what is specific to it, and the fused output adds shared,
specific, and raw parts over all bands.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
from torch import nn


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int = 8
    dim_head: int | None = None
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.dim % 4 != 0:
            raise ValueError("token dim must be divisible by 4 for the positional encoding")
        head = self.dim_head if self.dim_head is not None else self.dim // self.heads
        if head < 1:
            raise ValueError("per-head dim must be positive")
        object.__setattr__(self, "dim_head", head)
        object.__setattr__(self, "ffn_dim", self.ffn_dim if self.ffn_dim is not None else 2 * self.dim)


@lru_cache(maxsize=64)
def _pos_encoding_cached(h: int, w: int, dim: int) -> torch.Tensor:
    half = dim // 2
    n_freq = half // 2
    inv_freq = 1.0 / (10000.0 ** (torch.arange(n_freq, dtype=torch.float64) * 2.0 / half))

    def axis_encoding(n):
        pos = torch.arange(n, dtype=torch.float64)[:, None] * inv_freq[None, :]
        enc = torch.zeros(n, half, dtype=torch.float64)
        enc[:, 0::2] = torch.sin(pos)
        enc[:, 1::2] = torch.cos(pos)
        return enc

    y_enc = axis_encoding(h)
    x_enc = axis_encoding(w)
    pe = torch.zeros(h, w, dim, dtype=torch.float64)
    pe[:, :, :half] = y_enc[:, None, :]
    pe[:, :, half:] = x_enc[None, :, :]
    return pe.reshape(h * w, dim)


def sine_positional_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Row/column sine-cosine encoding, (h*w, dim), values in [-1, 1]."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    return _pos_encoding_cached(h, w, dim).to(dtype)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    Queries may carry a different token count than keys/values; keys and
    values must agree. Projections are bias-free.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        inner = cfg.heads * cfg.dim_head
        self.w_q = nn.Linear(cfg.dim, inner, bias=False)
        self.w_k = nn.Linear(cfg.dim, inner, bias=False)
        self.w_v = nn.Linear(cfg.dim, inner, bias=False)
        self.w_o = nn.Linear(inner, cfg.dim, bias=False)

    def forward(self, q, k, v, need_weights: bool = False):
        if q.shape[-1] != self.cfg.dim or k.shape[-1] != self.cfg.dim or v.shape[-1] != self.cfg.dim:
            raise ValueError("token dim does not match attention config")
        if k.shape[-2] != v.shape[-2]:
            raise ValueError("key and value token counts differ")
        h, dk = self.cfg.heads, self.cfg.dim_head

        def split(x):
            return x.unflatten(-1, (h, dk)).transpose(-3, -2)  # (..., h, N, dk)

        qh = split(self.w_q(q))
        kh = split(self.w_k(k))
        vh = split(self.w_v(v))
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / dk**0.5, dim=-1)
        out = (attn @ vh).transpose(-3, -2).flatten(-2)
        out = self.w_o(out)
        if need_weights:
            return out, attn
        return out


class FeedForward(nn.Module):
    """Two linear maps with a ReLU in between."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class SelfContextBlock(nn.Module):
    """Residual self-attention: X + LN(MHA(X+P, X+P, X)).

    Queries and keys carry positional encodings; values come straight from
    the input. With a zeroed output projection and zero LN bias this is the
    identity.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiheadAttention(cfg)
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x, pos):
        if pos.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"positional encoding {tuple(pos.shape)} does not match tokens {tuple(x.shape[-2:])}")
        xp = x + pos
        return x + self.norm(self.attn(xp, xp, x))


class CrossFusionBlock(nn.Module):
    """Three-stage mutual cross-attention extracting shared information.

    Both inputs first attend to each other with feed-forward residuals,
    then the refined query side attends to the refined other side once
    more. The output keeps the query side's token count. Not symmetric in
    its arguments.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn_x = MultiheadAttention(cfg)
        self.attn_y = MultiheadAttention(cfg)
        self.attn_out = MultiheadAttention(cfg)
        self.ffn_x = FeedForward(cfg.dim, cfg.ffn_dim)
        self.ffn_y = FeedForward(cfg.dim, cfg.ffn_dim)
        self.ffn_out = FeedForward(cfg.dim, cfg.ffn_dim)

    def forward(self, x, y, pos_x, pos_y):
        if x.shape[-1] != y.shape[-1]:
            raise ValueError("inputs must share the token dim")
        x_t = x + self.ffn_x(self.attn_x(x + pos_x, y + pos_y, y))
        y_t = y + self.ffn_y(self.attn_y(y + pos_y, x + pos_x, x))
        return x_t + self.ffn_out(self.attn_out(x_t + pos_x, y_t + pos_y, y_t))


def tokens_from_map(feat: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) feature map to (..., H*W, C) tokens, row-major."""
    return feat.flatten(-2).transpose(-1, -2)


class BandInteraction(nn.Module):
    """Band-by-band spatial interaction between search and template features.

    Input features are (..., C, B, H, W). Each band of both patches is
    refined by one shared self-context block, then fused search-against-
    template by one shared cross-fusion block. Weights are shared across
    bands, so the parameter count is independent of the band count.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.context = SelfContextBlock(cfg)
        self.fuse = CrossFusionBlock(cfg)

    def forward(self, feat_x: torch.Tensor, feat_z: torch.Tensor) -> list[torch.Tensor]:
        if feat_x.shape[-4] != feat_z.shape[-4] or feat_x.shape[-3] != feat_z.shape[-3]:
            raise ValueError("search and template features must share channels and bands")
        hx, wx = feat_x.shape[-2], feat_x.shape[-1]
        hz, wz = feat_z.shape[-2], feat_z.shape[-1]
        pos_x = sine_positional_encoding(hx, wx, self.cfg.dim, dtype=feat_x.dtype)
        pos_z = sine_positional_encoding(hz, wz, self.cfg.dim, dtype=feat_z.dtype)
        out = []
        for b in range(feat_x.shape[-3]):
            tx = tokens_from_map(feat_x.select(-3, b))
            tz = tokens_from_map(feat_z.select(-3, b))
            tx = self.context(tx, pos_x)
            tz = self.context(tz, pos_z)
            out.append(self.fuse(tx, tz, pos_x, pos_z))
        return out


@dataclass
class InteractionSet:
    """Per-band interaction tokens plus their shared/specific decomposition."""

    per_band: list[torch.Tensor]
    shared: torch.Tensor
    specific: list[torch.Tensor]
    fused: torch.Tensor
    hw: tuple[int, int] | None = None


class InclusionExclusionFusion(nn.Module):
    """Union of per-band interactions via the inclusion-exclusion principle.

    The shared part is the chained pairwise intersection
    SCF(...SCF(SCF(f1, f2), f3)..., fB) computed with a single
    shared-weight cross-fusion block. Each band's specific part subtracts
    the context-refined sum of its pairwise intersections from its own
    refined tokens. The fused output sums shared + specific + raw over all
    bands (the shared part enters once per band on purpose: it is the most
    reliable component) and is refined once more.

    With a single band the pairwise sum is empty, so the specific part is
    zero by convention and the fused output is the refinement of 2*f1.
    """

    def __init__(self, cfg: AttentionConfig, share_context: bool = True):
        super().__init__()
        self.cfg = cfg
        self.fuse = CrossFusionBlock(cfg)
        self.context_specific = SelfContextBlock(cfg)
        self.context_final = self.context_specific if share_context else SelfContextBlock(cfg)

    def forward(self, bands: list[torch.Tensor], pos: torch.Tensor | None = None) -> InteractionSet:
        if not bands:
            raise ValueError("need at least one band")
        n_tokens = bands[0].shape[-2]
        for f in bands:
            if f.shape != bands[0].shape:
                raise ValueError("all band token maps must share one shape")
        if pos is None:
            # square grid is the common case; pass pos explicitly otherwise
            side = int(round(n_tokens**0.5))
            if side * side != n_tokens:
                raise ValueError("non-square token grid: positional encoding must be supplied")
            pos = sine_positional_encoding(side, side, self.cfg.dim, dtype=bands[0].dtype)

        shared = bands[0]
        for f in bands[1:]:
            shared = self.fuse(shared, f, pos, pos)

        specific = []
        for b, fb in enumerate(bands):
            pair_sum = None
            for j, fj in enumerate(bands):
                if j == b:
                    continue
                term = self.fuse(fb, fj, pos, pos)
                pair_sum = term if pair_sum is None else pair_sum + term
            if pair_sum is None:
                specific.append(torch.zeros_like(fb))
            else:
                specific.append(self.context_specific(fb, pos) - self.context_specific(pair_sum, pos))

        total = None
        for fb, sb in zip(bands, specific):
            term = shared + sb + fb
            total = term if total is None else total + term
        fused = self.context_final(total, pos)
        return InteractionSet(per_band=list(bands), shared=shared, specific=specific, fused=fused)


def sum_fusion(bands: list[torch.Tensor]) -> torch.Tensor:
    """Plain feature summation across bands (ablation baseline)."""
    if not bands:
        raise ValueError("need at least one band")
    total = bands[0]
    for f in bands[1:]:
        total = total + f
    return total
