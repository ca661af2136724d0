"""Style modulation encoder: input blocks, per-tag modulation units, middle
blocks, output layers.

A modulation unit holds one learnable vector per attribute of its tag; the
style code concatenated with the selected vector drives an AdaIN (gamma, beta)
projection and a small cross-attention whose keys/values are tokens projected
from the same conditioning.  The attention output projection starts at zero,
so an untrained unit reduces to pure AdaIN.

Ablation switches (fixed at construction):
  no_lv  - condition on the style code alone, no learnable vectors
  no_cam - skip the cross-attention entirely
  no_hd  - one shared unit and one shared vector for every tag/attribute
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .catalog import TagAttributeCatalog
from .denoiser import InputBlocks

ADAIN_EPS = 1e-5

SHARED = "_shared_"  # unit/vector key used when the hierarchical design is ablated


def adain(f: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Re-statistics of each channel to mean beta_c and std gamma_c.

    gamma/beta are (C,) or (B, C); f is (C, H, W) or (B, C, H, W).  Constant
    channels (sigma = 0) collapse to beta via the eps guard.
    """
    squeeze = f.dim() == 3
    if squeeze:
        f = f[None]
    if gamma.dim() == 1:
        gamma = gamma[None]
    if beta.dim() == 1:
        beta = beta[None]
    if gamma.shape[-1] != f.shape[1] or beta.shape[-1] != f.shape[1]:
        raise ValueError(f"gamma/beta length must equal channel count {f.shape[1]}")
    if f.shape[-1] == 0 or f.shape[-2] == 0:
        raise ValueError("feature map has zero spatial extent")
    mu = f.mean(dim=(-2, -1), keepdim=True)
    sigma = f.var(dim=(-2, -1), unbiased=False, keepdim=True).sqrt()
    out = gamma[..., None, None] * (f - mu) / sigma.clamp_min(eps) + beta[..., None, None]
    return out[0] if squeeze else out


def apply_direction(f: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Shift a feature map along a semantic direction (elementwise add)."""
    if f.shape[-3:] != d.shape[-3:]:
        raise ValueError(f"direction shape {tuple(d.shape)} does not match features {tuple(f.shape)}")
    return f + d


class ModulationUnit(nn.Module):
    """Per-tag unit: attribute-indexed learnable vectors, AdaIN projection,
    and token cross-attention over the feature map."""

    def __init__(self, attributes: tuple[str, ...], channels: int, style_width: int,
                 vector_width: int = 64, n_tokens: int = 8, attn_dim: int = 64,
                 no_lv: bool = False, no_cam: bool = False):
        super().__init__()
        self.no_lv = no_lv
        self.no_cam = no_cam
        self.channels = channels
        cond_width = style_width if no_lv else style_width + vector_width
        if not no_lv:
            self.vectors = nn.ParameterDict({a: nn.Parameter(torch.randn(vector_width) * 0.02)
                                             for a in attributes})
        self.gb_proj = nn.Linear(cond_width, 2 * channels)
        nn.init.zeros_(self.gb_proj.weight)
        nn.init.zeros_(self.gb_proj.bias)
        if not no_cam:
            self.n_tokens = n_tokens
            self.attn_dim = attn_dim
            self.token_proj = nn.Linear(cond_width, n_tokens * attn_dim)
            self.q_proj = nn.Linear(channels, attn_dim)
            self.k_proj = nn.Linear(attn_dim, attn_dim)
            self.v_proj = nn.Linear(attn_dim, attn_dim)
            self.o_proj = nn.Linear(attn_dim, channels)
            nn.init.zeros_(self.o_proj.weight)
            nn.init.zeros_(self.o_proj.bias)

    def conditioning(self, s: torch.Tensor, attribute: str) -> torch.Tensor:
        if self.no_lv:
            return s
        v = self.vectors[attribute]
        if s.dim() == 2:
            v = v[None].expand(s.shape[0], -1)
        return torch.cat([s, v], dim=-1)

    def forward(self, f: torch.Tensor, s: torch.Tensor, attribute: str) -> torch.Tensor:
        squeeze = f.dim() == 3
        if squeeze:
            f = f[None]
            if s.dim() == 1:
                s = s[None]
        cond = self.conditioning(s, attribute)
        dgamma, beta = self.gb_proj(cond).chunk(2, dim=-1)
        out = adain(f, 1.0 + dgamma, beta)
        if not self.no_cam:
            out = out + self._attend(out, cond)
        return out[0] if squeeze else out

    def _attend(self, f: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B, C, H, W = f.shape
        tokens = self.token_proj(cond).view(B, self.n_tokens, self.attn_dim)
        q = self.q_proj(f.flatten(2).transpose(1, 2))            # (B, HW, A)
        k, v = self.k_proj(tokens), self.v_proj(tokens)          # (B, n, A)
        attn = torch.softmax(q @ k.transpose(1, 2) / self.attn_dim ** 0.5, dim=-1)
        mixed = self.o_proj(attn @ v)                            # (B, HW, C)
        return mixed.transpose(1, 2).view(B, C, H, W)


@dataclass(frozen=True)
class AblationFlags:
    no_lv: bool = False
    no_cam: bool = False
    no_hd: bool = False

    def to_dict(self) -> dict:
        return {"no_lv": self.no_lv, "no_cam": self.no_cam, "no_hd": self.no_hd}


class StyleModulationEncoder(nn.Module):
    """Full encoder F mapping (image, style code, tag, attribute) to a semantic code."""

    def __init__(self, catalog: TagAttributeCatalog, feature_width: int = 64,
                 style_width: int = 128, semantic_width: int = 128,
                 vector_width: int = 64, n_tokens: int = 8, attn_dim: int = 64,
                 flags: AblationFlags = AblationFlags()):
        super().__init__()
        self.catalog = catalog
        self.flags = flags
        self.semantic_width = semantic_width
        self.input_blocks = InputBlocks(feature_width)

        def unit(attrs):
            return ModulationUnit(attrs, feature_width, style_width, vector_width,
                                  n_tokens, attn_dim, no_lv=flags.no_lv, no_cam=flags.no_cam)

        if flags.no_hd:
            self.units = nn.ModuleDict({SHARED: unit((SHARED,))})
        else:
            self.units = nn.ModuleDict({t.name: unit(t.attributes) for t in catalog.tags})
        w = feature_width
        self.middle = nn.Sequential(
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
        )
        self.out = nn.Linear(w, semantic_width)

    # backbone = everything except the modulation units (frozen after stage 0)
    def backbone_modules(self) -> dict[str, nn.Module]:
        return {"input_blocks": self.input_blocks, "middle": self.middle, "out": self.out}

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.input_blocks(x)

    def modulate(self, f: torch.Tensor, s: torch.Tensor, tag: str, attribute: str) -> torch.Tensor:
        self.catalog.require(tag, attribute)
        if self.flags.no_hd:
            return self.units[SHARED](f, s, SHARED)
        return self.units[tag](f, s, attribute)

    def finish(self, f: torch.Tensor) -> torch.Tensor:
        """Middle blocks and output layers, shared by every path."""
        squeeze = f.dim() == 3
        if squeeze:
            f = f[None]
        h = self.middle(f)
        c = self.out(F.adaptive_avg_pool2d(h, 1).flatten(1))
        return c[0] if squeeze else c

    def encode_semantic(self, x: torch.Tensor, s: torch.Tensor, tag: str, attribute: str) -> torch.Tensor:
        return self.finish(self.modulate(self.extract_features(x), s, tag, attribute))

    def encode_bypass(self, x: torch.Tensor) -> torch.Tensor:
        """Stage-0 path: modulation skipped entirely (identity pass-through)."""
        return self.finish(self.extract_features(x))
