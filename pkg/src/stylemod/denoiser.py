"""Conditional denoising UNet and the shared pixel-feature extractor.

The UNet predicts noise from (x_t, t, c); the semantic code c and the
sinusoidal time embedding both modulate group-norm scale/shift at every
resolution level (adaptive group norm).  The input-block stack defined here
is instantiated by the style-modulation encoder and reused by the semantic
direction machinery, so all three share one feature space.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic transformer-style embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class AdaGNBlock(nn.Module):
    """Residual block with time- and code-conditioned group norm."""

    def __init__(self, cin: int, cout: int, t_dim: int, c_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, 2 * cout)
        self.c_proj = nn.Linear(c_dim, 2 * cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, cemb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        ts, tb = self.t_proj(temb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + ts) + tb
        if cemb is not None:
            cs, cb = self.c_proj(cemb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + cs) + cb
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Three-level encoder-decoder noise predictor with skip connections.

    The output convolution is zero-initialized, so an untrained network
    predicts exactly zero noise.
    """

    def __init__(self, base_width: int = 64, semantic_width: int = 128, time_dim: int = 128):
        super().__init__()
        w = base_width
        self.base_width = w
        self.semantic_width = semantic_width
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(64, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        def block(cin, cout):
            return AdaGNBlock(cin, cout, time_dim, semantic_width)

        self.conv_in = nn.Conv2d(3, w, 3, padding=1)
        self.enc1 = block(w, w)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = block(w, 2 * w)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.enc3 = block(2 * w, 2 * w)
        self.mid = block(2 * w, 2 * w)
        self.dec3 = block(4 * w, 2 * w)
        self.dec2 = block(4 * w, 2 * w)
        self.dec1 = block(3 * w, w)
        self.norm_out = _norm(w)
        self.conv_out = nn.Conv2d(w, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: int | torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        B = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t), dtype=torch.long)
        if c is not None:
            if c.dim() == 1:
                c = c[None]
            if c.shape[0] == 1 and B > 1:
                c = c.expand(B, -1)
            if c.shape[-1] != self.semantic_width:
                raise ValueError(f"semantic code width {c.shape[-1]} != {self.semantic_width}")
        temb = self.time_mlp(sinusoidal_embedding(t, 64))

        h0 = self.conv_in(x)
        h1 = self.enc1(h0, temb, c)
        h2 = self.enc2(self.down1(h1), temb, c)
        h3 = self.enc3(self.down2(h2), temb, c)
        m = self.mid(h3, temb, c)
        u = self.dec3(torch.cat([m, h3], dim=1), temb, c)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.dec2(torch.cat([u, h2], dim=1), temb, c)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.dec1(torch.cat([u, h1], dim=1), temb, c)
        out = self.conv_out(F.silu(self.norm_out(u)))
        return out[0] if squeeze else out


class InputBlocks(nn.Module):
    """Convolutional feature extractor: stem plus three stride-2 stages.

    Maps (B, 3, H, W) images to (B, feature_width, H/8, W/8) maps; kernel 3
    throughout, so cells at stride 8 see a 17x17 receptive field.  No
    normalization layers: the computation is strictly local, so editing a
    pixel region can only move feature cells whose receptive field sees it.
    """

    STRIDE = 8
    RECEPTIVE_FIELD = 17

    def __init__(self, feature_width: int = 64):
        super().__init__()
        w = feature_width
        self.feature_width = w
        self.stem = nn.Conv2d(3, w // 2, 3, padding=1)
        self.stage1 = nn.Conv2d(w // 2, w, 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(w, w, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        h = F.silu(self.stem(x))
        h = F.silu(self.stage1(h))
        h = F.silu(self.stage2(h))
        h = self.stage3(h)
        return h[0] if squeeze else h

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x)

    def cells_seeing(self, mask: torch.Tensor) -> torch.Tensor:
        """Boolean (h, w) map of feature cells whose receptive field meets the mask."""
        mask = mask.float()
        if mask.dim() == 2:
            mask = mask[None, None]
        elif mask.dim() == 3:
            mask = mask[None]
        k, s = self.RECEPTIVE_FIELD, self.STRIDE
        pad = (k - 1) // 2
        hit = F.max_pool2d(F.pad(mask, (pad, pad, pad, pad)), kernel_size=k, stride=s)
        return hit[0, 0] > 0
