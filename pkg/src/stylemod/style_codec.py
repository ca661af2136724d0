"""Style-code producers: the latent-guided mapper and the reference-guided extractor.

Both emit style vectors of the same width, interchangeable downstream.  The
mapper keeps per-tag and per-attribute parameter banks that are selected by
index (never soft-conditioned), so non-selected branches are provably
untouched.  The extractor shares one convolutional trunk across tags and
indexes only its output head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .catalog import TagAttributeCatalog


@dataclass(frozen=True)
class StyleCode:
    values: torch.Tensor  # (width,)
    origin: str           # "latent" | "reference"
    tag: str
    attribute: str | None = None  # set for latent origin

    def __post_init__(self):
        if self.origin not in ("latent", "reference"):
            raise ValueError(f"bad origin {self.origin!r}")
        if not torch.isfinite(self.values).all():
            raise ValueError("style code has non-finite values")

    @property
    def width(self) -> int:
        return int(self.values.shape[-1])

    # Binary layout: uint32 little-endian width, then width float32 values.
    # Origin/index metadata travels in the sidecar JSON.

    def to_bytes(self) -> bytes:
        vals = self.values.detach().to(torch.float32).reshape(-1)
        return struct.pack("<I", vals.numel()) + vals.numpy().astype("<f4").tobytes()

    def metadata(self) -> dict:
        return {"origin": self.origin, "tag": self.tag, "attribute": self.attribute}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.metadata(), sort_keys=True))

    @classmethod
    def from_bytes(cls, blob: bytes, metadata: dict) -> "StyleCode":
        (width,) = struct.unpack("<I", blob[:4])
        body = blob[4:]
        if len(body) != 4 * width:
            raise ValueError(f"style code payload is {len(body)} bytes, expected {4 * width}")
        values = torch.frombuffer(bytearray(body), dtype=torch.float32).clone()
        return cls(values=values, origin=metadata["origin"], tag=metadata["tag"],
                   attribute=metadata.get("attribute"))

    @classmethod
    def load(cls, path: str | Path) -> "StyleCode":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls.from_bytes(path.read_bytes(), meta)


class LatentStyleMapper(nn.Module):
    """MLP turning Gaussian noise into a style code.

    The first two LinearReLU layers are indexed by tag, the following four by
    (tag, attribute); each index owns its own parameters.
    """

    def __init__(self, catalog: TagAttributeCatalog, noise_width: int = 64,
                 style_width: int = 128):
        super().__init__()
        self.catalog = catalog
        self.noise_width = noise_width
        self.style_width = style_width
        h = style_width
        self.tag_layers = nn.ModuleDict({
            t: nn.Sequential(nn.Linear(noise_width, h), nn.ReLU(),
                             nn.Linear(h, h), nn.ReLU())
            for t in catalog.tag_names
        })
        self.attr_layers = nn.ModuleDict({
            self._key(t.name, a): nn.Sequential(
                nn.Linear(h, h), nn.ReLU(),
                nn.Linear(h, h), nn.ReLU(),
                nn.Linear(h, h), nn.ReLU(),
                nn.Linear(h, style_width), nn.ReLU(),
            )
            for t in catalog.tags for a in t.attributes
        })

    @staticmethod
    def _key(tag: str, attribute: str) -> str:
        return f"{tag}@{attribute}"

    def forward(self, z: torch.Tensor, tag: str, attribute: str) -> torch.Tensor:
        self.catalog.require(tag, attribute)
        if z.shape[-1] != self.noise_width:
            raise ValueError(f"noise width {z.shape[-1]} != {self.noise_width}")
        h = self.tag_layers[tag](z)
        return self.attr_layers[self._key(tag, attribute)](h)

    def map_latent(self, z: torch.Tensor, tag: str, attribute: str) -> StyleCode:
        with torch.no_grad():
            values = self.forward(z, tag, attribute)
        return StyleCode(values=values.reshape(-1), origin="latent", tag=tag, attribute=attribute)


class ReferenceStyleExtractor(nn.Module):
    """Convolutional trunk with downsampling plus per-tag output heads."""

    def __init__(self, catalog: TagAttributeCatalog, style_width: int = 128,
                 trunk_width: int = 64):
        super().__init__()
        self.catalog = catalog
        self.style_width = style_width
        w = trunk_width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1),
        )
        self.heads = nn.ModuleDict({t: nn.Linear(w, style_width) for t in catalog.tag_names})

    def forward(self, y: torch.Tensor, tag: str) -> torch.Tensor:
        self.catalog.require(tag)
        squeeze = y.dim() == 3
        if squeeze:
            y = y[None]
        h = self.trunk(y)
        pooled = F.adaptive_avg_pool2d(h, 1).flatten(1)
        s = self.heads[tag](pooled)
        return s[0] if squeeze else s

    def extract_style(self, y: torch.Tensor, tag: str) -> StyleCode:
        with torch.no_grad():
            values = self.forward(y, tag)
        return StyleCode(values=values.reshape(-1), origin="reference", tag=tag)
