"""Removal-stage geometry: global directions, mask-swap composites, and the
orthogonal rescaling that turns a per-image swap difference into an
image-specific direction.

Directions live in the input-block feature space.  Dot products are taken
over flattened values; a pair whose cosine falls below the orthogonality
threshold is rejected (that image is skipped for the batch).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

ORTHO_TAU = 1e-3


class DirectionError(ValueError):
    pass


class DirectionRejected(DirectionError):
    """Raised when a swap direction is too orthogonal to the global one."""


@dataclass(frozen=True)
class SemanticDirection:
    values: torch.Tensor
    kind: str  # "global" | "raw_swap" | "image_specific"
    tag: str = ""
    from_attribute: str = ""
    to_attribute: str = ""

    def __post_init__(self):
        if self.kind not in ("global", "raw_swap", "image_specific"):
            raise DirectionError(f"bad direction kind {self.kind!r}")
        if not torch.isfinite(self.values).all():
            raise DirectionError("direction has non-finite values")

    def flat(self) -> torch.Tensor:
        return self.values.reshape(-1)


def _batched_mean(images: Sequence[torch.Tensor] | torch.Tensor,
                  feature_fn: Callable, batch: int = 64) -> torch.Tensor:
    if torch.is_tensor(images):
        n = images.shape[0]
        get = lambda i, j: images[i:j]
    else:
        n = len(images)
        get = lambda i, j: torch.stack(list(images[i:j]))
    total = None
    with torch.no_grad():
        for i in range(0, n, batch):
            feats = feature_fn(get(i, min(i + batch, n)))
            part = feats.sum(dim=0)
            total = part if total is None else total + part
    return total / n


def global_direction(with_set, without_set, feature_fn: Callable,
                     tag: str = "", from_attribute: str = "", to_attribute: str = "",
                     batch: int = 64) -> SemanticDirection:
    """Mean feature of the set lacking the attribute minus mean of the set having it."""
    n_with = with_set.shape[0] if torch.is_tensor(with_set) else len(with_set)
    n_without = without_set.shape[0] if torch.is_tensor(without_set) else len(without_set)
    if n_with == 0 or n_without == 0:
        raise DirectionError("both image sets must be nonempty")
    d = _batched_mean(without_set, feature_fn, batch) - _batched_mean(with_set, feature_fn, batch)
    return SemanticDirection(values=d, kind="global", tag=tag,
                             from_attribute=from_attribute, to_attribute=to_attribute)


def mask_swap(x: torch.Tensor, r: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Pixelwise composite: donor pixels inside the mask, original outside."""
    if x.shape != r.shape:
        raise DirectionError(f"image resolutions differ: {tuple(x.shape)} vs {tuple(r.shape)}")
    mask = mask.to(x.dtype)
    if mask.dim() == 2:
        mask = mask[None]
    if mask.shape[-2:] != x.shape[-2:]:
        raise DirectionError(f"mask resolution {tuple(mask.shape[-2:])} != image {tuple(x.shape[-2:])}")
    bad = ~((mask == 0) | (mask == 1))
    if bad.any():
        raise DirectionError("mask must be binary")
    if mask.sum() == 0:
        raise DirectionError("mask is empty")
    return mask * r + (1.0 - mask) * x


def raw_direction(x: torch.Tensor, x_swapped: torch.Tensor, feature_fn: Callable,
                  tag: str = "", from_attribute: str = "", to_attribute: str = "") -> SemanticDirection:
    """Feature displacement caused by the swap: features(swapped) - features(original)."""
    if x.shape != x_swapped.shape:
        raise DirectionError("image resolutions differ")
    with torch.no_grad():
        d = feature_fn(x_swapped) - feature_fn(x)
    return SemanticDirection(values=d, kind="raw_swap", tag=tag,
                             from_attribute=from_attribute, to_attribute=to_attribute)


def rescale_direction(d_m: SemanticDirection, d_s: SemanticDirection,
                      tau: float = ORTHO_TAU) -> SemanticDirection:
    """Rescale the swap direction so its orthogonal projection onto the global
    direction equals the global direction exactly."""
    m, s = d_m.flat().double(), d_s.flat().double()
    if m.shape != s.shape:
        raise DirectionError("direction shapes differ")
    s_norm_sq = float(s @ s)
    if s_norm_sq == 0.0:
        raise DirectionError("global direction is zero")
    dot = float(m @ s)
    m_norm = float(m.norm())
    if dot == 0.0 or abs(dot) < tau * m_norm * s_norm_sq ** 0.5:
        raise DirectionRejected(
            f"swap direction nearly orthogonal to global direction (|cos|="
            f"{abs(dot) / (m_norm * s_norm_sq ** 0.5 + 1e-30):.2e} < {tau:g})")
    coeff = s_norm_sq / dot
    return SemanticDirection(values=(coeff * d_m.values.double()).to(d_m.values.dtype),
                             kind="image_specific", tag=d_m.tag,
                             from_attribute=d_m.from_attribute, to_attribute=d_m.to_attribute)


# -- persistence of precomputed global directions ---------------------------

def save_direction_cache(path: str | Path, directions: dict[tuple[str, str, str], SemanticDirection]) -> None:
    """One entry per (tag, from_attribute, to_attribute), flattened with shape metadata."""
    arrays = {}
    for (tag, j_from, j_to), d in directions.items():
        key = f"{tag}|{j_from}|{j_to}"
        arrays[key] = d.flat().numpy().astype(np.float32)
        arrays[f"shape::{key}"] = np.asarray(d.values.shape, dtype=np.int64)
    np.savez(path, **arrays)


def load_direction_cache(path: str | Path) -> dict[tuple[str, str, str], SemanticDirection]:
    data = np.load(path)
    out = {}
    for key in data.files:
        if key.startswith("shape::"):
            continue
        tag, j_from, j_to = key.split("|")
        shape = tuple(int(v) for v in data[f"shape::{key}"])
        values = torch.from_numpy(data[key]).reshape(shape)
        out[(tag, j_from, j_to)] = SemanticDirection(
            values=values, kind="global", tag=tag, from_attribute=j_from, to_attribute=j_to)
    return out
