"""End-to-end editing: extract the current style, build the source semantic
code, invert the image to its terminal latent, re-condition on the target
style, and decode.

Both the CLI and the HTTP service drive edits through this module, so
identical parameters produce identical pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from .checkpoint import Checkpoint
from .diffusion import LatentImage, decode, encode
from .pipeline import ModelBundle
from .style_codec import StyleCode


class EditError(ValueError):
    pass


@dataclass(frozen=True)
class Guidance:
    kind: str                      # "latent" | "reference" | "style"
    seed: int | None = None        # latent
    reference: torch.Tensor | None = None  # reference image, CHW in [-1, 1]
    style: StyleCode | None = None  # precomputed style code

    def __post_init__(self):
        if self.kind == "latent":
            if self.seed is None:
                raise EditError("latent guidance needs a seed")
        elif self.kind == "reference":
            if self.reference is None:
                raise EditError("reference guidance needs a reference image")
        elif self.kind == "style":
            if self.style is None:
                raise EditError("style guidance needs a style code")
        else:
            raise EditError(f"unknown guidance kind {self.kind!r}")


class EditPipeline:
    def __init__(self, bundle: ModelBundle, checkpoint: Checkpoint | None = None):
        self.bundle = bundle
        self.checkpoint = checkpoint
        self.substeps = bundle.substeps()
        for module in bundle.modules().values():
            module.eval()
            module.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, path: str | Path, require_stage: str | None = "fbcts") -> "EditPipeline":
        bundle, ckpt = ModelBundle.from_checkpoint(path)
        if require_stage is not None:
            ckpt.require_stage(require_stage)
        return cls(bundle, ckpt)

    @property
    def catalog(self):
        return self.bundle.catalog

    # -- pieces ----------------------------------------------------------------

    def infer_source_attribute(self, x: torch.Tensor, tag: str) -> str:
        """Predicted current attribute via the code classifier on the bypass code."""
        self.catalog.require(tag)
        with torch.no_grad():
            probs = self.bundle.code_classifier(self.bundle.encoder.encode_bypass(x[None]))[0]
        slots = self.catalog.slots_of(tag)
        attrs = self.catalog.attributes_of(tag)
        return attrs[int(probs[slots].argmax())]

    def style_from_guidance(self, guidance: Guidance, tag: str, attribute: str) -> tuple[torch.Tensor, dict]:
        if guidance.kind == "latent":
            gen = torch.Generator().manual_seed(int(guidance.seed))
            z = torch.randn(self.bundle.config.widths["noise"], generator=gen)
            s = self.bundle.mapper.map_latent(z, tag, attribute)
            return s.values, {"kind": "latent", "seed": int(guidance.seed)}
        if guidance.kind == "reference":
            s = self.bundle.extractor.extract_style(guidance.reference, tag)
            return s.values, {"kind": "reference"}
        code = guidance.style
        if code.tag != tag:
            raise EditError(f"style code was extracted for tag {code.tag!r}, not {tag!r}")
        if code.width != self.bundle.config.widths["style"]:
            raise EditError(f"style code width {code.width} does not match the model")
        return code.values, {"kind": "style"}

    # -- single-image edit -------------------------------------------------------

    def edit(self, x: torch.Tensor, tag: str, attribute: str, guidance: Guidance,
             source_attribute: str | None = None,
             progress: Callable[[float], None] | None = None) -> tuple[torch.Tensor, dict]:
        """Run the full guided edit; returns (edited image, echo of resolved parameters)."""
        self.catalog.require(tag, attribute)
        if source_attribute is None:
            source_attribute = self.infer_source_attribute(x, tag)
        else:
            self.catalog.require(tag, source_attribute)
        s_new, guidance_echo = self.style_from_guidance(guidance, tag, attribute)
        report = lambda frac: progress(frac) if progress else None

        with torch.no_grad():
            s_cur = self.bundle.extractor(x[None], tag)
            c_src = self.bundle.encoder.encode_semantic(x[None], s_cur, tag, source_attribute)
            latent = encode(x[None], c_src, self.bundle.schedule, self.bundle.denoiser,
                            substeps=self.substeps,
                            progress=lambda k, n: report(0.5 * k / n))
            c_dst = self.bundle.encoder.encode_semantic(x[None], s_new[None] if s_new.dim() == 1 else s_new,
                                                        tag, attribute)
            edited = decode(latent, c_dst, self.bundle.schedule, self.bundle.denoiser,
                            substeps=self.substeps,
                            progress=lambda k, n: report(0.5 + 0.5 * k / n))[0]
        echo = {"tag": tag, "attribute": attribute, "source_attribute": source_attribute,
                "guidance": guidance_echo, "substeps": len(self.substeps) - 1}
        return edited, echo

    # -- batched edit (evaluation path) -------------------------------------------

    def edit_batch(self, xs: torch.Tensor, tag: str, attribute: str,
                   styles: torch.Tensor, source_attributes: list[str]) -> torch.Tensor:
        """Vectorized edit for evaluation: one style row and source attribute per image."""
        if xs.shape[0] != styles.shape[0] or xs.shape[0] != len(source_attributes):
            raise EditError("batch size mismatch")
        with torch.no_grad():
            s_cur = self.bundle.extractor(xs, tag)
            feats = self.bundle.encoder.extract_features(xs)
            c_src = torch.empty(xs.shape[0], self.bundle.config.widths["semantic"])
            for attr in set(source_attributes):
                pos = [k for k, a in enumerate(source_attributes) if a == attr]
                c_src[pos] = self.bundle.encoder.finish(
                    self.bundle.encoder.modulate(feats[pos], s_cur[pos], tag, attr))
            latent = encode(xs, c_src, self.bundle.schedule, self.bundle.denoiser,
                            substeps=self.substeps)
            c_dst = self.bundle.encoder.finish(
                self.bundle.encoder.modulate(feats, styles, tag, attribute))
            return decode(latent, c_dst, self.bundle.schedule, self.bundle.denoiser,
                          substeps=self.substeps)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Identity round trip through the terminal latent (no attribute change)."""
        with torch.no_grad():
            c = self.bundle.encoder.encode_bypass(x[None])
            latent = encode(x[None], c, self.bundle.schedule, self.bundle.denoiser,
                            substeps=self.substeps)
            return decode(latent, c, self.bundle.schedule, self.bundle.denoiser,
                          substeps=self.substeps)[0]
