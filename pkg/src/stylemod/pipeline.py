"""Model bundle: every network of the pipeline plus its noise schedule,
built from a validated run config and persisted through the checkpoint
container.

Checkpoints are self-describing: the embedded config rebuilds the exact
module shapes, and a catalog mismatch against the caller's expectation fails
loudly before any weights move.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .catalog import TagAttributeCatalog
from .checkpoint import Checkpoint, check_catalog_match, load_checkpoint, save_checkpoint
from .config import RunConfig
from .denoiser import ConditionalUNet
from .diffusion import NoiseSchedule, build_schedule
from .style_codec import LatentStyleMapper, ReferenceStyleExtractor
from .style_encoder import AblationFlags, StyleModulationEncoder


class CodeClassifier(nn.Module):
    """Semantic code -> per-attribute probabilities in (0, 1)."""

    def __init__(self, semantic_width: int, n_slots: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(semantic_width, hidden), nn.ReLU(),
                                 nn.Linear(hidden, n_slots))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(c))


@dataclass
class ModelBundle:
    config: RunConfig
    catalog: TagAttributeCatalog
    schedule: NoiseSchedule
    denoiser: ConditionalUNet
    encoder: StyleModulationEncoder
    extractor: ReferenceStyleExtractor
    mapper: LatentStyleMapper
    code_classifier: CodeClassifier

    @classmethod
    def build(cls, config: RunConfig) -> "ModelBundle":
        torch.manual_seed(config.seed)
        catalog = config.catalog
        w = config.widths
        flags = AblationFlags(no_lv=config.ablation["no_lv"],
                              no_cam=config.ablation["no_cam"],
                              no_hd=config.ablation["no_hd"])
        diff = config.diffusion
        schedule = build_schedule(diff["train_steps"], diff["beta_schedule"])
        return cls(
            config=config,
            catalog=catalog,
            schedule=schedule,
            denoiser=ConditionalUNet(base_width=w["unet_base"], semantic_width=w["semantic"]),
            encoder=StyleModulationEncoder(
                catalog, feature_width=w["feature"], style_width=w["style"],
                semantic_width=w["semantic"], vector_width=w["vector"],
                n_tokens=w["attn_tokens"], attn_dim=w["attn_dim"], flags=flags),
            extractor=ReferenceStyleExtractor(catalog, style_width=w["style"],
                                              trunk_width=w["feature"]),
            mapper=LatentStyleMapper(catalog, noise_width=w["noise"], style_width=w["style"]),
            code_classifier=CodeClassifier(w["semantic"], catalog.n_slots),
        )

    def modules(self) -> dict[str, nn.Module]:
        return {
            "denoiser": self.denoiser,
            "encoder": self.encoder,
            "extractor": self.extractor,
            "mapper": self.mapper,
            "code_classifier": self.code_classifier,
        }

    # parameter groups trained per stage / frozen afterwards
    def stage0_modules(self) -> dict[str, nn.Module]:
        return {"denoiser": self.denoiser,
                **{f"encoder.{k}": m for k, m in self.encoder.backbone_modules().items()}}

    def style_modules(self) -> dict[str, nn.Module]:
        return {"encoder.units": self.encoder.units,
                "extractor": self.extractor,
                "mapper": self.mapper}

    def frozen_modules(self) -> dict[str, nn.Module]:
        return {**self.stage0_modules(), "code_classifier": self.code_classifier}

    def substeps(self) -> list[int]:
        return self.schedule.substeps(self.config.diffusion["substeps"])

    def phi(self):
        """Feature extractor over batches, gradient-free (direction machinery)."""
        def fn(x: torch.Tensor) -> torch.Tensor:
            with torch.no_grad():
                return self.encoder.extract_features(x)
        return fn

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, module in self.modules().items():
            for key, tensor in module.state_dict().items():
                out[f"{name}.{key}"] = tensor.detach().cpu().numpy().astype(np.float32)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> list[str]:
        """Load any complete module namespaces present; returns the loaded names."""
        loaded = []
        for name, module in self.modules().items():
            prefix = name + "."
            sub = {k[len(prefix):]: torch.from_numpy(v.copy())
                   for k, v in arrays.items() if k.startswith(prefix)}
            if not sub:
                continue
            module.load_state_dict(sub, strict=True)
            loaded.append(name)
        return loaded

    def save(self, path: str | Path, stage: str, extra: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None) -> None:
        arrays = self.state_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        save_checkpoint(path, Checkpoint(stage=stage, config=self.config.raw,
                                         arrays=arrays, extra=extra or {}))

    @classmethod
    def from_checkpoint(cls, path: str | Path,
                        expected_catalog: dict | None = None) -> tuple["ModelBundle", Checkpoint]:
        ckpt = load_checkpoint(path)
        if expected_catalog is not None:
            check_catalog_match(ckpt, expected_catalog)
        bundle = cls.build(RunConfig(ckpt.config))
        bundle.load_arrays(ckpt.arrays)
        return bundle, ckpt


def group_checksum(modules: dict[str, nn.Module]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(modules):
        for key, tensor in sorted(modules[name].state_dict().items()):
            h.update(f"{name}.{key}".encode())
            h.update(tensor.detach().cpu().numpy().astype(np.float32).tobytes())
    return h.hexdigest()
