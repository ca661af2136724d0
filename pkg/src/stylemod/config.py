"""Run configuration: published schema, strict validation, presets.

Configs are plain JSON validated against the schema below before any run;
unknown keys are rejected everywhere.  The full-scale preset records the
reference training recipe (256x256, batch 16, 60 epochs, learning rates
1e-4 for the modulation module and extractor, 1e-6 for the mapper); the toy
preset is sized for a two-core CPU budget.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .catalog import TagAttributeCatalog


class ConfigError(ValueError):
    pass


def _obj(properties: dict, required: list[str] | None = None) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "required": required if required is not None else sorted(properties),
        "additionalProperties": False,
    }


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_BOOL = {"type": "boolean"}

CONFIG_SCHEMA = _obj({
    "catalog": _obj({
        "tags": {
            "type": "array",
            "minItems": 1,
            "items": _obj({
                "name": {"type": "string"},
                "attributes": {"type": "array", "minItems": 2, "items": {"type": "string"}},
                "mask_region": {"type": ["string", "null"]},
            }, required=["name", "attributes"]),
        },
    }),
    "resolution": {"type": "integer", "minimum": 8, "multipleOf": 8},
    "seed": {"type": "integer"},
    "diffusion": _obj({
        "train_steps": _POS_INT,
        "substeps": _POS_INT,
        "beta_schedule": _obj({
            "kind": {"enum": ["linear", "constant"]},
            "start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        }, required=["kind"]),
    }),
    "widths": _obj({
        "noise": _POS_INT,
        "style": _POS_INT,
        "semantic": _POS_INT,
        "feature": _POS_INT,
        "unet_base": _POS_INT,
        "vector": _POS_INT,
        "attn_tokens": _POS_INT,
        "attn_dim": _POS_INT,
    }),
    "training": _obj({
        "batch_size": _POS_INT,
        "epochs": _POS_INT,
        "stage0_steps": _POS_INT,
        "classifier_steps": _POS_INT,
        "fbcts_steps": _POS_INT,
        "eval_classifier_steps": _POS_INT,
        "learning_rates": _obj({
            "stage0": _NUM,
            "modulation": _NUM,
            "extractor": _NUM,
            "mapper": _NUM,
            "classifier": _NUM,
            "eval_classifier": _NUM,
        }),
        "grad_clip": _NUM,
        "checkpoint_every": _POS_INT,
        "probe_every": _POS_INT,
        "probe_size": _POS_INT,
        "direction_tau": _NUM,
        "direction_sample_cap": _POS_INT,
    }),
    "ablation": _obj({
        "no_lv": _BOOL,
        "no_cam": _BOOL,
        "no_hd": _BOOL,
        "svlb_only": _BOOL,
        "no_issd": _BOOL,
        "no_pl": _BOOL,
        "no_cl": _BOOL,
    }),
    "evaluation": _obj({
        "acc_subset": _POS_INT,
        "fid_subset": _POS_INT,
        "fid_styles_per_image": _POS_INT,
        "style_bank_size": _POS_INT,
    }),
    "paths": _obj({
        "manifest": {"type": ["string", "null"]},
        "workdir": {"type": ["string", "null"]},
    }),
})


@dataclass(frozen=True)
class RunConfig:
    raw: dict = field(repr=False)

    def __post_init__(self):
        validate_config(self.raw)

    # -- section accessors -------------------------------------------------

    @property
    def catalog(self) -> TagAttributeCatalog:
        return TagAttributeCatalog.from_dict(self.raw["catalog"])

    @property
    def resolution(self) -> int:
        return self.raw["resolution"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def diffusion(self) -> dict:
        return self.raw["diffusion"]

    @property
    def widths(self) -> dict:
        return self.raw["widths"]

    @property
    def training(self) -> dict:
        return self.raw["training"]

    @property
    def ablation(self) -> dict:
        return self.raw["ablation"]

    @property
    def evaluation(self) -> dict:
        return self.raw["evaluation"]

    @property
    def paths(self) -> dict:
        return self.raw["paths"]

    def with_overrides(self, **sections) -> "RunConfig":
        """New config with the given top-level sections shallow-merged."""
        raw = copy.deepcopy(self.raw)
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(copy.deepcopy(value))
            else:
                raw[key] = copy.deepcopy(value)
        return RunConfig(raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls(raw)


def validate_config(raw: dict) -> None:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    sched = raw["diffusion"]["beta_schedule"]
    if sched["kind"] == "linear" and not {"start", "end"} <= sched.keys():
        raise ConfigError("linear beta schedule needs start and end")
    if raw["diffusion"]["substeps"] > raw["diffusion"]["train_steps"]:
        raise ConfigError("substeps cannot exceed train_steps")
    TagAttributeCatalog.from_dict(raw["catalog"])


_DEFAULT_CATALOG = {
    "tags": [
        {"name": "glasses", "attributes": ["with", "without"], "mask_region": "glasses"},
        {"name": "bangs", "attributes": ["with", "without"], "mask_region": "bangs"},
    ]
}


def fullscale_config(catalog: dict | None = None) -> RunConfig:
    """Reference recipe for a full-size run (frozen pretrained backbone assumed)."""
    return RunConfig({
        "catalog": catalog or copy.deepcopy(_DEFAULT_CATALOG),
        "resolution": 256,
        "seed": 0,
        "diffusion": {
            "train_steps": 1000,
            "substeps": 20,
            "beta_schedule": {"kind": "linear", "start": 1e-4, "end": 0.02},
        },
        "widths": {
            "noise": 64, "style": 128, "semantic": 512, "feature": 256,
            "unet_base": 64, "vector": 64, "attn_tokens": 8, "attn_dim": 64,
        },
        "training": {
            "batch_size": 16,
            "epochs": 60,
            "stage0_steps": 500_000,
            "classifier_steps": 20_000,
            "fbcts_steps": 100_000,
            "eval_classifier_steps": 20_000,
            "learning_rates": {
                "stage0": 1e-4,
                "modulation": 1e-4,
                "extractor": 1e-4,
                "mapper": 1e-6,
                "classifier": 1e-3,
                "eval_classifier": 1e-3,
            },
            "grad_clip": 1.0,
            "checkpoint_every": 5_000,
            "probe_every": 100,
            "probe_size": 64,
            "direction_tau": 1e-3,
            "direction_sample_cap": 4096,
        },
        "ablation": {"no_lv": False, "no_cam": False, "no_hd": False,
                     "svlb_only": False, "no_issd": False, "no_pl": False, "no_cl": False},
        "evaluation": {
            "acc_subset": 1000, "fid_subset": 1000,
            "fid_styles_per_image": 5, "style_bank_size": 8,
        },
        "paths": {"manifest": None, "workdir": None},
    })


def toy_config(catalog: dict | None = None) -> RunConfig:
    """Desk-scale recipe: 48x48 toy faces, sized to train in well under half
    an hour on a small-core CPU."""
    base = fullscale_config(catalog)
    return base.with_overrides(
        resolution=48,
        widths={"noise": 64, "style": 128, "semantic": 128, "feature": 64,
                "unet_base": 16, "vector": 64, "attn_tokens": 8, "attn_dim": 64},
        training={
            "batch_size": 32,
            "epochs": 20,
            "stage0_steps": 3000,
            "classifier_steps": 600,
            "fbcts_steps": 1500,
            "eval_classifier_steps": 800,
            "learning_rates": {
                "stage0": 2e-3,
                "modulation": 1e-3,
                "extractor": 1e-3,
                "mapper": 1e-3,
                "classifier": 1e-3,
                "eval_classifier": 2e-3,
            },
            "grad_clip": 1.0,
            "checkpoint_every": 500,
            "probe_every": 50,
            "probe_size": 64,
            "direction_tau": 1e-3,
            "direction_sample_cap": 2048,
        },
        evaluation={"acc_subset": 128, "fid_subset": 192,
                    "fid_styles_per_image": 5, "style_bank_size": 8},
    )
