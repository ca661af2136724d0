"""Dataset manifests: ingestion with eager validation, image/mask loading.

Manifest schema: one CSV header row with columns
    path, <tag>@<attr> for every catalog slot, optionally mask@<tag>
Labels must be one-hot within each tag's attribute group and every referenced
file must exist; violations are reported with row numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .catalog import TagAttributeCatalog


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    path: str
    labels: np.ndarray                    # (n_slots,) one-hot per tag group
    mask_paths: dict[str, str] = field(default_factory=dict)

    def attribute(self, catalog: TagAttributeCatalog, tag: str) -> str:
        idx = int(np.argmax(self.labels[catalog.slots_of(tag)]))
        return catalog.attributes_of(tag)[idx]


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    catalog: TagAttributeCatalog
    rows: tuple[ManifestRow, ...]
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def indices_with(self, tag: str, attribute: str, split: str | None = None) -> list[int]:
        slot = self.catalog.slot(tag, attribute)
        pool = {"train": self.train_indices, "test": self.test_indices, None: range(len(self.rows))}[split]
        return [i for i in pool if self.rows[i].labels[slot] == 1.0]

    def labels_tensor(self, indices=None) -> torch.Tensor:
        rows = self.rows if indices is None else [self.rows[i] for i in indices]
        return torch.from_numpy(np.stack([r.labels for r in rows]))


def ingest_external(manifest_path: str | Path, catalog: TagAttributeCatalog,
                    train_fraction: float = 5 / 6) -> DatasetManifest:
    """Load and validate a manifest; the leading fraction of rows is the train split."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    slot_names = catalog.slot_names()
    mask_cols = {f"mask@{t.name}": t.name for t in catalog.tags}

    problems: list[str] = []
    rows: list[ManifestRow] = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing_cols = [c for c in ["path", *slot_names] if c not in header]
        if missing_cols:
            raise ManifestError(f"manifest missing required columns: {missing_cols}")
        unknown = [c for c in header if c != "path" and c not in slot_names and c not in mask_cols]
        if unknown:
            raise ManifestError(f"manifest has unknown columns: {unknown}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(rec, root, catalog, slot_names, mask_cols))
            except ManifestError as exc:
                problems.append(f"row {lineno}: {exc}")
                if len(problems) >= 20:
                    problems.append("... (further problems suppressed)")
                    break
    if problems:
        raise ManifestError("manifest validation failed:\n  " + "\n  ".join(problems))
    if not rows:
        raise ManifestError("manifest has no data rows")
    n_train = int(round(len(rows) * train_fraction))
    n_train = min(max(n_train, 1), len(rows) - 1) if len(rows) > 1 else 1
    return DatasetManifest(root=root, catalog=catalog, rows=tuple(rows),
                           train_indices=tuple(range(n_train)),
                           test_indices=tuple(range(n_train, len(rows))))


def _parse_row(rec, root, catalog, slot_names, mask_cols) -> ManifestRow:
    path = (rec.get("path") or "").strip()
    if not path:
        raise ManifestError("empty path")
    if not (root / path).exists():
        raise ManifestError(f"image file missing: {path}")
    labels = np.zeros(len(slot_names), dtype=np.float32)
    for i, col in enumerate(slot_names):
        val = (rec.get(col) or "").strip()
        if val not in ("0", "1"):
            raise ManifestError(f"column {col!r} must be 0 or 1, got {val!r}")
        labels[i] = float(val)
    try:
        catalog.check_label(labels)
    except Exception as exc:
        raise ManifestError(str(exc)) from exc
    mask_paths = {}
    for col, tag in mask_cols.items():
        val = (rec.get(col) or "").strip()
        if val:
            if not (root / val).exists():
                raise ManifestError(f"mask file missing: {val}")
            mask_paths[tag] = val
    return ManifestRow(path=path, labels=labels, mask_paths=mask_paths)


# -- pixel access -------------------------------------------------------------

def image_to_tensor(img: Image.Image) -> torch.Tensor:
    """PIL RGB image to float32 CHW in [-1, 1]."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def tensor_to_image(x: torch.Tensor) -> Image.Image:
    """Float CHW in [-1, 1] to PIL RGB."""
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).numpy())


class ImageStore:
    """In-memory uint8 image/mask cache for a manifest (toy datasets fit easily)."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._images: dict[int, np.ndarray] = {}
        self._masks: dict[tuple[int, str], np.ndarray] = {}

    def image(self, index: int) -> torch.Tensor:
        if index not in self._images:
            img = Image.open(self.manifest.root / self.manifest.rows[index].path)
            self._images[index] = np.asarray(img.convert("RGB"), dtype=np.uint8)
        arr = torch.from_numpy(self._images[index].astype(np.float32))
        return arr.permute(2, 0, 1) / 127.5 - 1.0

    def batch(self, indices) -> torch.Tensor:
        return torch.stack([self.image(i) for i in indices])

    def mask(self, index: int, tag: str) -> torch.Tensor:
        key = (index, tag)
        if key not in self._masks:
            row = self.manifest.rows[index]
            if tag not in row.mask_paths:
                raise ManifestError(f"row {index} has no mask for tag {tag!r}")
            img = Image.open(self.manifest.root / row.mask_paths[tag]).convert("L")
            self._masks[key] = (np.asarray(img) > 127).astype(np.uint8)
        return torch.from_numpy(self._masks[key].astype(np.float32))
