"""Evaluation: the image-space attribute classifier, editing accuracy, and a
feature-space Frechet-distance proxy.

The FID proxy runs over the evaluation classifier's penultimate features
(64-d), not an Inception network, so only within-artifact orderings are
meaningful.  The matrix square root is taken symmetrically with eigenvalues
clipped at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .catalog import TagAttributeCatalog
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetManifest, ImageStore
from .training import MetricLog, TrainingDiverged, _check_finite

PENULTIMATE_DIM = 64


class ImageAttributeClassifier(nn.Module):
    """Small convolutional classifier over the catalog's attribute slots.

    Per-tag groups are softmax-normalized; `features` exposes the 64-d
    penultimate layer used by the FID proxy.
    """

    def __init__(self, catalog: TagAttributeCatalog, width: int = 32):
        super().__init__()
        self.catalog = catalog
        w = width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.penultimate = nn.Linear(2 * w, PENULTIMATE_DIM)
        self.head = nn.Linear(PENULTIMATE_DIM, catalog.n_slots)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        h = self.trunk(x)
        f = F.silu(self.penultimate(F.adaptive_avg_pool2d(h, 1).flatten(1)))
        return f[0] if squeeze else f

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.logits(x)
        probs = torch.empty_like(logits)
        for tag in self.catalog.tag_names:
            slots = self.catalog.slots_of(tag)
            probs[..., slots] = torch.softmax(logits[..., slots], dim=-1)
        return probs

    def predict(self, x: torch.Tensor, tag: str) -> list[str]:
        """Predicted attribute of `tag` for each image in the batch."""
        slots = self.catalog.slots_of(tag)
        attrs = self.catalog.attributes_of(tag)
        with torch.no_grad():
            idx = self.logits(x)[..., slots].argmax(dim=-1)
        return [attrs[int(i)] for i in idx.reshape(-1)]


def train_image_classifier(manifest: DatasetManifest, store: ImageStore, config: RunConfig,
                           log: MetricLog | None = None,
                           steps: int | None = None) -> tuple[ImageAttributeClassifier, dict]:
    """Train the evaluation classifier on the train split; returns it together
    with a report (per-attribute held-out accuracy, confusion matrices)."""
    cfg = config.training
    steps = cfg["eval_classifier_steps"] if steps is None else steps
    catalog = config.catalog
    log = log or MetricLog(None)
    torch.manual_seed(config.seed + 5)
    clf = ImageAttributeClassifier(catalog)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg["learning_rates"]["eval_classifier"])
    rng = np.random.default_rng(config.seed + 5)
    train_idx = np.asarray(manifest.train_indices)
    labels = manifest.labels_tensor()

    counts = labels[list(manifest.train_indices)].sum(dim=0)
    imbalance = [name for name, c in zip(catalog.slot_names(), counts)
                 if c < 0.05 * len(train_idx)]
    if imbalance:
        log.append(stage="eval_classifier", warning=f"class imbalance on slots {imbalance}")

    for step in range(1, steps + 1):
        idx = rng.choice(train_idx, size=min(cfg["batch_size"] * 2, len(train_idx)), replace=False)
        logits = clf.logits(store.batch(idx))
        loss = torch.zeros(())
        for tag in catalog.tag_names:
            slots = catalog.slots_of(tag)
            target = labels[idx][:, slots].argmax(dim=-1)
            loss = loss + F.cross_entropy(logits[:, slots], target)
        _check_finite(loss, step, "eval_classifier")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg["probe_every"] == 0 or step == steps:
            log.append(stage="eval_classifier", step=step, loss=float(loss.item()))

    report = classifier_report(clf, manifest, store)
    return clf, report


def classifier_report(clf: ImageAttributeClassifier, manifest: DatasetManifest,
                      store: ImageStore, batch: int = 128) -> dict:
    catalog = clf.catalog
    test_idx = list(manifest.test_indices)
    report: dict = {"per_attribute_accuracy": {}, "confusion": {}}
    for tag in catalog.tag_names:
        attrs = catalog.attributes_of(tag)
        confusion = {a: {b: 0 for b in attrs} for a in attrs}
        for i in range(0, len(test_idx), batch):
            chunk = test_idx[i:i + batch]
            preds = clf.predict(store.batch(chunk), tag)
            for idx, pred in zip(chunk, preds):
                truth = manifest.rows[idx].attribute(catalog, tag)
                confusion[truth][pred] += 1
        report["confusion"][tag] = confusion
        for a in attrs:
            total = sum(confusion[a].values())
            acc = confusion[a][a] / total if total else float("nan")
            report["per_attribute_accuracy"][f"{tag}@{a}"] = acc
    return report


def save_classifier(path: str | Path, clf: ImageAttributeClassifier, config: RunConfig,
                    report: dict) -> None:
    arrays = {f"eval_classifier.{k}": v.detach().numpy().astype(np.float32)
              for k, v in clf.state_dict().items()}
    save_checkpoint(path, Checkpoint(stage="eval_classifier", config=config.raw,
                                     arrays=arrays, extra={"report": report}))


def load_classifier(path: str | Path) -> tuple[ImageAttributeClassifier, dict]:
    ckpt = load_checkpoint(path)
    ckpt.require_stage("eval_classifier")
    config = RunConfig(ckpt.config)
    clf = ImageAttributeClassifier(config.catalog)
    clf.load_state_dict({k: torch.from_numpy(v.copy())
                         for k, v in ckpt.namespace("eval_classifier").items()})
    return clf, ckpt.extra.get("report", {})


# -- metrics -------------------------------------------------------------------

def compute_acc(edited_images: torch.Tensor, tag: str, attribute: str,
                classifier: ImageAttributeClassifier, batch: int = 128) -> float:
    """Fraction of edited images the classifier assigns to the target attribute."""
    n = edited_images.shape[0]
    if n == 0:
        raise ValueError("empty edited set")
    hits = 0
    for i in range(0, n, batch):
        preds = classifier.predict(edited_images[i:i + batch], tag)
        hits += sum(p == attribute for p in preds)
    return hits / n


def _sym_sqrt_trace(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """tr((cov_a cov_b)^1/2) via the symmetric form, eigenvalues clipped at 0."""
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def compute_fid_proxy(set_a, set_b, feature_fn, batch: int = 128) -> float:
    """Frechet distance between feature distributions of two image sets.

    `feature_fn` maps an image batch to feature rows; pass an identity to
    operate on precomputed features.  Covariances get a small ridge when a
    set is smaller than twice the feature dimension.
    """
    feats = []
    for images in (set_a, set_b):
        n = images.shape[0] if torch.is_tensor(images) else len(images)
        if n < 2:
            raise ValueError("each set needs at least 2 samples")
        rows = []
        with torch.no_grad():
            for i in range(0, n, batch):
                chunk = images[i:i + batch]
                if not torch.is_tensor(chunk):
                    chunk = torch.stack(list(chunk))
                out = feature_fn(chunk)
                rows.append(out.detach().cpu().numpy() if torch.is_tensor(out) else np.asarray(out))
        feats.append(np.concatenate(rows).astype(np.float64))
    fa, fb = feats
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False).reshape(fa.shape[1], fa.shape[1])
    cov_b = np.cov(fb, rowvar=False).reshape(fb.shape[1], fb.shape[1])
    dim = fa.shape[1]
    for cov, rows in ((cov_a, fa), (cov_b, fb)):
        if rows.shape[0] < 2 * dim:
            cov += np.eye(dim) * 1e-6 * max(1.0, np.trace(cov) / dim)
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    trace_term = float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * _sym_sqrt_trace(cov_a, cov_b)
    return mean_term + trace_term
