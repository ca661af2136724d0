"""Training: stage-0 self-reconstruction pretraining, the code classifier,
and the forward-backward consistency strategy (remove the attribute along an
image-specific direction, restore it through style modulation).

Parameter groups:
  stage 0 trains the denoiser and the encoder backbone; both freeze afterwards.
  The code classifier trains on frozen bypass codes, then freezes.
  The consistency stage trains only {modulation units, extractor, mapper};
  frozen groups are checksum-verified every step.

Gradient routing: the perceptual loss reaches only the modulation units (the
style code is detached on that path); the classification loss reaches the
modulation units, the extractor, and the mapper.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import DatasetManifest, ImageStore, ingest_external
from .directions import (
    DirectionRejected,
    SemanticDirection,
    load_direction_cache,
    mask_swap,
    raw_direction,
    rescale_direction,
    save_direction_cache,
)
from .pipeline import ModelBundle, group_checksum

PROB_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


class FrozenParameterViolation(RuntimeError):
    pass


# -- losses -------------------------------------------------------------------

def perceptual_loss(f_restored: torch.Tensor, f_original: torch.Tensor) -> torch.Tensor:
    """Sum of squared elementwise differences."""
    if f_restored.shape != f_original.shape:
        raise ValueError(f"shape mismatch: {tuple(f_restored.shape)} vs {tuple(f_original.shape)}")
    return ((f_restored - f_original) ** 2).sum()


def classification_loss(pred: torch.Tensor, label: torch.Tensor,
                        clamp: float = PROB_CLAMP) -> torch.Tensor:
    """Summed binary cross-entropy against an attribute label vector."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(label.shape)}")
    p = pred.clamp(clamp, 1.0 - clamp)
    return -(label * p.log() + (1.0 - label) * (1.0 - p).log()).sum()


# -- metric log ----------------------------------------------------------------

class MetricLog:
    """Append-only line-delimited JSON records."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- batching helpers -----------------------------------------------------------

def _noise_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                 alpha_bar: np.ndarray) -> torch.Tensor:
    a = torch.from_numpy(alpha_bar[t.numpy()].astype(np.float32))[:, None, None, None]
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def _check_finite(loss: torch.Tensor, step: int, stage: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage} loss became {loss.item()} at step {step}")


# -- stage 0: self-reconstruction pretraining ------------------------------------

def pretrain_autoencoder(bundle: ModelBundle, manifest: DatasetManifest, store: ImageStore,
                         log: MetricLog, steps: int | None = None) -> list[tuple[int, float]]:
    """Train denoiser + encoder backbone on the plain noise-prediction objective
    with modulation bypassed.  Returns the fixed-probe loss history."""
    cfg = bundle.config.training
    steps = cfg["stage0_steps"] if steps is None else steps
    T = bundle.schedule.T
    params = [p for m in bundle.stage0_modules().values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg["learning_rates"]["stage0"])
    rng = np.random.default_rng(bundle.config.seed + 1)
    torch.manual_seed(bundle.config.seed + 1)
    train_idx = np.asarray(manifest.train_indices)

    probe_idx = rng.choice(train_idx, size=min(cfg["probe_size"], len(train_idx)), replace=False)
    probe_x = store.batch(probe_idx)
    probe_t = torch.from_numpy(rng.integers(1, T + 1, size=len(probe_idx)))
    probe_eps = torch.randn(probe_x.shape)

    def probe_loss() -> float:
        with torch.no_grad():
            x_t = _noise_batch(probe_x, probe_t, probe_eps, bundle.schedule.alpha_bar)
            c = bundle.encoder.encode_bypass(probe_x)
            pred = bundle.denoiser(x_t, probe_t, c)
            return ((pred - probe_eps) ** 2).mean().item()

    history = [(0, probe_loss())]
    t_start = time.time()
    for step in range(1, steps + 1):
        idx = rng.choice(train_idx, size=min(cfg["batch_size"], len(train_idx)), replace=False)
        x0 = store.batch(idx)
        t = torch.from_numpy(rng.integers(1, T + 1, size=len(idx)))
        eps = torch.randn(x0.shape)
        x_t = _noise_batch(x0, t, eps, bundle.schedule.alpha_bar)
        c = bundle.encoder.encode_bypass(x0)
        loss = ((bundle.denoiser(x_t, t, c) - eps) ** 2).mean()
        _check_finite(loss, step, "stage0")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg["grad_clip"])
        opt.step()
        if step % cfg["probe_every"] == 0 or step == steps:
            history.append((step, probe_loss()))
            rate = step * cfg["batch_size"] / (time.time() - t_start)
            log.append(stage="stage0", step=step, loss=float(loss.item()),
                       loss_probe=history[-1][1], lr=cfg["learning_rates"]["stage0"],
                       throughput=round(rate, 2))
    return history


# -- code classifier --------------------------------------------------------------

def pretrain_code_classifier(bundle: ModelBundle, manifest: DatasetManifest, store: ImageStore,
                             log: MetricLog, steps: int | None = None) -> list[str]:
    """Train the code classifier on frozen bypass codes; returns warnings."""
    cfg = bundle.config.training
    steps = cfg["classifier_steps"] if steps is None else steps
    warnings = []
    labels = manifest.labels_tensor(manifest.train_indices)
    for i, name in enumerate(bundle.catalog.slot_names()):
        count = float(labels[:, i].sum())
        if count == 0 or count == len(labels):
            warnings.append(f"degenerate labels: slot {name!r} has a single class")
    train_idx = np.asarray(manifest.train_indices)
    codes = []
    with torch.no_grad():
        for i in range(0, len(train_idx), 256):
            codes.append(bundle.encoder.encode_bypass(store.batch(train_idx[i:i + 256])))
    codes = torch.cat(codes)

    opt = torch.optim.Adam(bundle.code_classifier.parameters(), lr=cfg["learning_rates"]["classifier"])
    rng = np.random.default_rng(bundle.config.seed + 2)
    for step in range(1, steps + 1):
        sel = rng.integers(0, len(codes), size=min(cfg["batch_size"] * 4, len(codes)))
        pred = bundle.code_classifier(codes[sel])
        loss = classification_loss(pred, labels[sel]) / len(sel)
        _check_finite(loss, step, "classifier")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg["probe_every"] == 0 or step == steps:
            log.append(stage="classifier", step=step, loss=float(loss.item()),
                       lr=cfg["learning_rates"]["classifier"])
    return warnings


# -- global directions -------------------------------------------------------------

def precompute_directions(bundle: ModelBundle, manifest: DatasetManifest,
                          store: ImageStore) -> dict[tuple[str, str, str], SemanticDirection]:
    """Mean-difference direction for every ordered attribute pair of every tag."""
    cap = bundle.config.training["direction_sample_cap"]
    phi = bundle.phi()
    out = {}
    for tag in bundle.catalog.tag_names:
        attrs = bundle.catalog.attributes_of(tag)
        pools = {a: manifest.indices_with(tag, a, split="train")[:cap] for a in attrs}
        means = {}
        for a, idx in pools.items():
            if not idx:
                raise TrainingDiverged(f"no training images with ({tag}, {a})")
            total = None
            for i in range(0, len(idx), 128):
                feats = phi(store.batch(idx[i:i + 128])).sum(dim=0)
                total = feats if total is None else total + feats
            means[a] = total / len(idx)
        for j in attrs:
            for j2 in attrs:
                if j != j2:
                    out[(tag, j, j2)] = SemanticDirection(
                        values=means[j2] - means[j], kind="global",
                        tag=tag, from_attribute=j, to_attribute=j2)
    return out


# -- removal --------------------------------------------------------------------

def removal_step(x: torch.Tensor, donor: torch.Tensor, mask: torch.Tensor,
                 d_global: SemanticDirection, phi, tau: float) -> torch.Tensor:
    """Approximate removal: features of x shifted along the image-specific
    direction derived from a mask swap with the donor.  Raises
    DirectionRejected when the swap direction is unusable."""
    swapped = mask_swap(x, donor, mask)
    d_m = raw_direction(x, swapped, phi, tag=d_global.tag,
                        from_attribute=d_global.from_attribute,
                        to_attribute=d_global.to_attribute)
    d_t = rescale_direction(d_m, d_global, tau=tau)
    with torch.no_grad():
        return phi(x[None])[0] + d_t.values


# -- forward-backward consistency stage --------------------------------------------

@dataclass
class ConsistencyState:
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    directions: dict[tuple[str, str, str], SemanticDirection]
    frozen_checksum: str
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    skipped: int = 0

    def verify_frozen(self) -> None:
        now = group_checksum(self.bundle.frozen_modules())
        if now != self.frozen_checksum:
            raise FrozenParameterViolation(
                f"frozen parameter group changed at step {self.step}")


def prepare_consistency(bundle: ModelBundle,
                        directions: dict[tuple[str, str, str], SemanticDirection]) -> ConsistencyState:
    lrs = bundle.config.training["learning_rates"]
    for module in bundle.frozen_modules().values():
        module.requires_grad_(False)
    for module in bundle.style_modules().values():
        module.requires_grad_(True)
    opt = torch.optim.Adam([
        {"params": list(bundle.encoder.units.parameters()), "lr": lrs["modulation"]},
        {"params": list(bundle.extractor.parameters()), "lr": lrs["extractor"]},
        {"params": list(bundle.mapper.parameters()), "lr": lrs["mapper"]},
    ])
    return ConsistencyState(
        bundle=bundle, optimizer=opt, directions=directions,
        frozen_checksum=group_checksum(bundle.frozen_modules()),
        rng=np.random.default_rng(bundle.config.seed + 3))


@dataclass
class ConsistencyBatch:
    tag: str
    x: torch.Tensor              # (B, 3, H, W)
    labels: torch.Tensor         # (B, n_slots)
    attributes: list[str]        # current attribute of the tag, per sample
    f_removed: torch.Tensor      # (B, C, h, w) features after approximate removal
    f_target: torch.Tensor       # (B, C, h, w) original features (restoration target)
    z: torch.Tensor              # (B, noise_width) latent-path noise


def make_consistency_batch(state: ConsistencyState, manifest: DatasetManifest,
                           store: ImageStore, tag: str,
                           indices: np.ndarray | None = None,
                           rng: np.random.Generator | None = None) -> ConsistencyBatch | None:
    """Assemble one fixed-tag batch: swap with a donor of the opposite
    attribute, rescale the direction, shift the features.  Samples whose
    direction is rejected are skipped; returns None if all were."""
    bundle = state.bundle
    cfg = bundle.config.training
    rng = rng if rng is not None else state.rng
    if indices is None:
        pool = np.asarray(manifest.train_indices)
        indices = rng.choice(pool, size=min(cfg["batch_size"], len(pool)), replace=False)
    phi = bundle.phi()
    no_issd = bundle.config.ablation["no_issd"]
    tau = cfg["direction_tau"]

    xs, labels, attrs, f_removed, f_target = [], [], [], [], []
    for i in indices:
        row = manifest.rows[int(i)]
        attr = row.attribute(bundle.catalog, tag)
        other = bundle.catalog.other_attribute(tag, attr)
        if (tag, attr, other) not in state.directions:
            raise KeyError(f"no cached direction for ({tag}, {attr} -> {other})")
        donor_pool = manifest.indices_with(tag, other, split="train")
        if not donor_pool:
            raise TrainingDiverged(f"no donor images with ({tag}, {other})")
        donor_idx = int(donor_pool[rng.integers(0, len(donor_pool))])
        x = store.image(int(i))
        donor = store.image(donor_idx)
        mask = torch.clamp(store.mask(int(i), tag) + store.mask(donor_idx, tag), 0, 1)
        d_s = state.directions[(tag, attr, other)]
        f_x = phi(x[None])[0]
        if no_issd:
            f_rm = f_x + d_s.values
        else:
            try:
                f_rm = removal_step(x, donor, mask, d_s, phi, tau)
            except DirectionRejected:
                state.skipped += 1
                continue
        xs.append(x)
        labels.append(torch.from_numpy(row.labels))
        attrs.append(attr)
        f_removed.append(f_rm)
        f_target.append(f_x)
    if not xs:
        return None
    B = len(xs)
    z = torch.from_numpy(rng.standard_normal((B, bundle.config.widths["noise"])).astype(np.float32))
    return ConsistencyBatch(tag=tag, x=torch.stack(xs), labels=torch.stack(labels),
                            attributes=attrs, f_removed=torch.stack(f_removed),
                            f_target=torch.stack(f_target), z=z)


def _restore(bundle: ModelBundle, batch: ConsistencyBatch, s: torch.Tensor) -> torch.Tensor:
    """Apply the modulation unit group-by-attribute (parameter banks are indexed)."""
    out = torch.empty_like(batch.f_removed)
    for attr in set(batch.attributes):
        pos = [k for k, a in enumerate(batch.attributes) if a == attr]
        out[pos] = bundle.encoder.modulate(batch.f_removed[pos], s[pos], batch.tag, attr)
    return out


def _style_codes(bundle: ModelBundle, batch: ConsistencyBatch, path: str) -> torch.Tensor:
    if path == "reference":
        # the original image itself is the reference for its own attribute style
        return bundle.extractor(batch.x, batch.tag)
    s = torch.empty(len(batch.attributes), bundle.config.widths["style"])
    for attr in set(batch.attributes):
        pos = [k for k, a in enumerate(batch.attributes) if a == attr]
        s[pos] = bundle.mapper(batch.z[pos], batch.tag, attr)
    return s


def consistency_losses(state: ConsistencyState, batch: ConsistencyBatch,
                       path: str) -> dict[str, torch.Tensor]:
    """L_perc (reference path only; style detached) and L_cls, per-sample mean."""
    bundle = state.bundle
    ablation = bundle.config.ablation
    B = len(batch.attributes)
    s = _style_codes(bundle, batch, path)

    zero = torch.zeros(())
    loss_perc = zero
    if path == "reference" and not ablation["no_pl"]:
        restored_perc = _restore(bundle, batch, s.detach())
        loss_perc = perceptual_loss(restored_perc, batch.f_target) / B

    loss_cls = zero
    if not ablation["no_cl"]:
        restored = _restore(bundle, batch, s)
        c = bundle.encoder.finish(restored)
        pred = bundle.code_classifier(c)
        loss_cls = classification_loss(pred, batch.labels) / B

    return {"loss_perc": loss_perc, "loss_cls": loss_cls,
            "loss_full": loss_perc + loss_cls}


def consistency_step(state: ConsistencyState, batch: ConsistencyBatch) -> dict:
    """One optimizer update on {modulation units, extractor, mapper}; the style
    producer alternates per step so both train."""
    bundle = state.bundle
    path = "reference" if state.step % 2 == 0 else "latent"
    losses = consistency_losses(state, batch, path)
    _check_finite(losses["loss_full"], state.step, "consistency")
    if losses["loss_full"].grad_fn is not None:  # ablations can zero out a path
        state.optimizer.zero_grad()
        losses["loss_full"].backward()
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, bundle.config.training["grad_clip"])
        state.optimizer.step()
    state.step += 1
    state.verify_frozen()
    return {"step": state.step, "path": path,
            "loss_perc": float(losses["loss_perc"].item()),
            "loss_cls": float(losses["loss_cls"].item()),
            "loss_full": float(losses["loss_full"].item())}


def svlb_step(state: ConsistencyState, batch: ConsistencyBatch) -> dict:
    """Ablation: train the style modules with the plain reconstruction
    objective instead of the consistency losses (the failure-mode variant)."""
    bundle = state.bundle
    path = "reference" if state.step % 2 == 0 else "latent"
    s = _style_codes(bundle, batch, path)
    f = bundle.encoder.extract_features(batch.x)
    modulated = torch.empty_like(f)
    for attr in set(batch.attributes):
        pos = [k for k, a in enumerate(batch.attributes) if a == attr]
        modulated[pos] = bundle.encoder.modulate(f[pos], s[pos], batch.tag, attr)
    c = bundle.encoder.finish(modulated)
    T = bundle.schedule.T
    t = torch.from_numpy(state.rng.integers(1, T + 1, size=len(batch.attributes)))
    eps = torch.randn(batch.x.shape)
    x_t = _noise_batch(batch.x, t, eps, bundle.schedule.alpha_bar)
    loss = ((bundle.denoiser(x_t, t, c) - eps) ** 2).mean()
    _check_finite(loss, state.step, "svlb")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.verify_frozen()
    return {"step": state.step, "path": path, "loss_perc": 0.0,
            "loss_cls": 0.0, "loss_full": float(loss.item())}


def run_consistency_training(bundle: ModelBundle, manifest: DatasetManifest, store: ImageStore,
                             directions: dict, log: MetricLog,
                             steps: int | None = None,
                             resume_path: str | Path | None = None) -> tuple[ConsistencyState, list[tuple[int, float]]]:
    """Full consistency stage (or the SVLB ablation when configured).
    Returns the state and the fixed-probe L_full history."""
    cfg = bundle.config.training
    steps = cfg["fbcts_steps"] if steps is None else steps
    state = prepare_consistency(bundle, directions)
    torch.manual_seed(bundle.config.seed + 3)
    tags = bundle.catalog.tag_names
    svlb = bundle.config.ablation["svlb_only"]

    probe_rng = np.random.default_rng(bundle.config.seed + 4)
    probe_batches = [make_consistency_batch(state, manifest, store, tag, rng=probe_rng)
                     for tag in tags]
    probe_batches = [b for b in probe_batches if b is not None]

    def probe_loss() -> float:
        with torch.no_grad():
            vals = [consistency_losses(state, b, "reference")["loss_full"].item()
                    for b in probe_batches]
        return float(np.mean(vals))

    history = [(0, probe_loss())]
    if resume_path is not None and Path(resume_path).exists():
        history = _load_resume(state, resume_path)
    t_start = time.time()
    done = state.step
    for k in range(done, steps):
        tag = tags[k % len(tags)]
        batch = make_consistency_batch(state, manifest, store, tag)
        if batch is None:
            state.step += 1
            continue
        report = svlb_step(state, batch) if svlb else consistency_step(state, batch)
        if state.step % cfg["probe_every"] == 0 or state.step == steps:
            history.append((state.step, probe_loss()))
            rate = (state.step - done) * cfg["batch_size"] / max(time.time() - t_start, 1e-9)
            log.append(stage="svlb" if svlb else "consistency", tag=tag, **report,
                       loss_probe=history[-1][1],
                       lr=cfg["learning_rates"]["modulation"], throughput=round(rate, 2))
        if resume_path is not None and state.step % cfg["checkpoint_every"] == 0:
            _save_resume(state, history, resume_path)
    return state, history


def _save_resume(state: ConsistencyState, history: list, path: str | Path) -> None:
    torch.save({
        "step": state.step,
        "skipped": state.skipped,
        "history": history,
        "modules": {name: m.state_dict() for name, m in state.bundle.style_modules().items()},
        "optimizer": state.optimizer.state_dict(),
        "np_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }, path)


def _load_resume(state: ConsistencyState, path: str | Path) -> list:
    blob = torch.load(path, weights_only=False)
    for name, sd in blob["modules"].items():
        state.bundle.style_modules()[name].load_state_dict(sd)
    state.optimizer.load_state_dict(blob["optimizer"])
    state.step = blob["step"]
    state.skipped = blob["skipped"]
    state.rng.bit_generator.state = blob["np_rng"]
    torch.set_rng_state(blob["torch_rng"])
    state.frozen_checksum = group_checksum(state.bundle.frozen_modules())
    return blob["history"]


# -- orchestration ------------------------------------------------------------------

ARTIFACTS = {
    "stage0": "stage0.ckpt",
    "classifier": "classifier.ckpt",
    "directions": "directions.npz",
    "fbcts": "fbcts.ckpt",
    "resume": "fbcts_resume.pt",
    "metrics": "metrics.jsonl",
}

# config sections that stage-0 / classifier / direction artifacts depend on;
# ablation flags and consistency-stage step counts are deliberately excluded
# so variants can share them
_SHARED_SECTIONS = ("catalog", "resolution", "diffusion", "widths")


def artifact_paths(workdir: str | Path) -> dict[str, Path]:
    workdir = Path(workdir)
    return {k: workdir / v for k, v in ARTIFACTS.items()}


def shared_stages_compatible(cfg_a: dict, cfg_b: dict) -> bool:
    return all(cfg_a[k] == cfg_b[k] for k in _SHARED_SECTIONS) and cfg_a["seed"] == cfg_b["seed"]


def _load_stage_arrays(bundle: ModelBundle, path: Path, stage: str) -> None:
    ckpt = load_checkpoint(path)
    ckpt.require_stage(stage)
    if not shared_stages_compatible(ckpt.config, bundle.config.raw):
        raise TrainingDiverged(
            f"checkpoint {path} is incompatible with the current config "
            f"(catalog/resolution/diffusion/widths must match)")
    bundle.load_arrays(ckpt.arrays)


def _stage_arrays(bundle: ModelBundle, modules: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, module in modules.items():
        for key, tensor in module.state_dict().items():
            out[f"{name}.{key}"] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def train(config: RunConfig, workdir: str | Path | None = None,
          reuse_from: str | Path | None = None) -> dict[str, Path]:
    """Run stage 0, the code classifier, direction precomputation, and the
    consistency stage, checkpointing each.  Stages already present in the
    workdir are reused, which also makes interrupted runs resumable."""
    from .checkpoint import Checkpoint, save_checkpoint  # local to avoid shadowing

    workdir = Path(workdir or config.paths["workdir"] or ".")
    workdir.mkdir(parents=True, exist_ok=True)
    paths = artifact_paths(workdir)
    log = MetricLog(paths["metrics"])
    if config.paths["manifest"] is None:
        raise TrainingDiverged("config.paths.manifest is not set")
    manifest = ingest_external(config.paths["manifest"], config.catalog)
    store = ImageStore(manifest)

    if reuse_from is not None:
        _borrow_shared_artifacts(config, Path(reuse_from), workdir)

    bundle = ModelBundle.build(config)

    # stage 0: denoiser + encoder backbone
    if paths["stage0"].exists():
        _load_stage_arrays(bundle, paths["stage0"], "stage0")
    else:
        pretrain_autoencoder(bundle, manifest, store, log)
        save_checkpoint(paths["stage0"], Checkpoint(
            stage="stage0", config=config.raw,
            arrays=_stage_arrays(bundle, bundle.stage0_modules()), extra={}))

    # code classifier on frozen bypass codes
    if paths["classifier"].exists():
        _load_stage_arrays(bundle, paths["classifier"], "classifier")
    else:
        warnings = pretrain_code_classifier(bundle, manifest, store, log)
        for w in warnings:
            log.append(stage="classifier", warning=w)
        save_checkpoint(paths["classifier"], Checkpoint(
            stage="classifier", config=config.raw,
            arrays={**_stage_arrays(bundle, bundle.stage0_modules()),
                    **_stage_arrays(bundle, {"code_classifier": bundle.code_classifier})},
            extra={"warnings": warnings}))

    # global directions over the train split
    if paths["directions"].exists():
        directions = load_direction_cache(paths["directions"])
    else:
        directions = precompute_directions(bundle, manifest, store)
        save_direction_cache(paths["directions"], directions)

    # consistency stage (or its SVLB ablation)
    if not paths["fbcts"].exists():
        state, history = run_consistency_training(
            bundle, manifest, store, directions, log,
            resume_path=paths["resume"])
        bundle.save(paths["fbcts"], stage="fbcts",
                    extra={"steps": state.step, "skipped": state.skipped,
                           "probe_history": history})
        paths["resume"].unlink(missing_ok=True)
    return paths


def _borrow_shared_artifacts(config: RunConfig, source: Path, workdir: Path) -> None:
    """Copy stage0/classifier/direction artifacts from a compatible earlier run."""
    import shutil

    src = artifact_paths(source)
    dst = artifact_paths(workdir)
    for key in ("stage0", "classifier"):
        if dst[key].exists() or not src[key].exists():
            continue
        ckpt = load_checkpoint(src[key])
        if shared_stages_compatible(ckpt.config, config.raw):
            shutil.copyfile(src[key], dst[key])
    if not dst["directions"].exists() and src["directions"].exists() and dst["stage0"].exists():
        shutil.copyfile(src["directions"], dst["directions"])
