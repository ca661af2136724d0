"""Deterministic conditional-DDIM core: schedule, forward noising, stepping.

The generative step and its reverse depend only on the alpha values of the
current and next timestep, so the same formulas drive both full-resolution
stepping and strided substep sequences.  All stepping math runs in float32;
the schedule itself is kept in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch


class DiffusionError(ValueError):
    pass


class Denoiser(Protocol):
    """Noise predictor: (x_t values, t, conditioning code) -> same-shape tensor."""

    def __call__(self, x: torch.Tensor, t: int, c: torch.Tensor | None) -> torch.Tensor: ...


@dataclass(frozen=True)
class LatentImage:
    """Image-shaped array tagged with its diffusion step (0 = clean, T = noise)."""

    values: torch.Tensor
    step: int

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise DiffusionError("latent image has non-finite values")
        if self.step < 0:
            raise DiffusionError(f"negative step {self.step}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta sequence and cumulative alpha products (alpha_bar[0] == 1)."""

    beta: np.ndarray       # (T,), beta[t-1] is the step-t noise level
    alpha_bar: np.ndarray  # (T+1,)

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DiffusionError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def substeps(self, n: int) -> list[int]:
        """Strided substep sequence 0 = s_0 < ... < s_n = T."""
        if not 1 <= n <= self.T:
            raise DiffusionError(f"substep count {n} outside [1, {self.T}]")
        pts = np.round(np.linspace(0, self.T, n + 1)).astype(int)
        return sorted(set(int(p) for p in pts))


def build_schedule(T: int, beta_spec: dict | Sequence[float] | float) -> NoiseSchedule:
    """Build a schedule from a descriptor.

    Descriptors: {"kind": "linear", "start": b0, "end": b1},
    {"kind": "constant", "value": b}, an explicit beta sequence, or a scalar.
    """
    if T < 1:
        raise DiffusionError(f"step count must be positive, got {T}")
    if isinstance(beta_spec, dict):
        kind = beta_spec.get("kind")
        if kind == "linear":
            beta = np.linspace(beta_spec["start"], beta_spec["end"], T, dtype=np.float64)
        elif kind == "constant":
            beta = np.full(T, float(beta_spec["value"]), dtype=np.float64)
        else:
            raise DiffusionError(f"unknown schedule kind {kind!r}")
    elif np.isscalar(beta_spec):
        beta = np.full(T, float(beta_spec), dtype=np.float64)
    else:
        beta = np.asarray(beta_spec, dtype=np.float64)
        if beta.shape != (T,):
            raise DiffusionError(f"beta sequence length {beta.shape} != ({T},)")
    if not ((beta > 0.0) & (beta < 1.0)).all():
        raise DiffusionError("every beta must lie in (0, 1)")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def noise_image(x0: LatentImage, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentImage:
    """Analytic forward marginal: x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps."""
    if x0.step != 0:
        raise DiffusionError(f"noise_image expects a step-0 image, got step {x0.step}")
    if eps.shape != x0.values.shape:
        raise DiffusionError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.values.shape)}")
    a = schedule.alpha(t)
    values = np.float32(np.sqrt(a)) * x0.values + np.float32(np.sqrt(1.0 - a)) * eps
    return LatentImage(values=values, step=t)


def _transport(x: torch.Tensor, a_cur: float, a_next: float, eps_hat: torch.Tensor) -> torch.Tensor:
    if a_cur <= 0.0:
        raise DiffusionError("alpha at the current step is zero")
    x0_pred = (x - np.float32(np.sqrt(1.0 - a_cur)) * eps_hat) / np.float32(np.sqrt(a_cur))
    return np.float32(np.sqrt(a_next)) * x0_pred + np.float32(np.sqrt(1.0 - a_next)) * eps_hat


def ddim_step(
    x: LatentImage,
    t: int,
    c: torch.Tensor | None,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    t_next: int | None = None,
) -> LatentImage:
    """One deterministic generative step t -> t_next (default t - 1)."""
    if x.step != t:
        raise DiffusionError(f"latent is at step {x.step}, not {t}")
    if t < 1:
        raise DiffusionError("generative step needs t >= 1")
    t_next = t - 1 if t_next is None else t_next
    if not 0 <= t_next < t:
        raise DiffusionError(f"t_next {t_next} must lie in [0, {t})")
    eps_hat = denoiser(x.values, t, c)
    values = _transport(x.values, schedule.alpha(t), schedule.alpha(t_next), eps_hat)
    return LatentImage(values=values, step=t_next)


def ddim_reverse_step(
    x: LatentImage,
    t: int,
    c: torch.Tensor | None,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    t_next: int | None = None,
) -> LatentImage:
    """One deterministic encoding step t -> t_next (default t + 1)."""
    if x.step != t:
        raise DiffusionError(f"latent is at step {x.step}, not {t}")
    if t >= schedule.T:
        raise DiffusionError(f"reverse step needs t < {schedule.T}")
    t_next = t + 1 if t_next is None else t_next
    if not t < t_next <= schedule.T:
        raise DiffusionError(f"t_next {t_next} must lie in ({t}, {schedule.T}]")
    eps_hat = denoiser(x.values, t, c)
    values = _transport(x.values, schedule.alpha(t), schedule.alpha(t_next), eps_hat)
    return LatentImage(values=values, step=t_next)


def encode(
    x: torch.Tensor | LatentImage,
    c: torch.Tensor | None,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    substeps: Sequence[int] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> LatentImage:
    """Run the reverse process from a clean image up to the terminal latent."""
    if isinstance(x, LatentImage):
        if x.step != 0:
            raise DiffusionError(f"encode expects a step-0 image, got step {x.step}")
        cur = x
    else:
        cur = LatentImage(values=x, step=0)
    steps = list(substeps) if substeps is not None else list(range(schedule.T + 1))
    _check_substeps(steps, schedule)
    with torch.no_grad():
        for k in range(len(steps) - 1):
            cur = ddim_reverse_step(cur, steps[k], c, schedule, denoiser, t_next=steps[k + 1])
            if progress is not None:
                progress(k + 1, len(steps) - 1)
    return cur


def decode(
    xT: LatentImage,
    c: torch.Tensor | None,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    substeps: Sequence[int] | None = None,
    clamp: bool = True,
    progress: Callable[[int, int], None] | None = None,
) -> torch.Tensor:
    """Run the generative process from the terminal latent down to an image."""
    steps = list(substeps) if substeps is not None else list(range(schedule.T + 1))
    _check_substeps(steps, schedule)
    if xT.step != steps[-1]:
        raise DiffusionError(f"latent is at step {xT.step}, decode starts at {steps[-1]}")
    cur = xT
    with torch.no_grad():
        for k in range(len(steps) - 1, 0, -1):
            cur = ddim_step(cur, steps[k], c, schedule, denoiser, t_next=steps[k - 1])
            if progress is not None:
                progress(len(steps) - k, len(steps) - 1)
    values = cur.values
    return values.clamp(-1.0, 1.0) if clamp else values


def _check_substeps(steps: Sequence[int], schedule: NoiseSchedule) -> None:
    if len(steps) < 1 or steps[0] != 0:
        raise DiffusionError("substep sequence must start at 0")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise DiffusionError("substep sequence must be strictly increasing")
    if steps[-1] > schedule.T:
        raise DiffusionError(f"substep {steps[-1]} exceeds T={schedule.T}")
