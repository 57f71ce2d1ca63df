"""Deterministic latent preparation for a target diffusion timestep.

A frame is encoded to a clean latent and then either perturbed with
model-predicted noise (deterministic inversion along the sampling
schedule), perturbed with random Gaussian noise at the schedule marginal,
or left clean. Backends without a noise predictor (the synthetic test
double) carry latents through unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

CLEAN = "clean"
DDIM_INVERSION = "ddim_inversion"
RANDOM_NOISE = "random_noise"

SCHEDULE_STEPS = 1000


@dataclass(frozen=True)
class LatentState:
    """A latent grid (c, h, w) at a diffusion timestep."""

    tensor: torch.Tensor
    timestep: int = 0
    provenance: str = CLEAN

    def __post_init__(self):
        if not (0 <= self.timestep < SCHEDULE_STEPS):
            raise ValueError(f"timestep {self.timestep} outside [0, {SCHEDULE_STEPS})")
        if not torch.isfinite(self.tensor).all():
            raise ValueError("non-finite latent")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.tensor.shape[-2:])


class NoiseSchedule:
    """Scaled-linear beta schedule (the SD convention) over 1000 steps."""

    def __init__(self, steps: int = SCHEDULE_STEPS, beta_start: float = 0.00085,
                 beta_end: float = 0.012):
        betas = np.linspace(beta_start**0.5, beta_end**0.5, steps, dtype=np.float64) ** 2
        self.steps = steps
        self.alphas_cumprod = np.cumprod(1.0 - betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; t == -1 means clean."""
        if t < 0:
            return 1.0
        return float(self.alphas_cumprod[t])

    def sub_schedule(self, step_count: int) -> np.ndarray:
        """Ascending uniform-stride sub-schedule (stride = steps/step_count,
        offset 1): [1, 1 + stride, ...]."""
        if not (1 <= step_count <= self.steps):
            raise ValueError("step_count outside schedule")
        stride = self.steps // step_count
        return np.arange(step_count) * stride + 1

    def snap_timestep(self, tau: int, step_count: int) -> int:
        """Nearest sub-schedule step at or above tau."""
        sub = self.sub_schedule(step_count)
        at_or_above = sub[sub >= tau]
        if at_or_above.size == 0:
            raise ValueError(f"timestep {tau} not reachable with {step_count} steps")
        return int(at_or_above[0])


def encode_frame(backend, frame: np.ndarray) -> LatentState:
    """Encode an RGB frame ([0,1], backend resolution) to a clean latent."""
    h, w = frame.shape[:2]
    geom = backend.geometry
    if (h, w) != (geom.image_height, geom.image_width):
        raise ValueError(
            f"frame {(h, w)} does not match backend resolution "
            f"({geom.image_height}, {geom.image_width})"
        )
    return backend.encode_frame(frame)


def _ddim_step(x, eps, a_from: float, a_to: float):
    # x_to = sqrt(a_to) * x0_pred + sqrt(1 - a_to) * eps
    x0 = (x - (1.0 - a_from) ** 0.5 * eps) / a_from**0.5
    return a_to**0.5 * x0 + (1.0 - a_to) ** 0.5 * eps


def ddim_invert(backend, clean: LatentState, prompt, tau_target: int,
                step_count: int = 50, schedule: NoiseSchedule | None = None) -> LatentState:
    """Walk the clean latent up the discretized schedule to tau_target using
    model-predicted noise. Deterministic; no sampling noise is drawn.

    Backends without predict_noise (test doubles) pass the latent through
    unchanged apart from the timestep tag.
    """
    if clean.provenance != CLEAN:
        raise ValueError("ddim_invert expects a clean latent")
    if tau_target == 0:
        return replace(clean, provenance=DDIM_INVERSION)
    schedule = schedule or NoiseSchedule()
    tau = schedule.snap_timestep(tau_target, step_count)
    if not hasattr(backend, "predict_noise"):
        return LatentState(clean.tensor, timestep=tau, provenance=DDIM_INVERSION)

    sub = schedule.sub_schedule(step_count)
    path = [int(t) for t in sub if t <= tau]
    x = clean.tensor
    prev = -1  # clean state, alpha_bar == 1
    for t in path:
        eps = backend.predict_noise(x, t, prompt)
        x = _ddim_step(x, eps, schedule.alpha_bar(prev), schedule.alpha_bar(t))
        prev = t
    return LatentState(x, timestep=tau, provenance=DDIM_INVERSION)


def ddim_sample(backend, noisy: LatentState, prompt, step_count: int = 50,
                schedule: NoiseSchedule | None = None) -> LatentState:
    """Deterministically denoise back to a clean latent (round-trip check)."""
    schedule = schedule or NoiseSchedule()
    if not hasattr(backend, "predict_noise"):
        return LatentState(noisy.tensor, timestep=0, provenance=CLEAN)
    sub = schedule.sub_schedule(step_count)
    path = [int(t) for t in sub if t <= noisy.timestep]
    x = noisy.tensor
    for i in range(len(path) - 1, -1, -1):
        t = path[i]
        dest = path[i - 1] if i > 0 else -1
        eps = backend.predict_noise(x, t, prompt)
        x = _ddim_step(x, eps, schedule.alpha_bar(t), schedule.alpha_bar(dest))
    return LatentState(x, timestep=0, provenance=CLEAN)


def random_noise_latent(clean: LatentState, tau_target: int, rng: np.random.Generator,
                        schedule: NoiseSchedule | None = None) -> LatentState:
    """Forward-diffusion perturbation at tau with white noise (ablation arm)."""
    if tau_target == 0:
        return replace(clean, provenance=RANDOM_NOISE)
    schedule = schedule or NoiseSchedule()
    a = schedule.alpha_bar(tau_target)
    eps = torch.from_numpy(
        rng.standard_normal(tuple(clean.tensor.shape))
    ).to(clean.tensor.dtype)
    x = a**0.5 * clean.tensor + (1.0 - a) ** 0.5 * eps
    return LatentState(x, timestep=tau_target, provenance=RANDOM_NOISE)


class LatentCache:
    """Disk cache of prepared latents keyed by (backbone, video, frame, tau).

    Blobs are .npy files, whose header already records shape and dtype.
    """

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, backbone_id: str, video_id: str, frame_index: int, tau: int) -> Path:
        safe = hashlib.sha1(backbone_id.encode()).hexdigest()[:12]
        return self.root / safe / video_id / f"{frame_index:05d}_tau{tau:04d}.npy"

    def load(self, backbone_id, video_id, frame_index, tau) -> LatentState | None:
        path = self._path(backbone_id, video_id, frame_index, tau)
        if not path.exists():
            return None
        arr = np.load(path)
        return LatentState(torch.from_numpy(arr), timestep=tau, provenance=DDIM_INVERSION)

    def store(self, backbone_id, video_id, frame_index, tau, latent: LatentState) -> None:
        path = self._path(backbone_id, video_id, frame_index, tau)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, latent.tensor.detach().cpu().numpy())
