"""Promptable mask refinement.

A propagated soft mask is treated as a spatial distribution: point
prompts are sampled from it, each prompt set is sent to a promptable
segmenter, the returned candidates are scored by soft IoU against the
unrefined soft mask, and the winner's logits (as sigmoid probabilities)
replace the channel. An edge-aware mean-field CRF offers a lightweight
alternative refinement path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import EmptyChannelError, HardMask, normalize_to_distribution

log = logging.getLogger(__name__)

SOFT_IOU_EPS = 1e-6


@dataclass(frozen=True)
class PointPromptSet:
    """p sets of n (x, y) image coordinates."""

    points: np.ndarray  # (p, n, 2) float
    seed: int | None = None

    def __post_init__(self):
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise ValueError("points must be (p, n, 2)")

    @property
    def set_count(self) -> int:
        return self.points.shape[0]

    @property
    def points_per_set(self) -> int:
        return self.points.shape[1]


@dataclass
class CandidateMask:
    mask: np.ndarray    # (H, W) bool
    logits: np.ndarray  # (H, W) float32
    score: float = 0.0


def sample_prompts(distribution: np.ndarray, image_size: tuple[int, int],
                   n: int, p: int, rng: np.random.Generator,
                   seed: int | None = None) -> PointPromptSet:
    """Draw p sets of n i.i.d. categorical points from a probability grid.

    Grid cells map to image coordinates at their centers; the grid may be
    at any resolution relative to the image.
    """
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    total = distribution.sum(dtype=np.float64)
    if not np.isclose(total, 1.0, atol=1e-6):
        raise ValueError("distribution must sum to 1")
    gh, gw = distribution.shape
    h_img, w_img = image_size
    flat = (distribution.astype(np.float64) / total).ravel()
    draws = rng.choice(flat.size, size=(p, n), p=flat)
    rows, cols = np.divmod(draws, gw)
    x = (cols + 0.5) * (w_img / gw)
    y = (rows + 0.5) * (h_img / gh)
    return PointPromptSet(np.stack([x, y], axis=-1), seed=seed)


def soft_iou(a: np.ndarray, b: np.ndarray, eps: float = SOFT_IOU_EPS) -> float:
    """Sum of elementwise minima over sum of elementwise maxima (+ eps)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return float(np.minimum(a, b).sum() / (np.maximum(a, b).sum() + eps))


def select_candidate(candidates: list[CandidateMask],
                     source: np.ndarray) -> CandidateMask:
    """Score candidates by soft IoU against the source soft mask and return
    the best; ties break toward the lowest index."""
    if not candidates:
        raise ValueError("no candidates")
    best = None
    for cand in candidates:
        cand.score = soft_iou(source, cand.mask.astype(np.float64))
        if best is None or cand.score > best.score:
            best = cand
    return best


class OracleSegmenter:
    """Test double: returns the labeled component containing the first
    prompt point of each set, with saturated logits."""

    def __init__(self, label_map: np.ndarray, logit_magnitude: float = 8.0):
        self.label_map = label_map.astype(np.int32)
        self.logit_magnitude = logit_magnitude

    def predict(self, frame: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, y = points[0]
        col = int(np.clip(np.floor(x), 0, self.label_map.shape[1] - 1))
        row = int(np.clip(np.floor(y), 0, self.label_map.shape[0] - 1))
        label = self.label_map[row, col]
        if label == 0:
            mask = np.zeros_like(self.label_map, dtype=bool)
        else:
            components, _ = ndimage.label(self.label_map == label)
            mask = components == components[row, col]
        logits = np.where(mask, self.logit_magnitude, -self.logit_magnitude)
        return mask, logits.astype(np.float32)


class SamSegmenter:
    """Adapter over a promptable segmentation checkpoint (lazy import)."""

    def __init__(self, checkpoint_path: str, model_type: str = "vit_h",
                 device: str = "cuda"):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise RuntimeError(
                "segmenter refinement needs the 'segment_anything' package "
                "(pip install attnprop[sam]) plus a checkpoint"
            ) from exc
        sam = sam_model_registry[model_type](checkpoint=checkpoint_path)
        sam.to(device=device)
        self._predictor = SamPredictor(sam)
        self._frame_key = None

    def predict(self, frame: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = id(frame)
        if key != self._frame_key:
            self._predictor.set_image((frame * 255).astype(np.uint8))
            self._frame_key = key
        masks, scores, logits = self._predictor.predict(
            point_coords=points.astype(np.float32),
            point_labels=np.ones(len(points), dtype=np.int32),
            multimask_output=True,
            return_logits=False,
        )
        best = int(np.argmax(scores))
        low_res = logits[best]
        import torch
        full = torch.nn.functional.interpolate(
            torch.from_numpy(low_res)[None, None],
            size=frame.shape[:2], mode="bilinear", align_corners=False,
        )[0, 0].numpy()
        return masks[best].astype(bool), full.astype(np.float32)


def refine_object(channel: np.ndarray, frame: np.ndarray, segmenter,
                  n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Refine one soft object channel at image resolution.

    Empty channels pass through untouched (the caller keeps its previous
    mask); segmenter failures also pass through, with a warning.
    """
    try:
        distribution = normalize_to_distribution(channel)
    except EmptyChannelError:
        return channel
    prompts = sample_prompts(distribution, frame.shape[:2], n=n, p=p, rng=rng)
    candidates = []
    try:
        for i in range(prompts.set_count):
            mask, logits = segmenter.predict(frame, prompts.points[i])
            candidates.append(CandidateMask(mask=mask, logits=logits))
        best = select_candidate(candidates, channel)
    except Exception:
        log.warning("segmenter failed; keeping unrefined channel", exc_info=True)
        return channel
    return (1.0 / (1.0 + np.exp(-best.logits.astype(np.float64)))).astype(np.float32)


def crf_refine(mask: HardMask, frame: np.ndarray, kernel_size: int = 5,
               steps: int = 30, appearance_sigma: float = 0.1,
               spatial_sigma: float = 2.0, label_confidence: float = 0.7,
               pairwise_strength: float = 2.0) -> HardMask:
    """Edge-aware mean-field smoothing of a hard mask over a k x k window.

    Pairwise potentials weight each neighbor by color proximity in the
    guide frame and spatial proximity in the window; unary potentials
    anchor the input labels. steps=0 returns the mask unchanged.
    """
    if mask.shape != frame.shape[:2]:
        raise ValueError("mask/frame resolution mismatch")
    if steps == 0:
        return mask
    h, w = mask.shape
    labels = mask.labels
    count = mask.object_count + 1
    eps = (1.0 - label_confidence) / max(count - 1, 1)
    unary = np.full((count, h, w), np.log(max(eps, 1e-12)), dtype=np.float64)
    for o in range(count):
        unary[o][labels == o] = np.log(label_confidence)

    half = kernel_size // 2
    offsets = [(dy, dx) for dy in range(-half, half + 1)
               for dx in range(-half, half + 1) if (dy, dx) != (0, 0)]
    guide = frame.astype(np.float64)
    q = np.exp(unary)
    q /= q.sum(axis=0, keepdims=True)
    # Pairwise weights depend only on the guide frame; precompute per offset.
    pair_weights = []
    for dy, dx in offsets:
        shifted = _shift(guide, dy, dx, spatial=False)
        color = np.exp(-((guide - shifted) ** 2).sum(axis=-1)
                       / (2.0 * appearance_sigma**2))
        space = np.exp(-(dy * dy + dx * dx) / (2.0 * spatial_sigma**2))
        pair_weights.append(color * space)

    for _ in range(steps):
        message = np.zeros_like(q)
        for (dy, dx), weight in zip(offsets, pair_weights):
            message += _shift(q, dy, dx) * weight[None]
        logits = unary + pairwise_strength * message / len(offsets)
        logits -= logits.max(axis=0, keepdims=True)
        q = np.exp(logits)
        q /= q.sum(axis=0, keepdims=True)
    return HardMask(np.argmax(q, axis=0).astype(np.int32), mask.object_count)


def _shift(arr: np.ndarray, dy: int, dx: int, spatial: bool = True) -> np.ndarray:
    """Shift a (..., H, W[, C]) array by (dy, dx), edge-replicated."""
    if spatial:
        pad = [(0, 0)] * (arr.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
        padded = np.pad(arr, pad, mode="edge")
        h, w = arr.shape[-2], arr.shape[-1]
        y0 = abs(dy) - dy
        x0 = abs(dx) - dx
        return padded[..., y0:y0 + h, x0:x0 + w]
    pad = [(abs(dy), abs(dy)), (abs(dx), abs(dx)), (0, 0)]
    padded = np.pad(arr, pad, mode="edge")
    h, w = arr.shape[0], arr.shape[1]
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return padded[y0:y0 + h, x0:x0 + w, :]
