"""Shared domain types and mask algebra.

Everything in this module is pure numpy and side-effect free: hard label
grids, per-object soft score stacks, the latent lattice geometry, and the
exact resolution conversions between them. All soft grids are float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class EmptyChannelError(ValueError):
    """Raised when a soft channel with no mass is normalized."""


@dataclass(frozen=True)
class LatticeGeometry:
    """Latent lattice of a backend plus the image resolution it serves.

    Locations are indexed row-major: ``i = row * latent_width + col``.
    """

    latent_height: int
    latent_width: int
    image_height: int
    image_width: int

    def __post_init__(self):
        for name in ("latent_height", "latent_width", "image_height", "image_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def location_count(self) -> int:
        return self.latent_height * self.latent_width

    @property
    def scale_y(self) -> float:
        return self.image_height / self.latent_height

    @property
    def scale_x(self) -> float:
        return self.image_width / self.latent_width

    def lattice_coords(self) -> np.ndarray:
        """(N, 2) array of (row, col) lattice coordinates in index order."""
        rows, cols = np.meshgrid(
            np.arange(self.latent_height), np.arange(self.latent_width), indexing="ij"
        )
        return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True)
class HardMask:
    """Integer label grid; 0 is background, 1..object_count are instances."""

    labels: np.ndarray  # (H, W) integer
    object_count: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D grid")
        if self.labels.size and self.labels.max() > self.object_count:
            raise ValueError("label exceeds declared object_count")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative label")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def binary(self, object_id: int) -> np.ndarray:
        return self.labels == object_id


@dataclass(frozen=True)
class SoftMaskStack:
    """Per-object nonnegative score grids; channel 0 is background."""

    scores: np.ndarray  # (object_count + 1, h, w) float32

    def __post_init__(self):
        if self.scores.ndim != 3:
            raise ValueError("scores must be (channels, h, w)")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite score")
        if self.scores.size and self.scores.min() < 0:
            raise ValueError("negative score")

    @property
    def object_count(self) -> int:
        return self.scores.shape[0] - 1

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.scores.shape[1:]

    def channel(self, object_id: int) -> np.ndarray:
        return self.scores[object_id]


@dataclass
class VideoSequence:
    """Ordered RGB frames sharing one resolution, values in [0, 1]."""

    frames: list[np.ndarray]
    identifier: str = "video"

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a video needs at least one frame")
        shape = self.frames[0].shape
        for f in self.frames:
            if f.shape != shape or f.ndim != 3 or f.shape[2] != 3:
                raise ValueError("all frames must be (H, W, 3) with one shared size")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


# ---------------------------------------------------------------------------
# Resolution conversion
# ---------------------------------------------------------------------------


def _pool_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix of exact interval-overlap fractions.

    Cell ``a`` of the destination axis covers [a*src/dst, (a+1)*src/dst) in
    source pixel units; entry (a, i) is the covered fraction of that cell
    lying inside source pixel i. Rows sum to 1 exactly.
    """
    step = src / dst
    mat = np.zeros((dst, src), dtype=np.float64)
    for a in range(dst):
        lo, hi = a * step, (a + 1) * step
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, src)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                mat[a, i] = overlap / step
    return mat


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) separable bilinear interpolation weights.

    Pixel-center convention (align_corners=False): destination center a
    maps to source coordinate (a + 0.5) * src/dst - 0.5, clamped.
    """
    mat = np.zeros((dst, src), dtype=np.float64)
    for a in range(dst):
        s = (a + 0.5) * src / dst - 0.5
        s = min(max(s, 0.0), src - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, src - 1)
        frac = s - lo
        mat[a, lo] += 1.0 - frac
        mat[a, hi] += frac
    return mat


def downsample_mask(mask: HardMask, geometry: LatticeGeometry) -> SoftMaskStack:
    """Move a hard mask to latent resolution by exact area-fraction pooling.

    Channel o of the result holds the fraction of each latent cell covered
    by label o, so per-cell channel sums are exactly 1.
    """
    h_img, w_img = mask.shape
    if (h_img, w_img) != (geometry.image_height, geometry.image_width):
        raise ValueError(
            f"mask {mask.shape} does not match geometry image size "
            f"({geometry.image_height}, {geometry.image_width})"
        )
    rows = _pool_matrix(h_img, geometry.latent_height)
    cols = _pool_matrix(w_img, geometry.latent_width)
    channels = mask.object_count + 1
    out = np.empty((channels, geometry.latent_height, geometry.latent_width), dtype=np.float64)
    for o in range(channels):
        onehot = (mask.labels == o).astype(np.float64)
        out[o] = rows @ onehot @ cols.T
    return SoftMaskStack(out.astype(np.float32))


def downsample_stack(stack: SoftMaskStack, geometry: LatticeGeometry) -> SoftMaskStack:
    """Area-average each channel of an image-resolution stack onto the lattice."""
    h_img, w_img = stack.grid_shape
    rows = _pool_matrix(h_img, geometry.latent_height)
    cols = _pool_matrix(w_img, geometry.latent_width)
    out = np.stack([rows @ ch.astype(np.float64) @ cols.T for ch in stack.scores])
    return SoftMaskStack(out.astype(np.float32))


def upsample_stack(stack: SoftMaskStack, target: tuple[int, int]) -> SoftMaskStack:
    """Bilinearly interpolate every channel to the target (H, W)."""
    h_dst, w_dst = target
    h_src, w_src = stack.grid_shape
    rows = _interp_matrix(h_src, h_dst)
    cols = _interp_matrix(w_src, w_dst)
    out = np.stack([rows @ ch.astype(np.float64) @ cols.T for ch in stack.scores])
    return SoftMaskStack(np.clip(out, 0.0, None).astype(np.float32))


def argmax_fuse(stack: SoftMaskStack) -> HardMask:
    """Fuse a stack into labels by per-pixel argmax; ties go to the lower
    index, so background wins exact ties."""
    if stack.scores.shape[0] == 0:
        raise ValueError("empty stack")
    labels = np.argmax(stack.scores, axis=0).astype(np.int32)
    return HardMask(labels, object_count=stack.object_count)


def normalize_to_distribution(channel: np.ndarray) -> np.ndarray:
    """Rescale a nonnegative grid to sum to 1.

    Raises EmptyChannelError when there is no mass at all; callers treat
    that as the empty-object condition and keep the previous mask.
    """
    total = float(channel.sum(dtype=np.float64))
    if total <= 0.0:
        raise EmptyChannelError("channel has no mass to normalize")
    return (channel.astype(np.float64) / total).astype(np.float64)


def normalize_stack(stack: SoftMaskStack, eps: float = 1e-8) -> SoftMaskStack:
    """Rescale channels so they sum to 1 at every pixel.

    Pixels with (numerically) no mass fall back to pure background.
    """
    sums = stack.scores.sum(axis=0, keepdims=True)
    out = stack.scores / np.maximum(sums, eps)
    empty = sums[0] <= eps
    if empty.any():
        out[:, empty] = 0.0
        out[0, empty] = 1.0
    return SoftMaskStack(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Indexed-palette PNG serialization (DAVIS convention)
# ---------------------------------------------------------------------------


def color_palette(count: int = 256) -> np.ndarray:
    """Standard VOC/DAVIS color palette as a (count, 3) uint8 array."""
    palette = np.zeros((count, 3), dtype=np.uint8)
    for i in range(count):
        cid, r, g, b = i, 0, 0, 0
        for shift in range(8):
            r |= ((cid >> 0) & 1) << (7 - shift)
            g |= ((cid >> 1) & 1) << (7 - shift)
            b |= ((cid >> 2) & 1) << (7 - shift)
            cid >>= 3
        palette[i] = (r, g, b)
    return palette


def save_mask_png(path, mask: HardMask) -> None:
    """Write a hard mask as a single-channel indexed-palette PNG."""
    img = Image.fromarray(mask.labels.astype(np.uint8), mode="P")
    img.putpalette(color_palette().ravel().tolist())
    img.save(path, format="PNG")


def load_mask_png(path, object_count: int | None = None) -> HardMask:
    """Read an indexed-palette PNG into a hard mask.

    Raises ValueError when the file is not palette-indexed.
    """
    img = Image.open(path)
    if img.mode != "P":
        raise ValueError(f"{path}: expected indexed-palette PNG, got mode {img.mode}")
    labels = np.array(img, dtype=np.int32)
    if object_count is None:
        object_count = int(labels.max())
    return HardMask(labels, object_count=object_count)
