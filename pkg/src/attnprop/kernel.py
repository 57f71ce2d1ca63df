"""Cross-frame propagation kernels.

A kernel row says how a target-frame lattice location aggregates mask
scores from the concatenated reference-frame locations: per-head scaled
dot-product softmax maps are mixed by head weights, constrained to a
spatial radius, sparsified to the top-k scores over the whole reference
context, and renormalized so every row is a probability vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backends import FeatureSet, HeadId, QueryKeySet
from .core import LatticeGeometry, SoftMaskStack


@dataclass
class HeadWeights:
    """Simplex weights over (layer, head) pairs, parameterized by logits."""

    head_ids: tuple[HeadId, ...]
    logits: torch.Tensor

    def __post_init__(self):
        if self.logits.ndim != 1 or self.logits.shape[0] != len(self.head_ids):
            raise ValueError("one logit per head required")

    @classmethod
    def uniform(cls, head_ids) -> "HeadWeights":
        ids = tuple(head_ids)
        return cls(ids, torch.zeros(len(ids), dtype=torch.float64))

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def simplex_error(self) -> float:
        w = self.weights
        off = float((w.sum() - 1.0).abs())
        bounds = float((-w).clamp(min=0).max()) + float((w - 1.0).clamp(min=0).max())
        return off + bounds


def head_affinity(queries: torch.Tensor, keys: torch.Tensor,
                  head_dim: int | None = None) -> torch.Tensor:
    """Row-stochastic attention map softmax(Q K^T / sqrt(d))."""
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("query/key head dims disagree")
    d = head_dim if head_dim is not None else queries.shape[-1]
    if d <= 0:
        raise ValueError("head dim must be positive")
    logits = queries @ keys.T / math.sqrt(d)
    return torch.softmax(logits, dim=-1)


def cosine_affinity(target: torch.Tensor, reference: torch.Tensor,
                    temperature: float = 0.07) -> torch.Tensor:
    """Row-stochastic softmax over temperature-scaled cosine similarities."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    for name, f in (("target", target), ("reference", reference)):
        norms = f.norm(dim=-1)
        if (norms == 0).any():
            raise ValueError(f"zero-norm {name} feature row")
    t = target / target.norm(dim=-1, keepdim=True)
    r = reference / reference.norm(dim=-1, keepdim=True)
    return torch.softmax(t @ r.T / temperature, dim=-1)


def aggregate_heads(affinities: torch.Tensor, weights: HeadWeights) -> torch.Tensor:
    """Convex combination of per-head affinity maps, (H, Nt, Ns) -> (Nt, Ns)."""
    if affinities.ndim != 3:
        raise ValueError("expected stacked per-head affinities (H, Nt, Ns)")
    if affinities.shape[0] != len(weights.head_ids):
        raise ValueError("weight/head count mismatch")
    w = weights.weights.to(affinities.dtype)
    return torch.einsum("h,hts->ts", w, affinities)


@dataclass
class PropagationKernel:
    """Sparse row-stochastic affinity from target locations to the
    concatenated reference locations.

    Per row, ``indices`` point into the flattened reference context
    (ref_position * N + location); padding entries carry index -1 and
    value 0. Rows sum to 1 over their retained entries.
    """

    indices: torch.Tensor  # (N, k) int64
    values: torch.Tensor   # (N, k) float32
    source_frames: tuple[int, ...]
    geometry: LatticeGeometry
    radius: float
    top_k: int

    def row_support(self) -> torch.Tensor:
        return (self.indices >= 0).sum(dim=1)


def _sparsify_block(block: torch.Tensor, row_d2: torch.Tensor, radius: float,
                    top_k: int, ref_count: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Radius-mask, top-k and renormalize a (B, ref_count * N) row block.

    row_d2 is (B, N): squared lattice distances from each block row's
    target location to every source location.
    """
    n = row_d2.shape[1]
    allowed = (row_d2 <= radius * radius).repeat(1, ref_count)
    masked = torch.where(allowed, block.double(), torch.tensor(float("-inf"), dtype=torch.float64))
    k_eff = min(top_k, n * ref_count)
    top_vals, top_idx = torch.topk(masked, k_eff, dim=1)
    valid = torch.isfinite(top_vals)
    top_vals = torch.where(valid, top_vals, torch.zeros_like(top_vals))

    sums = top_vals.sum(dim=1, keepdim=True)
    # Rows whose retained entries are all zero fall back to uniform over
    # the retained support; rows with nothing in radius keep the single
    # nearest source location.
    degenerate = (sums.squeeze(1) <= 0) & valid.any(dim=1)
    if degenerate.any():
        top_vals[degenerate] = valid[degenerate].double()
        sums = top_vals.sum(dim=1, keepdim=True)
    empty = ~valid.any(dim=1)
    if empty.any():
        nearest = row_d2[empty].argmin(dim=1)
        top_idx[empty] = -1
        top_vals[empty] = 0.0
        top_idx[empty, 0] = nearest
        top_vals[empty, 0] = 1.0
        valid[empty] = False
        valid[empty, 0] = True
        sums = top_vals.sum(dim=1, keepdim=True)

    values = top_vals / sums
    indices = torch.where(valid, top_idx, torch.full_like(top_idx, -1))
    values = torch.where(valid, values, torch.zeros_like(values))
    return indices, values.to(torch.float32)


def _block_distances(coords: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    block = coords[start:stop]
    diff = block[:, None, :] - coords[None, :, :]
    return (diff * diff).sum(dim=-1)


def sparsify(affinity: torch.Tensor, geometry: LatticeGeometry, radius: float,
             top_k: int, source_frames=(0,), block_rows: int = 512) -> PropagationKernel:
    """Sparsify dense affinity rows over a concatenated reference context."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    n = geometry.location_count
    if affinity.shape[0] != n or affinity.shape[1] % n != 0:
        raise ValueError("affinity shape does not match geometry")
    ref_count = affinity.shape[1] // n
    if ref_count != len(source_frames):
        raise ValueError("source_frames does not match affinity width")
    coords = torch.from_numpy(geometry.lattice_coords())
    idx_parts, val_parts = [], []
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        d2 = _block_distances(coords, start, stop)
        idx, val = _sparsify_block(affinity[start:stop], d2, radius, top_k, ref_count)
        idx_parts.append(idx)
        val_parts.append(val)
    return PropagationKernel(
        indices=torch.cat(idx_parts), values=torch.cat(val_parts),
        source_frames=tuple(source_frames), geometry=geometry,
        radius=radius, top_k=top_k,
    )


def build_kernel(target, references, weights: HeadWeights | None, geometry: LatticeGeometry,
                 radius: float, top_k: int, block_rows: int = 512,
                 temperature: float = 0.07) -> PropagationKernel:
    """Build the propagation kernel for one target frame.

    ``target`` is the target frame's QueryKeySet (attention affinity) or
    FeatureSet (cosine baseline); ``references`` is an ordered list of
    (frame_index, same-typed reference payload). Affinities are computed
    in row blocks and sparsified immediately to cap peak memory.
    """
    if not references:
        raise ValueError("no reference frames")
    if radius <= 0 or top_k < 1:
        raise ValueError("invalid radius/top_k")
    n = geometry.location_count
    coords = torch.from_numpy(geometry.lattice_coords())
    attention = isinstance(target, QueryKeySet)
    if attention and weights is None:
        raise ValueError("attention kernels need head weights")

    idx_parts, val_parts = [], []
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        cols = []
        for _, ref in references:
            if attention:
                per_head = torch.stack([
                    head_affinity(target.queries[h, start:stop], ref.keys[h])
                    for h in range(len(target.head_ids))
                ])
                cols.append(aggregate_heads(per_head, weights))
            else:
                cols.append(cosine_affinity(
                    target.features[start:stop], ref.features, temperature))
        block = torch.cat(cols, dim=1)
        d2 = _block_distances(coords, start, stop)
        idx, val = _sparsify_block(block, d2, radius, top_k, len(references))
        idx_parts.append(idx)
        val_parts.append(val)
    return PropagationKernel(
        indices=torch.cat(idx_parts), values=torch.cat(val_parts),
        source_frames=tuple(f for f, _ in references), geometry=geometry,
        radius=radius, top_k=top_k,
    )


@dataclass
class BankEntry:
    frame_index: int
    features: object  # QueryKeySet / FeatureSet / per-object mapping
    stack: SoftMaskStack


class ReferenceBank:
    """Bounded reference store: the initial frame plus the S most recent.

    The first inserted frame is pinned; later insertions must be strictly
    increasing, and the sliding window evicts the oldest non-initial entry.
    """

    def __init__(self, recent_capacity: int):
        if recent_capacity < 0:
            raise ValueError("recent_capacity must be >= 0")
        self.recent_capacity = recent_capacity
        self._anchor: BankEntry | None = None
        self._recent: list[BankEntry] = []

    def update(self, frame_index: int, features, stack: SoftMaskStack) -> None:
        entry = BankEntry(frame_index, features, stack)
        if self._anchor is None:
            self._anchor = entry
            return
        last = self._recent[-1].frame_index if self._recent else self._anchor.frame_index
        if frame_index <= last:
            raise ValueError(f"out-of-order insertion: {frame_index} after {last}")
        self._recent.append(entry)
        while len(self._recent) > self.recent_capacity:
            self._recent.pop(0)

    def frames(self) -> tuple[int, ...]:
        if self._anchor is None:
            return ()
        return (self._anchor.frame_index,) + tuple(e.frame_index for e in self._recent)

    def __len__(self) -> int:
        return len(self.frames())

    def entry(self, frame_index: int) -> BankEntry:
        if self._anchor is not None and self._anchor.frame_index == frame_index:
            return self._anchor
        for e in self._recent:
            if e.frame_index == frame_index:
                return e
        raise KeyError(frame_index)

    def entries(self) -> list[BankEntry]:
        return [self.entry(f) for f in self.frames()]


def propagate(kernel: PropagationKernel, bank: ReferenceBank) -> SoftMaskStack:
    """Apply the kernel to the bank's concatenated reference stacks."""
    if len(bank) == 0:
        raise ValueError("reference bank is empty")
    n = kernel.geometry.location_count
    flats = []
    for f in kernel.source_frames:
        stack = bank.entry(f).stack
        channels = stack.scores.shape[0]
        flats.append(torch.from_numpy(stack.scores.reshape(channels, n).T))
    refs = torch.cat(flats, dim=0)  # (ref_count * N, C)
    safe_idx = kernel.indices.clamp(min=0)
    gathered = refs[safe_idx]  # (N, k, C)
    out = (kernel.values[..., None].to(refs.dtype) * gathered).sum(dim=1)
    out = out.T.reshape(-1, kernel.geometry.latent_height, kernel.geometry.latent_width)
    return SoftMaskStack(out.clamp(0.0, 1.0).numpy().astype(np.float32))
