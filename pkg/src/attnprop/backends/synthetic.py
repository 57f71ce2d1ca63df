"""Deterministic differentiable backend for desk-scale testing.

Per head, queries and keys are the sum of three parts:

* a content lift of the latent colors, built so that the row softmax of
  Q K^T ranks sources by color proximity (exact match wins), which makes
  mask propagation track translated content;
* a smooth seed-derived positional field, so attention maps have spatial
  locality and radius masking is meaningful;
* a fixed linear image of the mean prompt token, Q = B + P @ pool(theta),
  keeping the whole map affine (hence exactly first-order) in the prompt.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from ..core import LatticeGeometry, _interp_matrix, _pool_matrix
from ..inversion import CLEAN, LatentState
from . import FeatureSet, PromptEmbedding, QueryKeySet

LAYER_NAME = "synthetic.attn"


def _smooth_fields(rng: np.random.Generator, count: int, h: int, w: int,
                   sigma: float = 1.5) -> np.ndarray:
    """(count, h*w) fields of unit-variance smoothed white noise."""
    fields = rng.standard_normal((count, h, w))
    for i in range(count):
        fields[i] = gaussian_filter(fields[i], sigma=sigma, mode="wrap")
        fields[i] /= max(fields[i].std(), 1e-12)
    return fields.reshape(count, h * w)


class SyntheticBackend:
    def __init__(self, seed: int, geometry: LatticeGeometry, head_count: int = 5,
                 head_dim: int = 8, token_count: int = 4, embed_dim: int = 16,
                 content_gain: float = 4.0, positional_gain: float = 0.25,
                 prompt_gain: float = 0.5, feature_dim: int = 12,
                 dtype: torch.dtype = torch.float32):
        if min(head_count, head_dim, token_count, embed_dim, feature_dim) <= 0:
            raise ValueError("dimensions must be positive")
        if head_dim < 4:
            raise ValueError("head_dim must be at least 4")
        self.seed = seed
        self.geometry = geometry
        self.head_dim = head_dim
        self.token_count = token_count
        self.embed_dim = embed_dim
        self.content_gain = content_gain
        self.positional_gain = positional_gain
        self.prompt_gain = prompt_gain
        self.dtype = dtype
        self.head_ids = tuple((LAYER_NAME, h) for h in range(head_count))

        n = geometry.location_count
        h, w = geometry.latent_height, geometry.latent_width
        channels = 3
        rng = np.random.default_rng(seed)

        def tensorize(arr):
            return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)

        # Content maps: one (head_dim - 1, 3) projection per head.
        self._content = tensorize(
            rng.standard_normal((head_count, head_dim - 1, channels)) / np.sqrt(channels)
        )
        # Positional base fields, smoothed over the lattice.
        self._pos_q = tensorize(
            positional_gain
            * _smooth_fields(rng, head_count * head_dim, h, w).reshape(head_count, head_dim, n)
        ).transpose(1, 2).contiguous()
        self._pos_k = tensorize(
            positional_gain
            * _smooth_fields(rng, head_count * head_dim, h, w).reshape(head_count, head_dim, n)
        ).transpose(1, 2).contiguous()
        # Prompt maps: fixed linear images of the pooled prompt token.
        scale = prompt_gain / np.sqrt(embed_dim)
        self._prompt_q = tensorize(
            rng.standard_normal((head_count, n * head_dim, embed_dim)) * scale
        )
        self._prompt_k = tensorize(
            rng.standard_normal((head_count, n * head_dim, embed_dim)) * scale
        )
        # Raw-feature head for the cosine baseline.
        self._feature_map = tensorize(
            rng.standard_normal((feature_dim, channels)) / np.sqrt(channels)
        )
        self._feature_pos = tensorize(
            positional_gain * _smooth_fields(rng, feature_dim, h, w).T
        )
        # Resolution conversion operators.
        self._pool_r = tensorize(_pool_matrix(geometry.image_height, h))
        self._pool_c = tensorize(_pool_matrix(geometry.image_width, w))
        self._up_r = tensorize(_interp_matrix(h, geometry.image_height))
        self._up_c = tensorize(_interp_matrix(w, geometry.image_width))

    # -- identity / bookkeeping -------------------------------------------

    @property
    def head_count(self) -> int:
        return len(self.head_ids)

    @property
    def backbone_id(self) -> str:
        g = self.geometry
        return (
            f"synthetic-s{self.seed}-{g.latent_height}x{g.latent_width}"
            f"-h{self.head_count}d{self.head_dim}"
            f"-c{self.content_gain:g}p{self.positional_gain:g}g{self.prompt_gain:g}"
        )

    # Reconstruction quality of encode/decode on smooth inputs (dB).
    reconstruction_psnr_floor = 30.0

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for t in (self._content, self._pos_q, self._pos_k, self._prompt_q,
                  self._prompt_k, self._feature_map, self._feature_pos):
            digest.update(t.detach().numpy().tobytes())
        return digest.hexdigest()

    def prompt_lipschitz(self) -> float:
        """Frobenius-to-Frobenius bound on dQ/dtheta (exact first order)."""
        total = 0.0
        for h in range(self.head_count):
            p = self._prompt_q[h].double()
            gram = p.T @ p
            total += float(torch.linalg.eigvalsh(gram)[-1])
        return float(np.sqrt(total) / np.sqrt(self.token_count))

    # -- prompts ------------------------------------------------------------

    def null_prompt(self) -> PromptEmbedding:
        return PromptEmbedding(torch.zeros(self.token_count, self.embed_dim, dtype=self.dtype))

    def text_prompt(self, text: str) -> PromptEmbedding:
        seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        tokens = rng.standard_normal((self.token_count, self.embed_dim)) * 0.1
        return PromptEmbedding(torch.from_numpy(tokens).to(self.dtype))

    # -- latents -------------------------------------------------------------

    def encode_frame(self, frame: np.ndarray) -> LatentState:
        """Area-average the frame onto the latent lattice (the test double's
        'autoencoder' is an exact resize)."""
        img = torch.from_numpy(np.ascontiguousarray(frame)).to(self.dtype)
        latent = torch.einsum("ai,ijc,bj->cab", self._pool_r, img, self._pool_c)
        return LatentState(latent, timestep=0, provenance=CLEAN)

    def decode_latent(self, latent: LatentState) -> np.ndarray:
        img = torch.einsum("ai,cij,bj->abc", self._up_r, latent.tensor, self._up_c)
        return img.detach().cpu().numpy()

    # -- extraction ------------------------------------------------------------

    def _flat_latent(self, latent: LatentState) -> torch.Tensor:
        c, h, w = latent.tensor.shape
        g = self.geometry
        if (h, w) != (g.latent_height, g.latent_width):
            raise ValueError(f"latent {(h, w)} does not match geometry "
                             f"({g.latent_height}, {g.latent_width})")
        return latent.tensor.reshape(c, h * w).T.to(self.dtype)

    def extract_qk(self, latent: LatentState, prompt: PromptEmbedding) -> QueryKeySet:
        z = self._flat_latent(latent)
        pool = prompt.tokens.to(self.dtype).mean(dim=0)
        n = z.shape[0]
        ones = torch.ones(n, 1, dtype=self.dtype)
        queries, keys = [], []
        for h in range(self.head_count):
            zu = z @ self._content[h].T  # (N, d-1)
            q_content = self.content_gain * torch.cat([zu, ones], dim=1)
            k_content = self.content_gain * torch.cat(
                [2.0 * zu, -(zu * zu).sum(dim=1, keepdim=True)], dim=1
            )
            q = q_content + self._pos_q[h] + (self._prompt_q[h] @ pool).view(n, self.head_dim)
            k = k_content + self._pos_k[h] + (self._prompt_k[h] @ pool).view(n, self.head_dim)
            queries.append(q)
            keys.append(k)
        return QueryKeySet(self.head_ids, torch.stack(queries), torch.stack(keys))

    def extract_features(self, latent: LatentState) -> FeatureSet:
        z = self._flat_latent(latent)
        return FeatureSet(z @ self._feature_map.T + self._feature_pos)
