"""Feature backends: per-layer, per-head query/key extraction for a frame
conditioned on a prompt embedding.

Two interchangeable implementations share one duck-typed surface:

* ``SyntheticBackend`` — deterministic, differentiable, desk-scale double;
* ``DiffusionBackend`` — adapter over a pretrained text-to-image diffusion
  model (optional heavy dependencies, loaded lazily).

A backend exposes: ``geometry``, ``head_ids``, ``head_dim``, ``dtype``,
``backbone_id``, ``null_prompt()``, ``text_prompt(s)``, ``encode_frame()``,
``decode_latent()``, ``extract_qk()``, ``extract_features()`` and
``parameter_checksum()``. Backends with a diffusion process additionally
implement ``predict_noise(x, t, prompt)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

HeadId = tuple[str, int]


@dataclass(frozen=True)
class PromptEmbedding:
    """Token-embedding matrix (token_count, embedding_dim) fed to a backend."""

    tokens: torch.Tensor
    learnable: bool = False

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError("prompt embedding must be (tokens, dim)")

    @property
    def parameter_count(self) -> int:
        return self.tokens.numel()


@dataclass(frozen=True)
class QueryKeySet:
    """Per-head query/key matrices over the latent lattice.

    ``queries`` and ``keys`` are (head_count, N, head_dim); ``head_ids``
    names each slice as (layer_path, head_index).
    """

    head_ids: tuple[HeadId, ...]
    queries: torch.Tensor
    keys: torch.Tensor

    def __post_init__(self):
        if self.queries.shape != self.keys.shape:
            raise ValueError("query/key shapes disagree")
        if self.queries.shape[0] != len(self.head_ids):
            raise ValueError("head_ids does not match tensor head count")

    @property
    def head_dim(self) -> int:
        return self.queries.shape[-1]

    @property
    def location_count(self) -> int:
        return self.queries.shape[1]


@dataclass(frozen=True)
class FeatureSet:
    """Raw per-location features (N, c) from a designated layer."""

    features: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.features).all():
            raise ValueError("non-finite features")


def make_backend(config) -> object:
    """Build a backend from a BackendConfig."""
    from ..core import LatticeGeometry

    if config.kind == "synthetic":
        from .synthetic import SyntheticBackend

        geometry = LatticeGeometry(
            latent_height=config.latent_height,
            latent_width=config.latent_width,
            image_height=config.image_height,
            image_width=config.image_width,
        )
        return SyntheticBackend(
            seed=config.seed,
            geometry=geometry,
            head_count=config.head_count,
            head_dim=config.head_dim,
            token_count=config.token_count,
            embed_dim=config.embed_dim,
            content_gain=config.content_gain,
            positional_gain=config.positional_gain,
            prompt_gain=config.prompt_gain,
        )
    if config.kind == "diffusion":
        from .diffusion import DiffusionBackend

        return DiffusionBackend(
            weights_path=config.weights_path,
            layer_paths=config.layer_paths,
            device=config.device,
            image_size=config.image_height,
        )
    raise ValueError(f"unknown backend kind: {config.kind!r}")
