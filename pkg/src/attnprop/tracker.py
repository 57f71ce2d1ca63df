"""Per-sequence tracking session.

Frame pipeline: prepare the latent (encode, then DDIM-invert / noise /
keep clean), extract per-prompt query-key sets, build one propagation
kernel per object against every bank frame, propagate, optionally refine,
fuse by argmax, and feed the (refined) result back into the reference
bank at latent resolution.
"""

from __future__ import annotations

import hashlib
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from . import inversion
from .backends import PromptEmbedding, QueryKeySet
from .config import RunConfig
from .core import (
    HardMask,
    SoftMaskStack,
    argmax_fuse,
    downsample_mask,
    downsample_stack,
    normalize_stack,
    upsample_stack,
)
from .kernel import HeadWeights, ReferenceBank, build_kernel, propagate
from .refine import crf_refine, refine_object

BACKGROUND_KEY = "null"
FEATURE_KEY = "features"


@dataclass
class FrameFeatures:
    """Extraction payload stored per bank frame: one entry per distinct
    prompt, plus the object -> prompt-key mapping."""

    by_key: dict
    key_of: dict


def _seed_for(seed: int, video_id: str, *parts: int) -> np.random.Generator:
    digest = hashlib.sha256(video_id.encode()).digest()
    video_word = int.from_bytes(digest[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, video_word, *parts]))


class TrackingSession:
    """Owns the reference bank and per-object prompts for one video."""

    def __init__(self, backend, config: RunConfig, video_id: str = "video",
                 segmenter=None, prompt_provider=None, latent_cache=None):
        self.backend = backend
        self.config = config
        self.video_id = video_id
        self.segmenter = segmenter
        self.prompt_provider = prompt_provider
        self.latent_cache = latent_cache
        self.bank = ReferenceBank(recent_capacity=config.bank_size)
        self.object_count = 0
        self.prompt_table: dict[int, tuple[PromptEmbedding, HeadWeights]] = {}
        self.timings: dict[str, float] = defaultdict(float)
        self._schedule = inversion.NoiseSchedule()

    @contextmanager
    def _stage(self, name: str):
        start = time.perf_counter()
        yield
        self.timings[name] += time.perf_counter() - start

    # -- latent preparation -------------------------------------------------

    def prepare_latent(self, frame: np.ndarray, frame_index: int) -> inversion.LatentState:
        cfg = self.config
        with self._stage("encode"):
            clean = inversion.encode_frame(self.backend, frame)
        if cfg.noise_mode == "none" or cfg.tau == 0:
            return clean
        if cfg.noise_mode == "random":
            with self._stage("noise"):
                rng = _seed_for(cfg.seed, self.video_id, frame_index, 7)
                return inversion.random_noise_latent(clean, cfg.tau, rng, self._schedule)
        with self._stage("inversion"):
            tau = self._schedule.snap_timestep(cfg.tau, cfg.ddim_steps)
            if self.latent_cache is not None:
                cached = self.latent_cache.load(
                    self.backend.backbone_id, self.video_id, frame_index, tau)
                if cached is not None:
                    return cached
            latent = inversion.ddim_invert(
                self.backend, clean, self.backend.null_prompt(),
                cfg.tau, cfg.ddim_steps, self._schedule)
            if self.latent_cache is not None:
                self.latent_cache.store(
                    self.backend.backbone_id, self.video_id, frame_index, tau, latent)
            return latent

    # -- prompts --------------------------------------------------------------

    def _prompt_key(self, object_id: int) -> object:
        if object_id == 0 or self.config.prompt_mode == "null":
            return BACKGROUND_KEY
        return ("object", object_id)

    def _register_object(self, object_id: int, frame, frame_index, latent, binary):
        if object_id == 0 or self.config.prompt_mode == "null":
            entry = (self.backend.null_prompt(), HeadWeights.uniform(self.backend.head_ids))
        elif self.prompt_provider is None:
            entry = (self.backend.null_prompt(), HeadWeights.uniform(self.backend.head_ids))
        else:
            with self._stage("adaptation"):
                entry = self.prompt_provider(object_id, frame, frame_index, latent, binary)
        self.prompt_table[object_id] = entry

    # -- extraction -----------------------------------------------------------

    def _extract(self, latent) -> FrameFeatures:
        with self._stage("extraction"):
            if self.config.affinity == "cosine":
                feats = self.backend.extract_features(latent)
                key_of = {o: FEATURE_KEY for o in range(self.object_count + 1)}
                return FrameFeatures(by_key={FEATURE_KEY: feats}, key_of=key_of)
            by_key: dict = {}
            key_of: dict = {}
            for o in range(self.object_count + 1):
                key = self._prompt_key(o) if o in self.prompt_table else BACKGROUND_KEY
                key_of[o] = key
                if key not in by_key:
                    prompt, _ = self.prompt_table.get(
                        o, (self.backend.null_prompt(), None))
                    by_key[key] = self.backend.extract_qk(latent, prompt)
            return FrameFeatures(by_key=by_key, key_of=key_of)

    def _weights_for(self, key) -> HeadWeights:
        if isinstance(key, tuple) and key[0] == "object":
            entry = self.prompt_table.get(key[1])
            if entry is not None:
                return entry[1]
        return HeadWeights.uniform(self.backend.head_ids)

    # -- lifecycle --------------------------------------------------------------

    def start(self, frame: np.ndarray, mask: HardMask, frame_index: int = 0) -> None:
        self.object_count = mask.object_count
        latent = self.prepare_latent(frame, frame_index)
        for o in range(self.object_count + 1):
            present = o == 0 or mask.binary(o).any()
            if present:
                self._register_object(o, frame, frame_index, latent, mask.binary(o))
        features = self._extract(latent)
        stack = downsample_mask(mask, self.backend.geometry)
        self.bank.update(frame_index, features, stack)

    def advance(self, frame: np.ndarray, frame_index: int,
                inject: HardMask | None = None) -> HardMask:
        if len(self.bank) == 0:
            raise RuntimeError("session not started")
        cfg = self.config
        geometry = self.backend.geometry
        latent = self.prepare_latent(frame, frame_index)
        if inject is not None:
            for o in np.unique(inject.labels):
                o = int(o)
                if o > 0 and o not in self.prompt_table:
                    self._register_object(o, frame, frame_index, latent, inject.binary(o))
        features = self._extract(latent)

        refs = self.bank.entries()
        propagated_by_key: dict = {}
        channels = np.zeros(
            (self.object_count + 1, geometry.latent_height, geometry.latent_width),
            dtype=np.float32,
        )
        for o in range(self.object_count + 1):
            key = features.key_of[o]
            # Bank entries predating a late object lack its prompt; fall
            # back to the shared null-prompt kernel (the object's channel
            # in those stacks is zero anyway).
            if not all(key in e.features.by_key for e in refs):
                key = BACKGROUND_KEY
            if key not in propagated_by_key:
                target = features.by_key[key]
                weights = self._weights_for(key) if isinstance(target, QueryKeySet) else None
                with self._stage("kernel"):
                    kern = build_kernel(
                        target,
                        [(e.frame_index, e.features.by_key[key]) for e in refs],
                        weights, geometry, cfg.radius, cfg.top_k,
                        block_rows=cfg.block_rows,
                        temperature=cfg.cosine_temperature,
                    )
                with self._stage("propagation"):
                    propagated_by_key[key] = propagate(kern, self.bank)
            channels[o] = propagated_by_key[key].scores[o]
        stack = SoftMaskStack(channels)

        if inject is not None:
            stack = self._inject(stack, inject)

        fused, bank_stack = self._finalize(stack, frame, frame_index)
        self.bank.update(frame_index, features, bank_stack)
        return fused

    def _inject(self, stack: SoftMaskStack, inject: HardMask) -> SoftMaskStack:
        """Overlay ground truth for objects first annotated at this frame."""
        scores = stack.scores.copy()
        down = downsample_mask(inject, self.backend.geometry)
        for o in np.unique(inject.labels):
            o = int(o)
            if o == 0 or o > self.object_count:
                continue
            region = down.scores[o]
            if scores[o].max() > 0:
                continue  # already tracked; only new objects are injected
            scores *= (1.0 - region)[None]
            scores[o] = region
        return SoftMaskStack(scores)

    def _finalize(self, stack: SoftMaskStack, frame: np.ndarray,
                  frame_index: int) -> tuple[HardMask, SoftMaskStack]:
        cfg = self.config
        geometry = self.backend.geometry
        image_size = frame.shape[:2]
        with self._stage("upsample"):
            stack_img = upsample_stack(stack, image_size)

        if cfg.refinement == "segmenter" and self.segmenter is not None:
            with self._stage("refinement"):
                refined = stack_img.scores.copy()
                for o in range(1, self.object_count + 1):
                    rng = _seed_for(cfg.seed, self.video_id, frame_index, o)
                    refined[o] = refine_object(
                        stack_img.scores[o], frame, self.segmenter,
                        n=cfg.points_per_set, p=cfg.candidate_count, rng=rng,
                    )
                refined_stack = SoftMaskStack(refined)
            fused = argmax_fuse(refined_stack)
            bank_stack = normalize_stack(downsample_stack(refined_stack, geometry))
            return fused, bank_stack

        if cfg.refinement == "crf":
            fused = argmax_fuse(stack_img)
            with self._stage("refinement"):
                fused = crf_refine(fused, frame, kernel_size=cfg.crf_kernel_size,
                                   steps=cfg.crf_steps)
            bank_stack = downsample_mask(fused, geometry)
            return fused, bank_stack

        fused = argmax_fuse(stack_img)
        return fused, normalize_stack(stack)
