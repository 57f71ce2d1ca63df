"""Test-time optimization of mask-specific prompt embeddings and head
weights.

The loss propagates the anchor-frame mask through the anchor frame's own
full-row attention kernel (no radius mask or top-k: hard sparsification is
not differentiable) and scores the reconstruction with binary
cross-entropy. Prompt tokens and head-weight logits are optimized jointly
with Adam; the backbone never changes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backends import PromptEmbedding
from .inversion import LatentState
from .kernel import HeadWeights

BCE_EPS = 1e-6


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; the trace so far is attached."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    step_count: int = 3500

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.step_count < 0:
            raise ValueError("step count must be nonnegative")


@dataclass
class AdaptedPrompt:
    """Optimized prompt + head weights for one object instance."""

    object_id: int
    prompt: PromptEmbedding
    head_weights: HeadWeights
    loss_trace: list[float] = field(default_factory=list)
    simplex_trace: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0] if self.loss_trace else math.nan

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else math.nan

    @property
    def parameter_count(self) -> int:
        return self.prompt.parameter_count + self.head_weights.logits.numel()


def _full_row_kernel(backend, latent: LatentState, theta: torch.Tensor,
                     head_logits: torch.Tensor) -> torch.Tensor:
    qk = backend.extract_qk(latent, PromptEmbedding(theta, learnable=True))
    scale = 1.0 / math.sqrt(qk.head_dim)
    weights = torch.softmax(head_logits, dim=0).to(qk.queries.dtype)
    rows = None
    for h in range(len(qk.head_ids)):
        a = torch.softmax(qk.queries[h] @ qk.keys[h].T * scale, dim=-1)
        rows = weights[h] * a if rows is None else rows + weights[h] * a
    return rows


def self_propagation_loss(backend, latent: LatentState, theta: torch.Tensor,
                          head_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean BCE between the self-propagated target and the target itself.

    ``target`` holds one or more mask channels over the lattice, shaped
    (channels, N) or (channels, h, w), values in [0, 1].
    """
    if target.ndim == 3:
        target = target.reshape(target.shape[0], -1)
    if target.min() < 0 or target.max() > 1:
        raise ValueError("target channels must lie in [0, 1]")
    kernel_rows = _full_row_kernel(backend, latent, theta, head_logits)
    target = target.to(kernel_rows.dtype)
    predicted = target @ kernel_rows.T  # M_hat[i] = sum_j A[i, j] M[j]
    p = predicted.clamp(BCE_EPS, 1.0 - BCE_EPS)
    loss = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite self-propagation loss", trace=[])
    return loss


def optimize_instance(backend, latent: LatentState, target: torch.Tensor,
                      object_id: int, config: OptimizerConfig) -> AdaptedPrompt:
    """Jointly optimize the prompt embedding and head-weight logits.

    Starts from the null prompt and uniform weights; records the loss and
    the simplex deviation after every step. A zero-step config returns the
    initialization (its loss is still evaluated once for the trace).
    """
    theta = backend.null_prompt().tokens.clone().detach().requires_grad_(True)
    head_logits = torch.zeros(backend.head_count, dtype=backend.dtype, requires_grad=True)
    optimizer = torch.optim.Adam([theta, head_logits], lr=config.learning_rate)

    loss_trace: list[float] = []
    simplex_trace: list[float] = []

    def record_simplex():
        w = torch.softmax(head_logits.detach(), dim=0)
        simplex_trace.append(float((w.sum() - 1.0).abs()))

    for step in range(config.step_count + 1):
        loss = self_propagation_loss(backend, latent, theta, head_logits, target)
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(f"diverged at step {step}", trace=loss_trace)
        loss_trace.append(value)
        record_simplex()
        if step == config.step_count:
            break
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    weights = HeadWeights(backend.head_ids, head_logits.detach().clone())
    if weights.simplex_error() > 1e-6:
        raise DivergenceError("head weights left the simplex", trace=loss_trace)
    return AdaptedPrompt(
        object_id=object_id,
        prompt=PromptEmbedding(theta.detach().clone(), learnable=True),
        head_weights=weights,
        loss_trace=loss_trace,
        simplex_trace=simplex_trace,
    )


def gradient_check(loss_fn, theta: torch.Tensor, head_logits: torch.Tensor,
                   probe_count: int = 20, rng: np.random.Generator | None = None,
                   step: float | None = None) -> float:
    """Compare autograd gradients against central finite differences.

    Probes random coordinates of both parameter tensors and returns the
    maximum relative error. Coordinates where both gradients vanish count
    as zero error.
    """
    rng = rng or np.random.default_rng(0)
    theta = theta.detach().clone().requires_grad_(True)
    head_logits = head_logits.detach().clone().requires_grad_(True)
    loss = loss_fn(theta, head_logits)
    grads = torch.autograd.grad(loss, [theta, head_logits])

    if step is None:
        step = 1e-6 if theta.dtype == torch.float64 else 1e-3

    def numeric(params, index, which):
        plus = [theta.detach().clone(), head_logits.detach().clone()]
        minus = [theta.detach().clone(), head_logits.detach().clone()]
        plus[which].view(-1)[index] += step
        minus[which].view(-1)[index] -= step
        hi = float(loss_fn(plus[0], plus[1]))
        lo = float(loss_fn(minus[0], minus[1]))
        return (hi - lo) / (2.0 * step)

    max_err = 0.0
    tensors = [theta, head_logits]
    for _ in range(probe_count):
        which = int(rng.integers(0, 2))
        index = int(rng.integers(0, tensors[which].numel()))
        analytic = float(grads[which].view(-1)[index])
        estimate = numeric(tensors, index, which)
        denom = max(abs(analytic), abs(estimate))
        if denom < 1e-10:
            continue
        max_err = max(max_err, abs(analytic - estimate) / denom)
    return max_err


class PromptStore:
    """Persisted adapted prompts keyed by (video, object).

    Each artifact is an .npz (embedding + logits) with a JSON sidecar
    carrying the object id, optimizer config and the loss endpoints.
    """

    def __init__(self, root):
        self.root = Path(root)

    def _stem(self, video_id: str, object_id: int) -> Path:
        return self.root / video_id / f"object_{object_id:03d}"

    def exists(self, video_id: str, object_id: int) -> bool:
        return self._stem(video_id, object_id).with_suffix(".npz").exists()

    def save(self, video_id: str, object_id: int, adapted: AdaptedPrompt,
             config: OptimizerConfig) -> None:
        stem = self._stem(video_id, object_id)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            stem.with_suffix(".npz"),
            embedding=adapted.prompt.tokens.detach().numpy(),
            head_logits=adapted.head_weights.logits.detach().numpy(),
        )
        meta = {
            "object_id": object_id,
            "learning_rate": config.learning_rate,
            "step_count": config.step_count,
            "initial_loss": adapted.initial_loss,
            "final_loss": adapted.final_loss,
            "parameter_count": adapted.parameter_count,
        }
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    def load(self, video_id: str, object_id: int, head_ids) -> AdaptedPrompt:
        stem = self._stem(video_id, object_id)
        data = np.load(stem.with_suffix(".npz"))
        meta = json.loads(stem.with_suffix(".json").read_text())
        prompt = PromptEmbedding(torch.from_numpy(data["embedding"]), learnable=True)
        weights = HeadWeights(tuple(head_ids), torch.from_numpy(data["head_logits"]))
        losses = [meta["initial_loss"], meta["final_loss"]]
        return AdaptedPrompt(
            object_id=meta["object_id"], prompt=prompt, head_weights=weights,
            loss_trace=[v for v in losses if v == v],
        )
