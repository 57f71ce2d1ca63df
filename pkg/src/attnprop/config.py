"""Run configuration: one human-readable YAML document with sections
mirroring the pipeline stages. Defaults reproduce the reference
hyperparameters exactly."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .adapt import OptimizerConfig

NOISE_MODES = ("ddim", "random", "none")
REFINEMENT_MODES = ("none", "segmenter", "crf")
PROMPT_MODES = ("null", "class", "caption", "learned")
AFFINITY_MODES = ("attention", "cosine")


@dataclass
class BackendConfig:
    kind: str = "diffusion"
    seed: int = 0
    # diffusion adapter
    weights_path: str = ""
    layer_paths: tuple[str, ...] = (
        "up_blocks.3.attentions.0.transformer_blocks.0.attn1",
    )
    device: str = "cuda"
    image_height: int = 768
    image_width: int = 768
    # synthetic double
    latent_height: int = 16
    latent_width: int = 16
    head_count: int = 5
    head_dim: int = 8
    token_count: int = 4
    embed_dim: int = 16
    content_gain: float = 4.0
    positional_gain: float = 0.25
    prompt_gain: float = 0.5

    def __post_init__(self):
        self.layer_paths = tuple(self.layer_paths)


@dataclass
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    # latent preparation
    tau: int = 41
    ddim_steps: int = 50
    noise_mode: str = "ddim"
    # propagation
    bank_size: int = 7          # S preceding frames plus the initial frame
    radius: float = 14.0
    top_k: int = 15
    block_rows: int = 512
    affinity: str = "attention"
    cosine_temperature: float = 0.07
    # refinement
    refinement: str = "segmenter"
    points_per_set: int = 2     # n
    candidate_count: int = 40   # p
    segmenter_checkpoint: str = ""
    crf_kernel_size: int = 5
    crf_steps: int = 30
    # test-time optimization
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prompt_mode: str = "learned"
    # orchestration
    seed: int = 0
    workers: int = 1
    cache_dir: str = ""
    output_dir: str = "runs/out"
    prompts_file: str = ""      # sidecar strings for class/caption modes

    def __post_init__(self):
        if isinstance(self.backend, dict):
            self.backend = BackendConfig(**self.backend)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.validate()

    def validate(self):
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.refinement not in REFINEMENT_MODES:
            raise ValueError(f"refinement must be one of {REFINEMENT_MODES}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.affinity not in AFFINITY_MODES:
            raise ValueError(f"affinity must be one of {AFFINITY_MODES}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        positive = {
            "ddim_steps": self.ddim_steps,
            "radius": self.radius,
            "top_k": self.top_k,
            "block_rows": self.block_rows,
            "points_per_set": self.points_per_set,
            "candidate_count": self.candidate_count,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.bank_size < 0:
            raise ValueError("bank_size must be >= 0")

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=False))

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "backend" in data and isinstance(data["backend"], dict):
            data = dict(data)
            data["backend"] = BackendConfig(**data["backend"])
        if "optimizer" in data and isinstance(data["optimizer"], dict):
            data = dict(data)
            data["optimizer"] = OptimizerConfig(**data["optimizer"])
        return cls(**data)

    def snapshot(self) -> dict:
        out = asdict(self)
        out["backend"]["layer_paths"] = list(self.backend.layer_paths)
        return out
