"""Adapter over a pretrained text-to-image latent diffusion model.

Queries and keys are captured post-projection, pre-softmax, from the
configured self-attention layers of the denoising U-Net (default: the
first self-attention of the final decoder block). The backbone stays
frozen; prompt conditioning enters through a learnable token-embedding
matrix pushed through the frozen text encoder, so gradients reach the
prompt without touching model weights.

Heavy dependencies (diffusers, transformers) are imported lazily; this
module is importable without them.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from ..core import LatticeGeometry
from ..inversion import CLEAN, LatentState
from . import FeatureSet, PromptEmbedding, QueryKeySet

DEFAULT_LAYER_PATHS = ("up_blocks.3.attentions.0.transformer_blocks.0.attn1",)


def _require_diffusers():
    try:
        import diffusers  # noqa: F401
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise RuntimeError(
            "the diffusion backend needs the 'diffusers' and 'transformers' "
            "packages (pip install attnprop[diffusion]) plus local model weights"
        ) from exc


class DiffusionBackend:
    """Wraps a Stable-Diffusion-style pipeline loaded from a local path."""

    def __init__(self, weights_path: str, layer_paths=DEFAULT_LAYER_PATHS,
                 device: str = "cuda", dtype: torch.dtype = torch.float32,
                 image_size: int = 768):
        if not weights_path:
            raise ValueError("diffusion backend needs a local weights path")
        _require_diffusers()
        from diffusers import StableDiffusionPipeline

        pipe = StableDiffusionPipeline.from_pretrained(
            weights_path, torch_dtype=dtype, safety_checker=None,
            requires_safety_checker=False,
        )
        self.device = torch.device(device)
        self.dtype = dtype
        self.vae = pipe.vae.to(self.device).eval()
        self.unet = pipe.unet.to(self.device).eval()
        self.text_encoder = pipe.text_encoder.to(self.device).eval()
        self.tokenizer = pipe.tokenizer
        for module in (self.vae, self.unet, self.text_encoder):
            module.requires_grad_(False)

        self.layer_paths = tuple(layer_paths)
        self._captures: dict[str, dict[str, torch.Tensor]] = {}
        self._attn_modules = {}
        head_ids = []
        for path in self.layer_paths:
            attn = self.unet.get_submodule(path)
            self._attn_modules[path] = attn
            for h in range(attn.heads):
                head_ids.append((path, h))
            self._hook(path, attn)
        self.head_ids = tuple(head_ids)
        first = self._attn_modules[self.layer_paths[0]]
        self.head_dim = first.to_q.out_features // first.heads

        scale = 2 ** (len(self.vae.config.block_out_channels) - 1)
        self.geometry = LatticeGeometry(
            latent_height=image_size // scale,
            latent_width=image_size // scale,
            image_height=image_size,
            image_width=image_size,
        )
        self.token_count = self.tokenizer.model_max_length
        self.embed_dim = self.text_encoder.config.hidden_size
        self.weights_path = str(weights_path)

    def _hook(self, path: str, attn) -> None:
        store = self._captures.setdefault(path, {})

        def grab(name):
            def fn(module, args, output):
                store[name] = output
            return fn

        attn.to_q.register_forward_hook(grab("q"))
        attn.to_k.register_forward_hook(grab("k"))
        attn.register_forward_pre_hook(
            lambda module, args: store.__setitem__("hidden", args[0])
        )

    @property
    def head_count(self) -> int:
        return len(self.head_ids)

    @property
    def backbone_id(self) -> str:
        tag = hashlib.sha1(
            (self.weights_path + "|".join(self.layer_paths)).encode()
        ).hexdigest()[:12]
        return f"diffusion-{tag}-{self.geometry.image_height}"

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for module in (self.unet, self.text_encoder):
            for p in module.parameters():
                digest.update(np.float64(float(p.detach().sum())).tobytes())
        return digest.hexdigest()

    # -- prompts ---------------------------------------------------------

    def _token_matrix(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(
            text, padding="max_length", truncation=True,
            max_length=self.token_count, return_tensors="pt",
        ).input_ids.to(self.device)
        table = self.text_encoder.text_model.embeddings.token_embedding
        return table(ids)[0].detach()

    def null_prompt(self) -> PromptEmbedding:
        return PromptEmbedding(self._token_matrix(""))

    def text_prompt(self, text: str) -> PromptEmbedding:
        return PromptEmbedding(self._token_matrix(text))

    def _encode_prompt(self, prompt: PromptEmbedding) -> torch.Tensor:
        """Push a token-embedding matrix through the frozen text encoder."""
        tm = self.text_encoder.text_model
        tokens = prompt.tokens.to(self.device, self.dtype)[None]
        seq = tokens.shape[1]
        positions = torch.arange(seq, device=self.device)
        hidden = tokens + tm.embeddings.position_embedding(positions)
        causal = torch.full((seq, seq), torch.finfo(self.dtype).min,
                            device=self.device, dtype=self.dtype)
        causal = torch.triu(causal, diagonal=1)[None, None]
        out = tm.encoder(inputs_embeds=hidden, causal_attention_mask=causal)
        return tm.final_layer_norm(out[0])

    # -- latents -----------------------------------------------------------

    def encode_frame(self, frame: np.ndarray) -> LatentState:
        img = torch.from_numpy(np.ascontiguousarray(frame)).to(self.device, self.dtype)
        img = img.permute(2, 0, 1)[None] * 2.0 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(img).latent_dist
            latent = posterior.mean * self.vae.config.scaling_factor
        return LatentState(latent[0].cpu(), timestep=0, provenance=CLEAN)

    def decode_latent(self, latent: LatentState) -> np.ndarray:
        z = latent.tensor.to(self.device, self.dtype)[None]
        with torch.no_grad():
            img = self.vae.decode(z / self.vae.config.scaling_factor).sample
        img = ((img[0] + 1.0) / 2.0).clamp(0, 1).permute(1, 2, 0)
        return img.float().cpu().numpy()

    def predict_noise(self, x: torch.Tensor, t: int, prompt: PromptEmbedding) -> torch.Tensor:
        cond = self._encode_prompt(prompt)
        with torch.no_grad():
            eps = self.unet(
                x.to(self.device, self.dtype)[None],
                torch.tensor([t], device=self.device),
                encoder_hidden_states=cond,
            ).sample
        return eps[0].to(x.dtype).cpu()

    # -- extraction ----------------------------------------------------------

    def _run_unet(self, latent: LatentState, prompt: PromptEmbedding) -> None:
        cond = self._encode_prompt(prompt)
        self.unet(
            latent.tensor.to(self.device, self.dtype)[None],
            torch.tensor([latent.timestep], device=self.device),
            encoder_hidden_states=cond,
        )

    def extract_qk(self, latent: LatentState, prompt: PromptEmbedding) -> QueryKeySet:
        self._run_unet(latent, prompt)
        queries, keys = [], []
        for path in self.layer_paths:
            attn = self._attn_modules[path]
            store = self._captures[path]
            for name, dest in (("q", queries), ("k", keys)):
                t = store[name][0]  # (N, heads * d)
                n = t.shape[0]
                dest.append(t.view(n, attn.heads, -1).permute(1, 0, 2))
        return QueryKeySet(
            self.head_ids,
            torch.cat(queries, dim=0).cpu(),
            torch.cat(keys, dim=0).cpu(),
        )

    def extract_features(self, latent: LatentState) -> FeatureSet:
        self._run_unet(latent, self.null_prompt())
        hidden = self._captures[self.layer_paths[0]]["hidden"][0]
        return FeatureSet(hidden.detach().float().cpu())
