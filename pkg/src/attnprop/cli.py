"""Command-line orchestration: track, eval, ablate, adapt.

Every run writes a RunRecord (config snapshot, stage wall-clock times,
artifact hashes) next to its outputs so sweeps and reruns are auditable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import adapt as adapt_mod
from . import eval as eval_mod
from .backends import make_backend
from .config import RunConfig
from .core import HardMask, downsample_mask, load_mask_png, save_mask_png
from .inversion import LatentCache
from .kernel import HeadWeights
from .tracker import TrackingSession

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    config: dict
    stage_times: dict[str, float] = field(default_factory=dict)
    total_seconds: float = 0.0
    sequences: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    artifact_hashes: dict[str, str] = field(default_factory=dict)

    def finalize(self, total: float) -> None:
        self.total_seconds = total
        named = sum(self.stage_times.values())
        self.stage_times["other"] = max(total - named, 0.0)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "config": self.config,
            "total_seconds": self.total_seconds,
            "stage_times": self.stage_times,
            "sequences": sorted(self.sequences),
            "metrics": self.metrics,
            "artifact_hashes": dict(sorted(self.artifact_hashes.items())),
        }
        path.write_text(json.dumps(payload, indent=2))


def load_frame(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prompt_strings(config: RunConfig, sequence: str) -> dict[int, str]:
    if not config.prompts_file:
        return {}
    data = json.loads(Path(config.prompts_file).read_text())
    return {int(k): v for k, v in data.get(sequence, {}).items()}


def build_prompt_provider(backend, config: RunConfig, video_id: str,
                          store: adapt_mod.PromptStore | None = None,
                          strings: dict[int, str] | None = None):
    """Object -> (prompt, head weights) resolver for a tracking session."""
    strings = strings or {}
    uniform = lambda: HeadWeights.uniform(backend.head_ids)

    def provider(object_id, frame, frame_index, latent, binary):
        if config.prompt_mode == "null":
            return backend.null_prompt(), uniform()
        if config.prompt_mode in ("class", "caption"):
            text = strings.get(object_id)
            if text is None:
                log.warning("%s/%d: no prompt string, falling back to null",
                            video_id, object_id)
                return backend.null_prompt(), uniform()
            return backend.text_prompt(text), uniform()
        # learned: reuse a persisted artifact or optimize now and persist
        if store is not None and store.exists(video_id, object_id):
            adapted = store.load(video_id, object_id, backend.head_ids)
            return adapted.prompt, adapted.head_weights
        mask = HardMask(binary.astype(np.int32), 1)
        target_stack = downsample_mask(mask, backend.geometry)
        target = torch.from_numpy(target_stack.scores[1:2].reshape(1, -1))
        adapted = adapt_mod.optimize_instance(
            backend, latent, target, object_id, config.optimizer)
        if store is not None:
            store.save(video_id, object_id, adapted, config.optimizer)
        return adapted.prompt, adapted.head_weights

    return provider


def _build_segmenter(config: RunConfig, injected=None):
    if config.refinement != "segmenter":
        return None
    if injected is not None:
        return injected
    from .refine import SamSegmenter

    if not config.segmenter_checkpoint:
        raise RuntimeError("refinement=segmenter needs segmenter_checkpoint "
                           "(or an injected segmenter)")
    return SamSegmenter(config.segmenter_checkpoint, device=config.backend.device)


def _track_one(backend, config, entry, out_dir: Path, segmenter,
               store, record: RunRecord) -> None:
    strings = _prompt_strings(config, entry.name)
    cache = LatentCache(config.cache_dir) if config.cache_dir else None
    provider = build_prompt_provider(backend, config, entry.name, store, strings)
    session = TrackingSession(
        backend, config, video_id=entry.name, segmenter=segmenter,
        prompt_provider=provider, latent_cache=cache,
    )
    seq_dir = out_dir / entry.name
    seq_dir.mkdir(parents=True, exist_ok=True)

    first = entry.annotated_frames[0]
    mask0 = load_mask_png(entry.annotation_paths[first], entry.object_count)
    injections = {
        f: [o for o, f0 in entry.first_frame_of_object.items() if f0 == f]
        for f in entry.annotated_frames
    }

    for position, path in enumerate(entry.frame_paths):
        index = int(path.stem) if path.stem.isdigit() else position
        io_start = time.perf_counter()
        frame = load_frame(path)
        session.timings["io"] += time.perf_counter() - io_start
        if index < first:
            continue
        if index == first:
            session.start(frame, mask0, frame_index=index)
            predicted = mask0
        else:
            inject = None
            if injections.get(index):
                inject = load_mask_png(entry.annotation_paths[index], entry.object_count)
            predicted = session.advance(frame, index, inject=inject)
        io_start = time.perf_counter()
        out_path = seq_dir / f"{path.stem}.png"
        save_mask_png(out_path, predicted)
        session.timings["io"] += time.perf_counter() - io_start
        record.artifact_hashes[str(out_path.relative_to(out_dir))] = _sha256(out_path)
    for stage, seconds in session.timings.items():
        record.stage_times[stage] = record.stage_times.get(stage, 0.0) + seconds
    record.sequences.append(entry.name)


def _prompt_store(config: RunConfig, backend) -> adapt_mod.PromptStore | None:
    """Content-addressed store: sweeps sharing the relevant stage config
    reuse artifacts, different stages never collide."""
    if not config.cache_dir:
        return None
    key = hashlib.sha1(json.dumps({
        "backbone": backend.backbone_id,
        "tau": config.tau,
        "noise_mode": config.noise_mode,
        "ddim_steps": config.ddim_steps,
        "lr": config.optimizer.learning_rate,
        "steps": config.optimizer.step_count,
    }, sort_keys=True).encode()).hexdigest()[:12]
    return adapt_mod.PromptStore(Path(config.cache_dir) / "prompts" / key)


def cmd_track(config: RunConfig, manifest: eval_mod.DatasetManifest,
              output_dir=None, segmenter=None, backend=None) -> RunRecord:
    """Track every sequence of the manifest; write indexed-PNG masks."""
    start = time.perf_counter()
    out_dir = Path(output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=config.snapshot())
    backend = backend or make_backend(config.backend)
    seg = _build_segmenter(config, segmenter)
    store = _prompt_store(config, backend) if config.prompt_mode == "learned" else None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_track_one, backend, config, entry, out_dir, seg,
                            store, record)
                for entry in manifest.sequences
            ]
            for f in futures:
                f.result()
    else:
        for entry in manifest.sequences:
            _track_one(backend, config, entry, out_dir, seg, store, record)

    record.finalize(time.perf_counter() - start)
    record.write(out_dir / "run_record.json")
    config.to_yaml(out_dir / "config.yaml")
    return record


def cmd_eval(predictions_dir, manifest: eval_mod.DatasetManifest,
             output_dir=None) -> eval_mod.DatasetSummary:
    """Score a prediction tree against the manifest's annotations."""
    predictions_dir = Path(predictions_dir)
    output_dir = Path(output_dir or predictions_dir / "eval")
    missing = []
    results = []
    for entry in manifest.sequences:
        preds = {}
        gaps = []
        first = entry.annotated_frames[0]
        for idx in entry.annotated_frames:
            stem = entry.annotation_paths[idx].stem
            path = predictions_dir / entry.name / f"{stem}.png"
            if not path.exists():
                if idx > first:  # the first annotated frame is input
                    gaps.append(f"{entry.name}/{stem}")
                continue
            preds[idx] = load_mask_png(path, entry.object_count)
        if gaps:
            missing.extend(gaps)
            continue
        result = eval_mod.score_sequence(preds, entry)
        results.append(result)
        eval_mod.write_csv(result, output_dir / "csv" / f"{entry.name}.csv")
    if missing:
        raise ValueError(f"missing predictions at annotated frames: {missing}")
    summary = eval_mod.aggregate(results, manifest)
    eval_mod.write_summary(summary, output_dir / "summary.json")
    return summary


def cmd_adapt(config: RunConfig, manifest: eval_mod.DatasetManifest,
              backend=None) -> Path:
    """Optimize and persist one prompt artifact per (sequence, object)."""
    if not config.cache_dir:
        raise ValueError("cmd_adapt needs cache_dir for the prompt store")
    backend = backend or make_backend(config.backend)
    store = _prompt_store(config, backend)
    cache = LatentCache(config.cache_dir)
    failures = []
    for entry in manifest.sequences:
        first = entry.annotated_frames[0]
        mask0 = load_mask_png(entry.annotation_paths[first], entry.object_count)
        frame_path = None
        for position, p in enumerate(entry.frame_paths):
            index = int(p.stem) if p.stem.isdigit() else position
            if index == first:
                frame_path = p
                break
        if frame_path is None:
            raise ValueError(f"{entry.name}: no frame at annotated index {first}")
        frame = load_frame(frame_path)
        session = TrackingSession(backend, config, video_id=entry.name,
                                  latent_cache=cache)
        latent = session.prepare_latent(frame, first)
        for o in range(1, entry.object_count + 1):
            if store.exists(entry.name, o):
                continue
            if not mask0.binary(o).any():
                continue
            target_stack = downsample_mask(
                HardMask(mask0.binary(o).astype(np.int32), 1), backend.geometry)
            target = torch.from_numpy(target_stack.scores[1:2].reshape(1, -1))
            try:
                adapted = adapt_mod.optimize_instance(
                    backend, latent, target, o, config.optimizer)
            except adapt_mod.DivergenceError as exc:
                log.error("%s/%d diverged: %s", entry.name, o, exc)
                failures.append((entry.name, o))
                continue
            store.save(entry.name, o, adapted, config.optimizer)
    if failures:
        log.warning("adaptation failures: %s", failures)
    return store.root


SWEEPS = ("timestep", "prompt", "heads", "refinement", "points")


def _sweep_grid(config: RunConfig, sweep: str) -> list[tuple[dict, dict]]:
    """(row label fields, config overrides) per grid point."""
    grid = []
    if sweep == "timestep":
        for mode in ("random", "ddim"):
            for tau in range(1, 202, 20):
                grid.append((
                    {"noise_mode": mode, "tau": tau},
                    {"noise_mode": mode, "tau": tau},
                ))
    elif sweep == "prompt":
        for mode in ("null", "class", "caption", "learned"):
            grid.append(({"prompt_mode": mode}, {"prompt_mode": mode}))
    elif sweep == "heads":
        grid.append(({"weighting": "uniform"}, {"prompt_mode": "null"}))
        grid.append(({"weighting": "learned"}, {"prompt_mode": "learned"}))
    elif sweep == "refinement":
        for mode in ("none", "segmenter", "crf"):
            grid.append(({"refinement": mode}, {"refinement": mode}))
    elif sweep == "points":
        for n in (1, 2, 3, 5):
            for p in range(5, 51, 5):
                grid.append((
                    {"points_per_set": n, "candidate_count": p},
                    {"points_per_set": n, "candidate_count": p,
                     "refinement": "segmenter"},
                ))
    else:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")
    return grid


def cmd_ablate(config: RunConfig, manifest: eval_mod.DatasetManifest, sweep: str,
               output_path=None, segmenter=None, backend=None) -> Path:
    """Run a sweep grid; one table row per point, failures marked."""
    grid = _sweep_grid(config, sweep)
    out_path = Path(output_path or Path(config.output_dir) / f"ablate_{sweep}.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    label_fields: list[str] = []
    for labels, overrides in grid:
        label_fields = list(labels)
        data = config.snapshot()
        data.update(overrides)
        point = RunConfig.from_dict(data)
        run_dir = out_path.parent / f"ablate_{sweep}" / \
            "_".join(f"{k}-{v}" for k, v in labels.items())
        try:
            cmd_track(point, manifest, output_dir=run_dir, segmenter=segmenter,
                      backend=backend)
            summary = cmd_eval(run_dir, manifest)
            rows.append({**labels, "status": "ok",
                         "J&F_m": f"{summary.jf_mean:.4f}",
                         "J_m": f"{summary.j_mean:.4f}",
                         "F_m": f"{summary.f_mean:.4f}"})
        except Exception as exc:  # sweep continues; row records the failure
            log.error("sweep point %s failed: %s", labels, exc)
            rows.append({**labels, "status": f"failed: {exc}",
                         "J&F_m": "", "J_m": "", "F_m": ""})
    header = label_fields + ["status", "J&F_m", "J_m", "F_m"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row.get(k, "")) for k in header))
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


# ---------------------------------------------------------------------------
# argparse surface
# ---------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", type=str, default=None, help="YAML run config")
    parser.add_argument("--data-root", type=str, required=True)
    parser.add_argument("--layout", choices=("davis", "ytvos", "longvideos"),
                        default="davis")
    parser.add_argument("--output", type=str, default=None)
    overrides = (
        ("--backend", "backend.kind", str),
        ("--weights", "backend.weights_path", str),
        ("--device", "backend.device", str),
        ("--tau", "tau", int),
        ("--ddim-steps", "ddim_steps", int),
        ("--noise-mode", "noise_mode", str),
        ("--bank-size", "bank_size", int),
        ("--radius", "radius", float),
        ("--top-k", "top_k", int),
        ("--affinity", "affinity", str),
        ("--refinement", "refinement", str),
        ("--prompt-mode", "prompt_mode", str),
        ("--points-per-set", "points_per_set", int),
        ("--candidates", "candidate_count", int),
        ("--lr", "optimizer.learning_rate", float),
        ("--opt-steps", "optimizer.step_count", int),
        ("--seed", "seed", int),
        ("--cache-dir", "cache_dir", str),
        ("--segmenter-checkpoint", "segmenter_checkpoint", str),
        ("--prompts-file", "prompts_file", str),
        ("--workers", "workers", int),
    )
    for flag, dest, typ in overrides:
        parser.add_argument(flag, dest=dest.replace(".", "__"), type=typ,
                            default=None)


def _config_from_args(args) -> RunConfig:
    config = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    for key, value in vars(args).items():
        if "__" not in key or value is None:
            continue
        section, name = key.split("__", 1)
        if section in ("backend", "optimizer"):
            setattr(getattr(config, section), name, value)
        else:
            raise ValueError(f"unknown override {key}")
    for name in ("tau", "ddim_steps", "noise_mode", "bank_size", "radius",
                 "top_k", "affinity", "refinement", "prompt_mode",
                 "points_per_set", "candidate_count", "seed", "cache_dir",
                 "segmenter_checkpoint", "prompts_file", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if args.output:
        config.output_dir = args.output
    config.validate()
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="attnprop",
        description="Zero-shot video object tracking via diffusion-attention "
                    "label propagation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_track = sub.add_parser("track", help="propagate first-frame masks")
    _add_common(p_track)

    p_eval = sub.add_parser("eval", help="score predictions against annotations")
    p_eval.add_argument("--predictions", type=str, required=True)
    p_eval.add_argument("--data-root", type=str, required=True)
    p_eval.add_argument("--layout", choices=("davis", "ytvos", "longvideos"),
                        default="davis")
    p_eval.add_argument("--output", type=str, default=None)

    p_ablate = sub.add_parser("ablate", help="run a sweep grid")
    _add_common(p_ablate)
    p_ablate.add_argument("--sweep", choices=SWEEPS, required=True)

    p_adapt = sub.add_parser("adapt", help="optimize per-object prompts")
    _add_common(p_adapt)

    args = parser.parse_args(argv)
    try:
        if args.command == "eval":
            manifest = eval_mod.load_manifest(args.data_root, args.layout)
            summary = cmd_eval(args.predictions, manifest, args.output)
            print(json.dumps({k: v for k, v in summary.as_dict().items()
                              if k != "sequences"}, indent=2))
            return 0
        config = _config_from_args(args)
        manifest = eval_mod.load_manifest(args.data_root, args.layout)
        if args.command == "track":
            record = cmd_track(config, manifest)
            print(f"wrote {len(record.artifact_hashes)} masks to {config.output_dir}")
        elif args.command == "ablate":
            table = cmd_ablate(config, manifest, args.sweep)
            print(f"sweep table: {table}")
        elif args.command == "adapt":
            store = cmd_adapt(config, manifest)
            print(f"prompt store: {store}")
        return 0
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
