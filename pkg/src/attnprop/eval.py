"""Benchmark metrics and dataset ingestion.

Region similarity J is the Jaccard index between predicted and ground
truth object regions. Contour accuracy F is the harmonic mean of boundary
precision and recall: 1-pixel inner boundaries (4-connected, image border
counts as outside) matched within a pixel tolerance of 0.8% of the image
diagonal, rounded up. J&F is their arithmetic mean. Both-empty cases
score 1 by convention.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import HardMask

FRAME_EXTENSIONS = (".jpg", ".jpeg", ".png")
BOUNDARY_TOLERANCE = 0.008  # fraction of the image diagonal


class ManifestError(ValueError):
    """Dataset layout problems discovered while building a manifest."""


def jaccard(pred: HardMask, gt: HardMask, object_id: int) -> float:
    """Intersection-over-union of one object's region; 1 when both empty.

    Arguments:
        pred, gt  : hard masks of equal shape.
        object_id : label whose region is compared.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.binary(object_id)
    g = gt.binary(object_id)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """1-px inner boundary: mask pixels with a 4-neighbor outside the mask
    (positions beyond the image border count as outside)."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~interior


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


def boundary_tolerance_px(shape: tuple[int, int],
                          fraction: float = BOUNDARY_TOLERANCE) -> int:
    h, w = shape
    return int(math.ceil(fraction * math.hypot(h, w)))


def boundary_f(pred: HardMask, gt: HardMask, object_id: int,
               tolerance_px: int | None = None) -> float:
    """Boundary F-measure: harmonic mean of boundary precision and recall
    with matches counted within tolerance_px (default 0.8% of diagonal,
    rounded up). 1 when both boundaries are empty.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if tolerance_px is None:
        tolerance_px = boundary_tolerance_px(pred.shape)
    pb = _boundary(pred.binary(object_id))
    gb = _boundary(gt.binary(object_id))
    np_pb, np_gb = int(pb.sum()), int(gb.sum())
    if np_pb == 0 and np_gb == 0:
        return 1.0
    if np_pb == 0 or np_gb == 0:
        return 0.0
    disk = _disk(tolerance_px)
    gb_zone = ndimage.binary_dilation(gb, structure=disk)
    pb_zone = ndimage.binary_dilation(pb, structure=disk)
    precision = float((pb & gb_zone).sum() / np_pb)
    recall = float((gb & pb_zone).sum() / np_gb)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class FrameScore:
    frame_index: int
    object_id: int
    jaccard: float
    boundary: float


@dataclass
class SequenceResult:
    """Per-frame, per-object metrics plus the sequence aggregates."""

    sequence: str
    scores: list[FrameScore] = field(default_factory=list)

    def object_ids(self) -> list[int]:
        return sorted({s.object_id for s in self.scores})

    def per_object(self, metric: str) -> dict[int, float]:
        out = {}
        for o in self.object_ids():
            vals = [getattr(s, metric) for s in self.scores if s.object_id == o]
            out[o] = float(np.mean(vals))
        return out

    @property
    def j_mean(self) -> float:
        return float(np.mean(list(self.per_object("jaccard").values())))

    @property
    def f_mean(self) -> float:
        return float(np.mean(list(self.per_object("boundary").values())))

    @property
    def jf_mean(self) -> float:
        return (self.j_mean + self.f_mean) / 2.0

    def frame_jf(self) -> dict[int, float]:
        """Mean J&F over objects at each scored frame."""
        frames = sorted({s.frame_index for s in self.scores})
        out = {}
        for f in frames:
            vals = [(s.jaccard + s.boundary) / 2.0 for s in self.scores
                    if s.frame_index == f]
            out[f] = float(np.mean(vals))
        return out


@dataclass
class DatasetSummary:
    j_mean: float
    f_mean: float
    jf_mean: float
    per_sequence: dict[str, dict[str, float]]
    j_seen: float | None = None
    f_seen: float | None = None
    j_unseen: float | None = None
    f_unseen: float | None = None

    def as_dict(self) -> dict:
        out = {"J&F_m": self.jf_mean, "J_m": self.j_mean, "F_m": self.f_mean}
        if self.j_seen is not None:
            out.update({"J_s": self.j_seen, "F_s": self.f_seen,
                        "J_u": self.j_unseen, "F_u": self.f_unseen})
        out["sequences"] = self.per_sequence
        return out


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class SequenceEntry:
    name: str
    frame_paths: list[Path]
    annotation_paths: dict[int, Path]
    object_count: int
    first_frame_of_object: dict[int, int]
    seen_tags: dict[int, bool] | None = None

    @property
    def annotated_frames(self) -> list[int]:
        return sorted(self.annotation_paths)

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)


@dataclass
class DatasetManifest:
    root: Path
    layout: str
    sequences: list[SequenceEntry]

    def sequence(self, name: str) -> SequenceEntry:
        for s in self.sequences:
            if s.name == name:
                return s
        raise KeyError(name)


def _index_of(path: Path, position: int) -> int:
    stem = path.stem
    return int(stem) if stem.isdigit() else position


def _load_annotation(path: Path) -> HardMask:
    img = Image.open(path)
    if img.mode != "P":
        raise ManifestError(
            f"{path}: annotations must be indexed-palette PNG, got mode {img.mode}")
    labels = np.array(img, dtype=np.int32)
    return HardMask(labels, object_count=int(labels.max()))


def load_manifest(root, layout: str) -> DatasetManifest:
    """Walk a dataset tree and validate it into a manifest.

    Layouts: 'davis' (every frame annotated, objects start at frame 0),
    'ytvos' (sparse annotations, objects may appear late), 'longvideos'
    (sparse uniformly-sampled annotations).
    """
    if layout not in ("davis", "ytvos", "longvideos"):
        raise ValueError(f"unknown layout {layout!r}")
    root = Path(root)
    frames_root, annos_root = _locate_roots(root)
    seq_names = sorted(p.name for p in frames_root.iterdir() if p.is_dir())
    if not seq_names:
        raise ManifestError(f"no sequences under {frames_root}")

    sequences = []
    for name in seq_names:
        frame_paths = sorted(
            p for p in (frames_root / name).iterdir()
            if p.suffix.lower() in FRAME_EXTENSIONS
        )
        if not frame_paths:
            raise ManifestError(f"sequence {name} has no frames")
        frame_index = {
            _index_of(p, i): p for i, p in enumerate(frame_paths)
        }
        anno_dir = annos_root / name
        annotation_paths = {}
        if anno_dir.is_dir():
            for i, p in enumerate(sorted(anno_dir.glob("*.png"))):
                annotation_paths[_index_of(p, i)] = p
        if not annotation_paths:
            raise ManifestError(f"sequence {name} has no annotations")
        unknown = set(annotation_paths) - set(frame_index)
        if unknown:
            raise ManifestError(
                f"sequence {name}: annotations {sorted(unknown)} have no frame")
        first = min(annotation_paths)
        if layout == "davis" and first != min(frame_index):
            raise ManifestError(f"sequence {name}: first frame is not annotated")

        first_of_object: dict[int, int] = {}
        object_count = 0
        for idx in sorted(annotation_paths):
            mask = _load_annotation(annotation_paths[idx])
            object_count = max(object_count, mask.object_count)
            for o in np.unique(mask.labels):
                if o > 0 and int(o) not in first_of_object:
                    first_of_object[int(o)] = idx
            if layout == "davis":
                break  # frame 0 defines every object
        if layout == "davis":
            mask0 = _load_annotation(annotation_paths[first])
            object_count = mask0.object_count
            first_of_object = {int(o): first for o in np.unique(mask0.labels) if o > 0}

        sequences.append(SequenceEntry(
            name=name,
            frame_paths=[frame_index[i] for i in sorted(frame_index)],
            annotation_paths=annotation_paths,
            object_count=object_count,
            first_frame_of_object=first_of_object,
            seen_tags=_seen_tags(root, name, first_of_object),
        ))
    return DatasetManifest(root=root, layout=layout, sequences=sequences)


def _locate_roots(root: Path) -> tuple[Path, Path]:
    for prefix in ("", "valid", "val"):
        base = root / prefix if prefix else root
        frames = base / "JPEGImages"
        annos = base / "Annotations"
        if (frames / "480p").is_dir():
            return frames / "480p", annos / "480p"
        if frames.is_dir() and annos.is_dir():
            return frames, annos
    raise ManifestError(f"{root}: no JPEGImages/Annotations tree found")


def _seen_tags(root: Path, name: str, first_of_object) -> dict[int, bool] | None:
    """Per-object seen/unseen tags from a meta.json, when one exists."""
    for candidate in (root / "meta.json", root / "valid" / "meta.json"):
        if not candidate.exists():
            continue
        meta = json.loads(candidate.read_text())
        videos = meta.get("videos", {})
        if name not in videos:
            continue
        tags = {}
        for key, info in videos[name].get("objects", {}).items():
            seen = info.get("seen", info.get("category_seen"))
            if seen is not None:
                tags[int(key)] = bool(seen)
        return tags or None
    return None


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def score_sequence(predictions: dict[int, HardMask], entry: SequenceEntry,
                   ground_truth: dict[int, HardMask] | None = None) -> SequenceResult:
    """Score predictions at the annotated frames of one sequence.

    Each object's first annotated frame is input, not scored. Missing
    predictions at scored frames are an error.
    """
    result = SequenceResult(sequence=entry.name)
    gts = ground_truth or {
        i: _load_annotation(p) for i, p in entry.annotation_paths.items()
    }
    for frame_index in entry.annotated_frames:
        scored_objects = [
            o for o, f0 in entry.first_frame_of_object.items() if frame_index > f0
        ]
        if not scored_objects:
            continue
        if frame_index not in predictions:
            raise ValueError(
                f"{entry.name}: no prediction at annotated frame {frame_index}")
        pred = predictions[frame_index]
        gt = gts[frame_index]
        for o in scored_objects:
            result.scores.append(FrameScore(
                frame_index=frame_index, object_id=o,
                jaccard=jaccard(pred, gt, o),
                boundary=boundary_f(pred, gt, o),
            ))
    return result


def aggregate(results: list[SequenceResult],
              manifest: DatasetManifest | None = None) -> DatasetSummary:
    """Dataset means: per-object over frames, then over all objects."""
    j_vals, f_vals = [], []
    seen_j, seen_f, unseen_j, unseen_f = [], [], [], []
    per_sequence = {}
    for res in sorted(results, key=lambda r: r.sequence):
        pj = res.per_object("jaccard")
        pf = res.per_object("boundary")
        j_vals.extend(pj.values())
        f_vals.extend(pf.values())
        per_sequence[res.sequence] = {
            "J&F_m": res.jf_mean, "J_m": res.j_mean, "F_m": res.f_mean,
        }
        tags = None
        if manifest is not None:
            try:
                tags = manifest.sequence(res.sequence).seen_tags
            except KeyError:
                tags = None
        if tags:
            for o in pj:
                if tags.get(o) is True:
                    seen_j.append(pj[o])
                    seen_f.append(pf[o])
                elif tags.get(o) is False:
                    unseen_j.append(pj[o])
                    unseen_f.append(pf[o])
    j_mean = float(np.mean(j_vals))
    f_mean = float(np.mean(f_vals))
    summary = DatasetSummary(
        j_mean=j_mean, f_mean=f_mean, jf_mean=(j_mean + f_mean) / 2.0,
        per_sequence=per_sequence,
    )
    if seen_j or unseen_j:
        summary.j_seen = float(np.mean(seen_j)) if seen_j else None
        summary.f_seen = float(np.mean(seen_f)) if seen_f else None
        summary.j_unseen = float(np.mean(unseen_j)) if unseen_j else None
        summary.f_unseen = float(np.mean(unseen_f)) if unseen_f else None
    return summary


def per_frame_curve(results: list[SequenceResult]) -> tuple[np.ndarray, np.ndarray]:
    """Mean J&F by frame offset from each sequence's first scored frame.

    Offsets where only some sequences still have frames average over the
    sequences that do.
    """
    series = []
    for res in results:
        frame_jf = res.frame_jf()
        frames = sorted(frame_jf)
        if not frames:
            continue
        start = frames[0]
        series.append({f - start: frame_jf[f] for f in frames})
    if not series:
        return np.array([], dtype=int), np.array([])
    max_offset = max(max(s) for s in series)
    offsets, values = [], []
    for off in range(max_offset + 1):
        vals = [s[off] for s in series if off in s]
        if vals:
            offsets.append(off)
            values.append(float(np.mean(vals)))
    return np.array(offsets, dtype=int), np.array(values)


def write_csv(result: SequenceResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "object", "J", "F"])
        for s in sorted(result.scores, key=lambda s: (s.frame_index, s.object_id)):
            writer.writerow([s.frame_index, s.object_id,
                             f"{s.jaccard:.6f}", f"{s.boundary:.6f}"])


def write_summary(summary: DatasetSummary, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary.as_dict(), indent=2))
