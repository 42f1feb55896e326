"""Synthetic aerial scenes with controlled capture conditions.

Images are single-channel pinhole views of upright figures on a textured
ground plane. Apparent object size follows the projection
``focal_length_px * object_height_m / altitude_m`` (clamped to a 2 px floor),
silhouettes stretch from a 3:1 side profile at pitch 0 to a round top-down
disc at pitch 90, and night frames are dimmed to 35% brightness with doubled
sensor noise. Every capture condition is recorded verbatim in the image
metadata, which is what makes the domains recoverable downstream.

Dataset layout on disk::

    <dir>/images/<image_id>.png
    <dir>/annotations.json     images, boxes, categories
    <dir>/metadata.json        one capture record per image
    <dir>/generator.json       the scene spec and counts that produced the split

Generation is reproducible: the same spec and seed yield byte-identical
files, because each image draws from its own rng keyed on
``(seed, split, index)`` and the writers are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DatasetParseError, InvalidInputError
from .fileio import dump_json, load_structured, sha256_files
from .schema import MetadataRecord

MIN_IMAGE_SIZE = 32
MIN_OBJECT_PX = 2.0

# Seconds past midnight UTC for generated timestamps. Noon sits inside the
# default day window, midnight outside it.
_DAY_SECOND = 12 * 3600
_NIGHT_SECOND = 0

_NIGHT_BRIGHTNESS = 0.35
_DAY_NOISE = 0.02
_NIGHT_NOISE = 0.04

_SPLIT_IDS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for the generator.

    ``altitude_cells`` and ``pitch_cells`` define the grid used to balance
    (or deliberately skew) the dataset: each cell is an equal slice of the
    corresponding range, and quotas are assigned per cell.
    """

    image_size: int = 128
    focal_length_px: float = 200.0
    object_height_m: float = 1.7
    objects_min: int = 1
    objects_max: int = 4
    altitude_range: tuple[float, float] = (5.0, 100.0)
    pitch_range: tuple[float, float] = (0.0, 90.0)
    altitude_cells: int = 3
    pitch_cells: int = 1
    time_mix: float = 0.0
    class_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size < MIN_IMAGE_SIZE:
            raise InvalidInputError(
                f"image_size must be at least {MIN_IMAGE_SIZE}, got {self.image_size}")
        if self.focal_length_px <= 0 or self.object_height_m <= 0:
            raise InvalidInputError("focal length and object height must be positive")
        lo, hi = self.altitude_range
        if not (0 < lo < hi):
            raise InvalidInputError(f"altitude_range must satisfy 0 < lo < hi, got ({lo}, {hi})")
        plo, phi = self.pitch_range
        if not (0 <= plo < phi <= 90):
            raise InvalidInputError(f"pitch_range must be an interval within [0, 90], got ({plo}, {phi})")
        if not 1 <= self.objects_min <= self.objects_max:
            raise InvalidInputError("need 1 <= objects_min <= objects_max")
        if self.altitude_cells < 1 or self.pitch_cells < 1:
            raise InvalidInputError("cell counts must be at least 1")
        if not 0.0 <= self.time_mix <= 1.0:
            raise InvalidInputError(f"time_mix must be in [0, 1], got {self.time_mix}")
        if self.class_count < 1:
            raise InvalidInputError("class_count must be at least 1")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "focal_length_px": self.focal_length_px,
            "object_height_m": self.object_height_m,
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "altitude_range": list(self.altitude_range),
            "pitch_range": list(self.pitch_range),
            "altitude_cells": self.altitude_cells,
            "pitch_cells": self.pitch_cells,
            "time_mix": self.time_mix,
            "class_count": self.class_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SceneSpec":
        try:
            return cls(
                image_size=int(doc.get("image_size", 128)),
                focal_length_px=float(doc.get("focal_length_px", 200.0)),
                object_height_m=float(doc.get("object_height_m", 1.7)),
                objects_min=int(doc.get("objects_min", 1)),
                objects_max=int(doc.get("objects_max", 4)),
                altitude_range=tuple(float(v) for v in doc.get("altitude_range", (5.0, 100.0))),
                pitch_range=tuple(float(v) for v in doc.get("pitch_range", (0.0, 90.0))),
                altitude_cells=int(doc.get("altitude_cells", 3)),
                pitch_cells=int(doc.get("pitch_cells", 1)),
                time_mix=float(doc.get("time_mix", 0.0)),
                class_count=int(doc.get("class_count", 1)),
                seed=int(doc.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"bad scene spec: {exc}") from exc


@dataclass(frozen=True)
class Annotation:
    bbox: tuple[float, float, float, float]
    category_id: int


@dataclass
class AnnotatedImage:
    image_id: str
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    annotations: tuple[Annotation, ...]
    metadata: MetadataRecord


@dataclass(frozen=True)
class Dataset:
    root: Path
    records: tuple[AnnotatedImage, ...]
    categories: tuple[dict, ...]

    def __len__(self) -> int:
        return len(self.records)


def allocate_quota(total: int, weights: Sequence[float]) -> list[int]:
    """Split ``total`` items over ``weights`` by largest remainder.

    Exact: the result always sums to ``total`` and each entry is within one
    of its real-valued share. Ties go to the earlier index.
    """
    if total < 0:
        raise InvalidInputError(f"total must be nonnegative, got {total}")
    raw = [w * total for w in weights]
    base = [math.floor(r) for r in raw]
    leftover = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Mid-gray ground with coarse patches and nothing object-like."""
    coarse = rng.uniform(-1.0, 1.0, size=(8, 8)).astype(np.float32)
    patch = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    return 0.45 + 0.10 * np.asarray(patch, dtype=np.float64)


def render_scene(spec: SceneSpec, altitude_m: float, pitch_deg: float,
                 night: bool, rng: np.random.Generator) -> AnnotatedImage:
    """Render one image at the given capture condition.

    Boxes tightly enclose the rasterized silhouettes, so they are always
    inside the frame with positive area even when a figure is clipped at
    the border.
    """
    if not math.isfinite(altitude_m) or altitude_m <= 0:
        raise InvalidInputError(f"altitude must be positive, got {altitude_m}")
    if not 0 <= pitch_deg <= 90:
        raise InvalidInputError(f"pitch must be in [0, 90], got {pitch_deg}")

    size = spec.image_size
    canvas = _texture(rng, size)

    h_px = spec.focal_length_px * spec.object_height_m / altitude_m
    h_px = min(max(h_px, MIN_OBJECT_PX), float(size))
    # Height:width ratio runs from 3 (side view) down to 1 (top-down disc).
    aspect = 3.0 - 2.0 * (pitch_deg / 90.0)
    w_px = max(h_px / aspect, 1.0)

    yy, xx = np.mgrid[0:size, 0:size]
    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    annotations = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(n_objects):
        category = int(rng.integers(1, spec.class_count + 1))
        # Brightness bands keep classes visually distinct; a small jitter
        # keeps instances from being identical.
        band = 0.88 - 0.55 * ((category - 1) / max(spec.class_count - 1, 1))
        intensity = float(np.clip(band + rng.uniform(-0.05, 0.05), 0.02, 0.98))

        # Keep figures fully inside the frame when they fit; oversized ones
        # stay centered-ish and get clipped by the border.
        x_lo, x_hi = _center_range(w_px / 2.0, size)
        y_lo, y_hi = _center_range(h_px / 2.0, size)
        cx = cy = size / 2.0
        for _ in range(8):
            cx = rng.uniform(x_lo, x_hi)
            cy = rng.uniform(y_lo, y_hi)
            candidate = (cx - w_px / 2, cy - h_px / 2, w_px, h_px)
            if all(_overlap(candidate, prev) < 0.3 for prev in placed):
                break
        placed.append((cx - w_px / 2, cy - h_px / 2, w_px, h_px))

        # Near-pixel-sized figures disappear into the gap between pixel
        # centers unless the center sits on one (grid coords are integers).
        if w_px < 2.0:
            cx = float(round(cx))
        if h_px < 4.0:
            cy = float(round(cy))
        rx, ry = w_px / 2.0, h_px / 2.0
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        if not mask.any():
            mask[min(int(round(cy)), size - 1), min(int(round(cx)), size - 1)] = True
        canvas[mask] = intensity

        ys, xs = np.nonzero(mask)
        bbox = (float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
        annotations.append(Annotation(bbox=bbox, category_id=category))

    if night:
        canvas = canvas * _NIGHT_BRIGHTNESS
        sigma = _NIGHT_NOISE
    else:
        sigma = _DAY_NOISE
    canvas = np.clip(canvas + rng.normal(0.0, sigma, size=canvas.shape), 0.0, 1.0)

    second = _NIGHT_SECOND if night else _DAY_SECOND
    metadata = MetadataRecord(altitude_m=float(altitude_m),
                              gimbal_pitch_deg=float(pitch_deg),
                              timestamp=float(second), night=night)
    return AnnotatedImage(image_id="", image=canvas[np.newaxis],
                          annotations=tuple(annotations), metadata=metadata)


def _center_range(radius: float, size: int) -> tuple[float, float]:
    lo, hi = radius + 1.0, size - 1.0 - radius
    if lo >= hi:
        return size * 0.25, size * 0.75
    return lo, hi


def _overlap(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _cells(spec: SceneSpec) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Altitude-major grid of (altitude interval, pitch interval) cells."""
    alo, ahi = spec.altitude_range
    plo, phi = spec.pitch_range
    alt_edges = [alo + (ahi - alo) * i / spec.altitude_cells
                 for i in range(spec.altitude_cells + 1)]
    pitch_edges = [plo + (phi - plo) * i / spec.pitch_cells
                   for i in range(spec.pitch_cells + 1)]
    out = []
    for a in range(spec.altitude_cells):
        for p in range(spec.pitch_cells):
            out.append(((alt_edges[a], alt_edges[a + 1]),
                        (pitch_edges[p], pitch_edges[p + 1])))
    return out


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int,
                     out_dir: str | Path, balance: str = "balanced",
                     weights: Sequence[float] | None = None) -> dict[str, Path]:
    """Write train and test splits under ``out_dir``; returns their paths.

    ``balance="balanced"`` gives every cell the same quota (largest
    remainder, so counts are exact). ``balance="imbalanced"`` takes one
    weight per cell, which must sum to 1 within 1e-6.
    """
    if n_train < 1 or n_test < 1:
        raise InvalidInputError("n_train and n_test must be positive")
    cells = _cells(spec)
    if balance == "balanced":
        cell_weights = [1.0 / len(cells)] * len(cells)
    elif balance == "imbalanced":
        if weights is None:
            raise InvalidInputError("imbalanced generation needs weights")
        if len(weights) != len(cells):
            raise InvalidInputError(
                f"got {len(weights)} weights for {len(cells)} cells")
        if any(w < 0 for w in weights):
            raise InvalidInputError("weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-6:
            raise InvalidInputError(f"weights must sum to 1, got {sum(weights)}")
        cell_weights = [float(w) for w in weights]
    else:
        raise InvalidInputError(f"unknown balance mode {balance!r}")

    out_dir = Path(out_dir)
    paths = {}
    for split, count in (("train", n_train), ("test", n_test)):
        paths[split] = _write_split(spec, split, count, cell_weights, cells,
                                    out_dir / split)
    return paths


def _write_split(spec: SceneSpec, split: str, count: int,
                 cell_weights: Sequence[float], cells, split_dir: Path) -> Path:
    split_id = _SPLIT_IDS[split]
    quotas = allocate_quota(count, cell_weights)

    # Per-cell night quotas keep day/night balanced within every cell.
    assignment: list[tuple[int, bool]] = []
    for cell_index, quota in enumerate(quotas):
        day_count, night_count = allocate_quota(
            quota, (1.0 - spec.time_mix, spec.time_mix))
        assignment.extend((cell_index, False) for _ in range(day_count))
        assignment.extend((cell_index, True) for _ in range(night_count))
    order_rng = np.random.default_rng((spec.seed, split_id))
    assignment = [assignment[i] for i in order_rng.permutation(len(assignment))]

    image_dir = split_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    image_entries = []
    annotation_entries = []
    metadata_entries = []
    for index, (cell_index, night) in enumerate(assignment):
        (alt_lo, alt_hi), (pitch_lo, pitch_hi) = cells[cell_index]
        rng = np.random.default_rng((spec.seed, split_id, index))
        altitude = float(rng.uniform(alt_lo, alt_hi))
        pitch = float(rng.uniform(pitch_lo, pitch_hi))
        scene = render_scene(spec, altitude, pitch, night, rng)

        image_id = f"{split}_{index:05d}"
        pixels = np.round(scene.image[0] * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(image_dir / f"{image_id}.png")

        image_entries.append({
            "id": image_id,
            "file": f"images/{image_id}.png",
            "width": spec.image_size,
            "height": spec.image_size,
        })
        for ann in scene.annotations:
            annotation_entries.append({
                "image_id": image_id,
                "bbox": list(ann.bbox),
                "category_id": ann.category_id,
            })
        meta = replace(scene.metadata,
                       timestamp=float(index * 86400 + scene.metadata.timestamp))
        metadata_entries.append({"image_id": image_id, **meta.to_dict()})

    categories = [{"id": c, "name": f"object{c}"}
                  for c in range(1, spec.class_count + 1)]
    dump_json({"images": image_entries, "annotations": annotation_entries,
               "categories": categories}, split_dir / "annotations.json")
    dump_json(metadata_entries, split_dir / "metadata.json")
    dump_json({"spec": spec.to_dict(), "split": split, "count": count,
               "weights": list(cell_weights)}, split_dir / "generator.json")
    return split_dir


def dataset_digest(path: str | Path) -> str:
    """SHA-256 over the index files and every image, in sorted order."""
    path = Path(path)
    files = [path / "annotations.json", path / "metadata.json"]
    files.extend(sorted((path / "images").glob("*.png")))
    for f in files:
        if not f.exists():
            raise DatasetParseError(f"dataset at {path} is missing {f.name}")
    return sha256_files(files)


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset directory back into memory.

    Pixels come back exactly as stored (uint8 rescaled to [0, 1]), boxes and
    metadata exactly as written. Any inconsistency between the index, the
    sidecar and the image files raises with the offending record named.
    """
    path = Path(path)
    ann_path = path / "annotations.json"
    meta_path = path / "metadata.json"
    if not ann_path.exists():
        raise DatasetParseError(f"no annotations.json under {path}")
    if not meta_path.exists():
        raise DatasetParseError(f"no metadata.json under {path}")
    try:
        index = load_structured(ann_path)
        sidecar = load_structured(meta_path)
    except ValueError as exc:
        raise DatasetParseError(f"unparseable dataset index under {path}: {exc}") from exc

    images = index.get("images") if isinstance(index, Mapping) else None
    if not isinstance(images, list) or not images:
        raise DatasetParseError(f"{ann_path} lists no images")

    meta_by_id: dict[str, Mapping] = {}
    for entry in sidecar:
        image_id = entry.get("image_id") if isinstance(entry, Mapping) else None
        if not isinstance(image_id, str):
            raise DatasetParseError(f"metadata entry without image_id in {meta_path}")
        if image_id in meta_by_id:
            raise DatasetParseError(f"duplicate metadata for image {image_id}")
        meta_by_id[image_id] = entry

    anns_by_id: dict[str, list[Annotation]] = {}
    known_ids = {entry.get("id") for entry in images}
    for k, raw in enumerate(index.get("annotations", [])):
        image_id = raw.get("image_id")
        if image_id not in known_ids:
            raise DatasetParseError(
                f"annotation {k} references unknown image {image_id!r}")
        bbox = raw.get("bbox")
        if (not isinstance(bbox, list) or len(bbox) != 4
                or bbox[2] <= 0 or bbox[3] <= 0):
            raise DatasetParseError(
                f"annotation {k} for image {image_id} has a malformed box: {bbox!r}")
        anns_by_id.setdefault(image_id, []).append(
            Annotation(bbox=tuple(float(v) for v in bbox),
                       category_id=int(raw.get("category_id", 1))))

    records = []
    for entry in images:
        image_id = entry.get("id")
        if not isinstance(image_id, str):
            raise DatasetParseError(f"image entry without id in {ann_path}")
        if image_id not in meta_by_id:
            raise DatasetParseError(f"no metadata record for image {image_id}")
        file_path = path / entry.get("file", f"images/{image_id}.png")
        if not file_path.exists():
            raise DatasetParseError(f"image file missing for {image_id}: {file_path}")
        with Image.open(file_path) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        if pixels.shape != (entry.get("height"), entry.get("width")):
            raise DatasetParseError(
                f"image {image_id} is {pixels.shape}, index says "
                f"({entry.get('height')}, {entry.get('width')})")
        meta_doc = {k: v for k, v in meta_by_id[image_id].items() if k != "image_id"}
        try:
            metadata = MetadataRecord.from_dict(meta_doc)
        except InvalidInputError as exc:
            raise DatasetParseError(f"bad metadata for image {image_id}: {exc}") from exc
        records.append(AnnotatedImage(
            image_id=image_id, image=pixels[np.newaxis],
            annotations=tuple(anns_by_id.get(image_id, [])), metadata=metadata))

    extra = set(meta_by_id) - {r.image_id for r in records}
    if extra:
        raise DatasetParseError(
            f"metadata for unknown images: {', '.join(sorted(extra))}")

    categories = tuple(index.get("categories", []))
    return Dataset(root=path, records=tuple(records), categories=categories)
