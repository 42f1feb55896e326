"""Stage-split detectors with one expert branch per domain.

A split at stage ``s`` partitions a monolithic detector: stages 1..s stay in
one shared parameter set, and every domain key gets its own copy of stages
s+1..S plus the detection head. At inference the metadata record picks the
branch, the shared stages run once, and only the selected branch runs after
them, so the per-image cost never depends on how many branches exist.

Naming follows ``<dimension-names>@<split-stage>``: ``altitude@3`` shares
three stages and specializes the rest per altitude bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import (
    CHECKPOINT_VERSION,
    AnchorConfig,
    DetectorParams,
    ScoredBox,
    StageSpec,
    count_inference_ops,
    count_parameters,
    decode_raw,
    detect_head,
    forward_stages,
    read_tensors,
    stage_tensor_names,
    tensor_entries,
    _json,
    _load_archive_checked,
)
from .errors import CheckpointError, InvalidInputError
from .evaluation import Detection
from .fileio import json_bytes, write_archive
from .schema import (
    DomainKey,
    DomainSchema,
    MetadataRecord,
    bin_metadata,
    enumerate_keys,
    schema_from_dict,
    schema_to_dict,
)

_HEAD_NAMES = ["head.weight", "head.bias"]


@dataclass
class ExpertDetector:
    """A shared trunk plus one branch per domain key.

    ``shared`` holds tensors for stages 1..split_stage only; each branch
    holds stages split_stage+1..S and the head. Together they partition the
    monolithic tensor set, so parameter counts add up exactly.
    """

    spec: StageSpec
    anchors: AnchorConfig
    schema: DomainSchema
    split_stage: int
    shared: DetectorParams
    branches: dict[DomainKey, DetectorParams] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return "-".join(d.name for d in self.schema.dimensions) + f"@{self.split_stage}"

    def shared_stage_names(self) -> list[str]:
        return [f"stage{i}" for i in range(1, self.split_stage + 1)]

    def route(self, metadata: MetadataRecord) -> DomainKey:
        return bin_metadata(metadata, self.schema)

    def branch_for(self, metadata: MetadataRecord) -> DetectorParams:
        key = self.route(metadata)
        try:
            return self.branches[key]
        except KeyError:
            raise InvalidInputError(f"model has no branch for domain {key}") from None


def split_model(params: DetectorParams, schema: DomainSchema,
                split_stage: int) -> ExpertDetector:
    """Split a monolithic detector at ``split_stage``.

    Shared tensors are taken by reference (phase-one training continues to
    act on them); branch tensors are independent copies of the upper stages,
    one per key of the schema. ``split_stage`` 0 shares nothing and S shares
    every stage, leaving only the head per branch.
    """
    s_total = params.spec.stage_count
    if not 0 <= split_stage <= s_total:
        raise InvalidInputError(
            f"split stage must be in [0, {s_total}], got {split_stage}")
    shared_names = stage_tensor_names(params.spec, range(1, split_stage + 1))
    branch_names = stage_tensor_names(
        params.spec, range(split_stage + 1, s_total + 1)) + _HEAD_NAMES

    shared = DetectorParams(
        spec=params.spec, anchors=params.anchors,
        tensors={n: params.tensors[n] for n in shared_names},
        frozen={n for n in params.frozen if n in shared_names})
    branches = {}
    for key in enumerate_keys(schema):
        branches[key] = DetectorParams(
            spec=params.spec, anchors=params.anchors,
            tensors={n: params.tensors[n].copy() for n in branch_names},
            frozen={n for n in params.frozen if n in branch_names})
    return ExpertDetector(spec=params.spec, anchors=params.anchors, schema=schema,
                          split_stage=split_stage, shared=shared, branches=branches)


def freeze_shared(model: ExpertDetector) -> ExpertDetector:
    """Mark every shared tensor frozen; their gradients become exact zeros."""
    model.shared.frozen.update(model.shared.tensors)
    return model


def shared_forward(model: ExpertDetector, images: np.ndarray) -> np.ndarray:
    """Run the shared stages once; identity when nothing is shared."""
    if model.split_stage == 0:
        return np.asarray(images, dtype=np.float64)
    return forward_stages(model.shared, images, 0, model.split_stage)


def branch_raw(model: ExpertDetector, branch: DetectorParams,
               features: np.ndarray) -> np.ndarray:
    """Finish the forward pass on one branch, returning raw head output."""
    if model.split_stage < model.spec.stage_count:
        features = forward_stages(branch, features, model.split_stage,
                                  model.spec.stage_count)
    return detect_head(branch, features)


def route_forward(model: ExpertDetector, image: np.ndarray,
                  metadata: MetadataRecord, score_threshold: float,
                  nms_iou: float) -> list[ScoredBox]:
    """Detect on one image through the branch its metadata selects."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InvalidInputError(f"expected one (C, H, W) image, got ndim {image.ndim}")
    branch = model.branch_for(metadata)
    raw = branch_raw(model, branch, shared_forward(model, image))
    return decode_raw(raw, branch, image.shape[-1], score_threshold, nms_iou)


def detect_dataset(model: ExpertDetector, dataset, score_threshold: float,
                   nms_iou: float) -> list[Detection]:
    """Routed detections for every record, in record order."""
    out = []
    for rec in dataset.records:
        for sb in route_forward(model, rec.image, rec.metadata,
                                score_threshold, nms_iou):
            out.append(Detection(image_id=rec.image_id, bbox=sb.bbox,
                                 score=sb.score, category_id=sb.class_id))
    return out


def expert_parameter_count(model: ExpertDetector) -> tuple[int, int, int, int]:
    """(total, shared, per_branch, branch_count); total = shared + m * per_branch."""
    shared = count_parameters(model.shared)
    sizes = {count_parameters(b) for b in model.branches.values()}
    if len(sizes) != 1:
        raise InvalidInputError("branches disagree on parameter count")
    per_branch = sizes.pop()
    m = len(model.branches)
    return shared + m * per_branch, shared, per_branch, m


def routed_op_count(model: ExpertDetector, image_size: int) -> int:
    """MACs for one routed pass; equals the monolithic count for any split."""
    return count_inference_ops(model.spec, image_size, model.anchors)


def save_model(model: ExpertDetector, path) -> None:
    """Deterministic archive: shared tensors, per-branch tensors, schema."""
    entries, manifest = tensor_entries(model.shared.tensors, prefix="shared/")
    branch_freeze = {}
    for key in sorted(model.branches):
        branch = model.branches[key]
        b_entries, b_manifest = tensor_entries(branch.tensors, prefix=f"branch/{key}/")
        entries.update(b_entries)
        manifest.update(b_manifest)
        branch_freeze[str(key)] = sorted(branch.frozen)
    entries["format.json"] = json_bytes({"kind": "experts", "version": CHECKPOINT_VERSION})
    entries["spec.json"] = json_bytes({
        "stages": model.spec.to_dict(),
        "anchors": model.anchors.to_dict(),
        "split_stage": model.split_stage,
    })
    entries["schema.json"] = json_bytes(schema_to_dict(model.schema))
    entries["manifest.json"] = json_bytes(manifest)
    entries["freeze.json"] = json_bytes({"shared": sorted(model.shared.frozen),
                                         "branches": branch_freeze})
    write_archive(path, entries)


def load_model(path) -> ExpertDetector:
    entries, _ = _load_archive_checked(path, "experts")
    spec_doc = _json(entries["spec.json"])
    spec = StageSpec.from_dict(spec_doc["stages"])
    anchors = AnchorConfig.from_dict(spec_doc["anchors"])
    split_stage = int(spec_doc["split_stage"])
    schema = schema_from_dict(_json(entries["schema.json"]))
    tensors = read_tensors(entries, _json(entries["manifest.json"]))
    freeze_doc = _json(entries["freeze.json"])

    shared_names = stage_tensor_names(spec, range(1, split_stage + 1))
    branch_names = stage_tensor_names(
        spec, range(split_stage + 1, spec.stage_count + 1)) + _HEAD_NAMES

    shared_tensors = {}
    for name in shared_names:
        stored = f"shared/{name}"
        if stored not in tensors:
            raise CheckpointError(f"model archive lacks shared tensor {name!r}")
        shared_tensors[name] = tensors[stored]
    shared = DetectorParams(spec=spec, anchors=anchors, tensors=shared_tensors,
                            frozen=set(freeze_doc.get("shared", [])))

    branches: dict[DomainKey, DetectorParams] = {}
    for key in enumerate_keys(schema):
        branch_tensors = {}
        for name in branch_names:
            stored = f"branch/{key}/{name}"
            if stored not in tensors:
                raise CheckpointError(
                    f"model archive lacks tensor {name!r} for branch {key}")
            branch_tensors[name] = tensors[stored]
        branches[key] = DetectorParams(
            spec=spec, anchors=anchors, tensors=branch_tensors,
            frozen=set(freeze_doc.get("branches", {}).get(str(key), [])))

    expected = len(shared_names) + len(enumerate_keys(schema)) * len(branch_names)
    if len(tensors) != expected:
        raise CheckpointError(
            f"model archive holds {len(tensors)} tensors, expected {expected}")
    return ExpertDetector(spec=spec, anchors=anchors, schema=schema,
                          split_stage=split_stage, shared=shared, branches=branches)
