"""A small stage-structured single-stage detector.

Each stage is one 3x3 convolution with stride 2 followed by a softplus, so an
S-stage network downsamples the input by 2^S. A 1x1 convolution head emits,
per cell and anchor, four box offsets, an objectness logit, and one logit per
class. Everything runs in float64 numpy: forward passes are bit-reproducible,
analytic gradients can be checked against finite differences without noise
headroom, and checkpoints round-trip exactly.

Softplus rather than relu keeps the loss smooth in every parameter, which the
finite-difference gradient oracle relies on.

Box offsets use the usual anchor-relative encoding: tx = (gx - ax) / aw,
tw = log(gw / aw), applied around anchor centers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, InvalidInputError, TrainingDivergenceError
from .evaluation import iou_matrix
from .fileio import json_bytes, load_structured, read_archive, write_archive

CHECKPOINT_VERSION = 1
POSITIVE_IOU = 0.5
_OFFSET_CLAMP = 4.0  # exp(4) ~ 55x an anchor, ample for any sane box


@dataclass(frozen=True)
class StageSpec:
    """Backbone shape: one entry of `channels` per stage, downsample 2 each."""

    stage_count: int = 5
    channels: tuple[int, ...] = (8, 12, 16, 24, 32)
    in_channels: int = 1

    def __post_init__(self):
        if self.stage_count < 2:
            raise InvalidInputError("a detector needs at least two stages to split between")
        if len(self.channels) != self.stage_count:
            raise InvalidInputError(
                f"{len(self.channels)} channel entries for {self.stage_count} stages")
        if any(c < 1 for c in self.channels) or self.in_channels < 1:
            raise InvalidInputError("channel counts must be positive")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def to_dict(self) -> dict:
        return {"stage_count": self.stage_count, "channels": list(self.channels),
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageSpec":
        return cls(stage_count=int(d["stage_count"]), channels=tuple(d["channels"]),
                   in_channels=int(d["in_channels"]))


@dataclass(frozen=True)
class AnchorConfig:
    """Square anchors, one per listed size at every head cell."""

    sizes: tuple[float, ...] = (8.0, 24.0, 64.0)
    class_count: int = 1

    def __post_init__(self):
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise InvalidInputError("anchor sizes must be positive")
        if self.class_count < 1:
            raise InvalidInputError("class_count must be at least 1")
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))

    @property
    def per_anchor(self) -> int:
        """Entries per prediction vector: 4 offsets, objectness, class logits."""
        return 5 + self.class_count

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "class_count": self.class_count}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnchorConfig":
        return cls(sizes=tuple(d["sizes"]), class_count=int(d["class_count"]))


@dataclass
class DetectorParams:
    """Named tensors plus the shapes that define them.

    Tensor names are stable: ``stage{i}.weight`` / ``stage{i}.bias`` for
    i in 1..S and ``head.weight`` / ``head.bias``. ``frozen`` lists names
    whose gradients are forced to exactly zero.
    """

    spec: StageSpec
    anchors: AnchorConfig
    tensors: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    def clone(self) -> "DetectorParams":
        return DetectorParams(spec=self.spec, anchors=self.anchors,
                              tensors={n: t.copy() for n, t in self.tensors.items()},
                              frozen=set(self.frozen))


@dataclass(frozen=True)
class ScoredBox:
    """A decoded detection on one image."""

    bbox: tuple[float, float, float, float]
    score: float
    class_id: int


@dataclass(frozen=True)
class LossParts:
    total: float
    objectness: float
    box: float
    classification: float


def stage_tensor_names(spec: StageSpec, stages: Sequence[int] | None = None) -> list[str]:
    """Names for the given stage indices (1-based); all stages by default."""
    idx = range(1, spec.stage_count + 1) if stages is None else stages
    names = []
    for i in idx:
        names.extend([f"stage{i}.weight", f"stage{i}.bias"])
    return names


def init_params(spec: StageSpec, anchors: AnchorConfig, seed: int) -> DetectorParams:
    """He-style initialization; head biased toward low initial objectness."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    c_in = spec.in_channels
    for i, c_out in enumerate(spec.channels, start=1):
        fan_in = 9 * c_in
        tensors[f"stage{i}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                                 size=(c_out, c_in, 3, 3))
        tensors[f"stage{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    k = len(anchors.sizes) * anchors.per_anchor
    tensors["head.weight"] = rng.normal(0.0, 0.1 / math.sqrt(c_in), size=(k, c_in, 1, 1))
    bias = np.zeros(k)
    bias[4::anchors.per_anchor] = -2.0
    tensors["head.bias"] = bias
    return DetectorParams(spec=spec, anchors=anchors, tensors=tensors)


# ---------------------------------------------------------------------------
# Convolution plumbing
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    kh, kw = w.shape[2], w.shape[3]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    z = np.einsum("nchwij,ocij->nohw", cols, w) + b[None, :, None, None]
    return z, xp


def _conv_backward(dz: np.ndarray, xp: np.ndarray, w: np.ndarray, stride: int, pad: int):
    kh, kw = w.shape[2], w.shape[3]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("nohw,nchwij->ocij", dz, cols)
    db = dz.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->nchwij", dz, w)
    dxp = np.zeros_like(xp)
    ho, wo = dz.shape[2], dz.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, pad:-pad, pad:-pad] if pad else dxp
    return dx, dw, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_stage_range(spec: StageSpec, from_stage: int, to_stage: int):
    if not (0 <= from_stage <= to_stage <= spec.stage_count):
        raise InvalidInputError(
            f"stage range [{from_stage}, {to_stage}] outside [0, {spec.stage_count}]")


def _expected_channels(spec: StageSpec, stage: int) -> int:
    return spec.in_channels if stage == 0 else spec.channels[stage - 1]


def _forward_stages_traced(params: DetectorParams, x: np.ndarray,
                           from_stage: int, to_stage: int):
    traces = []
    for i in range(from_stage + 1, to_stage + 1):
        h = x.shape[-1]
        if h < 2 or h % 2:
            raise InvalidInputError(f"stage {i} input side {h} is not divisible by 2")
        z, xp = _conv_forward(x, params.tensors[f"stage{i}.weight"],
                              params.tensors[f"stage{i}.bias"], stride=2, pad=1)
        traces.append((i, xp, z))
        x = np.logaddexp(0.0, z)
    return x, traces


def forward_stages(params: DetectorParams, x, from_stage: int, to_stage: int) -> np.ndarray:
    """Run stages from_stage+1 .. to_stage; from_stage 0 means raw image input.

    Accepts one (C, H, W) array or a batch (N, C, H, W) and returns the same
    arrangement. Composing partial forwards reproduces the full forward
    bit-for-bit.
    """
    _check_stage_range(params.spec, from_stage, to_stage)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise InvalidInputError(f"expected 3 or 4 input dimensions, got {x.ndim}")
    expected = _expected_channels(params.spec, from_stage)
    if x.shape[1] != expected:
        raise InvalidInputError(
            f"stage {from_stage} output has {expected} channels, input has {x.shape[1]}")
    out, _ = _forward_stages_traced(params, x, from_stage, to_stage)
    return out[0] if single else out


def detect_head(params: DetectorParams, feat) -> np.ndarray:
    """Raw predictions (A, 5+C, G, G) per image from final-stage features."""
    feat = np.asarray(feat, dtype=np.float64)
    single = feat.ndim == 3
    if single:
        feat = feat[None]
    if feat.shape[1] != params.spec.channels[-1]:
        raise InvalidInputError(
            f"head expects {params.spec.channels[-1]} channels, got {feat.shape[1]}")
    z, _ = _conv_forward(feat, params.tensors["head.weight"], params.tensors["head.bias"],
                         stride=1, pad=0)
    n, _, g1, g2 = z.shape
    a = len(params.anchors.sizes)
    raw = z.reshape(n, a, params.anchors.per_anchor, g1, g2)
    return raw[0] if single else raw


def anchor_grid(params: DetectorParams, image_size: int) -> np.ndarray:
    """All anchor boxes (xywh), ordered anchor-major then row-major over cells."""
    s = params.spec.stage_count
    if image_size % (1 << s):
        raise InvalidInputError(f"image size {image_size} is not divisible by 2^{s}")
    g = image_size >> s
    if g < 1:
        raise InvalidInputError(f"image size {image_size} vanishes after {s} downsamplings")
    stride = image_size // g
    centers = (np.arange(g) + 0.5) * stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    blocks = []
    for size in params.anchors.sizes:
        block = np.stack([cx - size / 2, cy - size / 2,
                          np.full_like(cx, size), np.full_like(cx, size)], axis=-1)
        blocks.append(block.reshape(-1, 4))
    return np.concatenate(blocks, axis=0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _assign_anchors(anchors: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive mask and assigned GT index per anchor.

    An anchor is positive when its best IoU reaches POSITIVE_IOU; additionally
    each ground truth forces its best-IoU anchor positive so no object goes
    unclaimed. Later ground truths win collisions, deterministically.
    """
    m = iou_matrix(anchors, boxes)
    assign = np.argmax(m, axis=1)
    positive = m[np.arange(len(anchors)), assign] >= POSITIVE_IOU
    best_anchor = np.argmax(m, axis=0)
    for j, a in enumerate(best_anchor):
        positive[a] = True
        assign[a] = j
    return positive, assign


def _encode_offsets(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    acx = anchors[:, 0] + anchors[:, 2] / 2
    acy = anchors[:, 1] + anchors[:, 3] / 2
    gcx = boxes[:, 0] + boxes[:, 2] / 2
    gcy = boxes[:, 1] + boxes[:, 3] / 2
    return np.stack([
        (gcx - acx) / anchors[:, 2],
        (gcy - acy) / anchors[:, 3],
        np.log(boxes[:, 2] / anchors[:, 2]),
        np.log(boxes[:, 3] / anchors[:, 3]),
    ], axis=1)


def compute_loss(params: DetectorParams, images, gt_boxes, gt_classes,
                 from_stage: int = 0):
    """Loss and analytic parameter gradients for a batch.

    Objectness is binary cross-entropy over every anchor; box offsets are an
    L2 penalty and classes a cross-entropy, both on positive anchors only.
    Per-image terms are summed over anchors, then averaged over the batch, so
    a duplicated image contributes its per-image loss twice before the mean.

    ``from_stage`` > 0 takes precomputed stage outputs instead of raw images
    (the features of stage ``from_stage``); combined with the partial-forward
    composition identity this reproduces the full-input loss and the upper
    tensors' gradients bit-for-bit, which is what lets branch training run on
    cached features from frozen lower stages. Ground-truth boxes stay in
    original image coordinates either way.

    Returns (LossParts, gradients) where gradients maps every computed tensor
    name to an array of its shape; frozen tensors map to exact zeros.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise InvalidInputError(f"expected a batch (N, C, H, W), got {images.ndim} dims")
    n = images.shape[0]
    if len(gt_boxes) != n or len(gt_classes) != n:
        raise InvalidInputError(
            f"{n} images but {len(gt_boxes)} box lists and {len(gt_classes)} class lists")
    spec, anchors_cfg = params.spec, params.anchors
    if not 0 <= from_stage <= spec.stage_count:
        raise InvalidInputError(f"from_stage must be in [0, {spec.stage_count}]")
    expected = _expected_channels(spec, from_stage)
    if images.shape[1] != expected:
        raise InvalidInputError(
            f"stage {from_stage} output has {expected} channels, input has {images.shape[1]}")
    c_count = anchors_cfg.class_count
    k = anchors_cfg.per_anchor

    with np.errstate(invalid="ignore"):
        # NaNs flow through to the finiteness check below, quietly.
        feat, traces = _forward_stages_traced(params, images, from_stage, spec.stage_count)
        z_head, xp_head = _conv_forward(feat, params.tensors["head.weight"],
                                        params.tensors["head.bias"], stride=1, pad=0)
    g = z_head.shape[-1]
    a_count = len(anchors_cfg.sizes)
    m = a_count * g * g
    # (N, A*K, G, G) -> (N, M, K) with anchor-major, row-major cell order.
    pred = z_head.reshape(n, a_count, k, g, g).transpose(0, 1, 3, 4, 2).reshape(n, m, k)

    image_size = images.shape[-1] << from_stage
    anchors = anchor_grid(params, image_size)

    obj_target = np.zeros((n, m))
    positive = np.zeros((n, m), dtype=bool)
    box_target = np.zeros((n, m, 4))
    cls_target = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        boxes = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(gt_classes[i], dtype=np.int64).reshape(-1)
        if boxes.shape[0] != classes.shape[0]:
            raise InvalidInputError(
                f"image {i}: {boxes.shape[0]} boxes but {classes.shape[0]} class ids")
        if boxes.size == 0:
            continue
        if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
            raise InvalidInputError(f"image {i}: ground-truth boxes need positive extent")
        if np.any(classes < 1) or np.any(classes > c_count):
            raise InvalidInputError(
                f"image {i}: class ids must lie in 1..{c_count}, got {sorted(set(classes))}")
        pos, assign = _assign_anchors(anchors, boxes)
        positive[i] = pos
        obj_target[i, pos] = 1.0
        offsets = _encode_offsets(anchors[pos], boxes[assign[pos]])
        box_target[i, pos] = offsets
        cls_target[i, pos] = classes[assign[pos]] - 1

    t_box = pred[:, :, :4]
    obj = pred[:, :, 4]
    cls_logits = pred[:, :, 5:]

    # Objectness BCE with logits: softplus(z) - z * target, summed per image.
    with np.errstate(invalid="ignore"):
        obj_loss = np.logaddexp(0.0, obj) - obj * obj_target
    box_diff = (t_box - box_target) * positive[:, :, None]
    box_loss = np.sum(box_diff ** 2, axis=2)
    cls_max = cls_logits.max(axis=2, keepdims=True)
    lse = cls_max[:, :, 0] + np.log(np.sum(np.exp(cls_logits - cls_max), axis=2))
    picked = np.take_along_axis(cls_logits, cls_target[:, :, None], axis=2)[:, :, 0]
    cls_loss = (lse - picked) * positive

    per_image = (obj_loss + box_loss + cls_loss).sum(axis=1)
    total = float(per_image.mean())
    parts = LossParts(
        total=total,
        objectness=float(obj_loss.sum(axis=1).mean()),
        box=float(box_loss.sum(axis=1).mean()),
        classification=float(cls_loss.sum(axis=1).mean()),
    )
    if not math.isfinite(total):
        raise TrainingDivergenceError(
            message=f"non-finite training loss {total}; check learning rate and inputs")

    # Gradient w.r.t. raw predictions, scaled by the batch mean.
    dpred = np.empty_like(pred)
    dpred[:, :, :4] = 2.0 * box_diff / n
    dpred[:, :, 4] = (_sigmoid(obj) - obj_target) / n
    softmax = np.exp(cls_logits - lse[:, :, None])
    onehot = np.zeros_like(cls_logits)
    np.put_along_axis(onehot, cls_target[:, :, None], 1.0, axis=2)
    dpred[:, :, 5:] = (softmax - onehot) * positive[:, :, None] / n

    dz_head = dpred.reshape(n, a_count, g, g, k).transpose(0, 1, 4, 2, 3).reshape(n, a_count * k, g, g)
    grads: dict[str, np.ndarray] = {}
    dfeat, grads["head.weight"], grads["head.bias"] = _conv_backward(
        dz_head, xp_head, params.tensors["head.weight"], stride=1, pad=0)
    dy = dfeat
    for i, xp, z in reversed(traces):
        dz = dy * _sigmoid(z)
        dy, grads[f"stage{i}.weight"], grads[f"stage{i}.bias"] = _conv_backward(
            dz, xp, params.tensors[f"stage{i}.weight"], stride=2, pad=1)
    for name in params.frozen:
        grads[name] = np.zeros_like(params.tensors[name])
    return parts, grads


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in processing order.

    Boxes are visited in descending score, ties broken toward the lower
    index; a box is dropped when it overlaps an already-kept box with IoU
    strictly above the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise InvalidInputError(f"{boxes.shape[0]} boxes but {scores.shape[0]} scores")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    matrix = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= matrix[i] > iou_threshold
        suppressed[i] = True
    return np.array(keep, dtype=np.int64)


def decode_raw(raw: np.ndarray, params: DetectorParams, image_size: int,
               score_threshold: float, nms_iou: float) -> list[ScoredBox]:
    """Offsets to boxes, score filter (strict), then per-class greedy NMS."""
    k = params.anchors.per_anchor
    a_count = len(params.anchors.sizes)
    pred = raw.transpose(0, 2, 3, 1).reshape(-1, k)
    anchors = anchor_grid(params, image_size)
    acx = anchors[:, 0] + anchors[:, 2] / 2
    acy = anchors[:, 1] + anchors[:, 3] / 2

    tw = np.clip(pred[:, 2], -_OFFSET_CLAMP, _OFFSET_CLAMP)
    th = np.clip(pred[:, 3], -_OFFSET_CLAMP, _OFFSET_CLAMP)
    w = anchors[:, 2] * np.exp(tw)
    h = anchors[:, 3] * np.exp(th)
    cx = acx + pred[:, 0] * anchors[:, 2]
    cy = acy + pred[:, 1] * anchors[:, 3]
    boxes = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)

    obj = _sigmoid(pred[:, 4])
    logits = pred[:, 5:]
    cmax = logits.max(axis=1, keepdims=True)
    probs = np.exp(logits - cmax)
    probs /= probs.sum(axis=1, keepdims=True)
    cls_idx = np.argmax(probs, axis=1)
    score = obj * probs[np.arange(len(probs)), cls_idx]

    out: list[ScoredBox] = []
    candidates = np.nonzero(score > score_threshold)[0]
    for cls in range(params.anchors.class_count):
        sel = candidates[cls_idx[candidates] == cls]
        if sel.size == 0:
            continue
        keep = nms(boxes[sel], score[sel], nms_iou)
        for idx in sel[keep]:
            out.append(ScoredBox(bbox=tuple(float(v) for v in boxes[idx]),
                                 score=float(score[idx]), class_id=cls + 1))
    out.sort(key=lambda d: (-d.score, d.class_id, d.bbox))
    return out


def decode_detections(params: DetectorParams, image, score_threshold: float,
                      nms_iou: float) -> list[ScoredBox]:
    """Full-image forward plus decoding; the inference entry point."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InvalidInputError(f"decode_detections expects one (C, H, W) image, got {image.ndim} dims")
    feat = forward_stages(params, image, 0, params.spec.stage_count)
    raw = detect_head(params, feat)
    return decode_raw(raw, params, image.shape[-1], score_threshold, nms_iou)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def count_parameters(params: DetectorParams, trainable_only: bool = False) -> int:
    names = params.tensors.keys()
    if trainable_only:
        names = [n for n in names if n not in params.frozen]
    return int(sum(params.tensors[n].size for n in names))


def count_inference_ops(spec: StageSpec, image_size: int, anchors: AnchorConfig) -> int:
    """Multiply-accumulate count of one forward pass (convolutions only).

    Bias adds, activations, and NMS are excluded; the count depends only on
    the architecture and input size, never on how stages are split between
    shared and expert ownership.
    """
    if image_size % (1 << spec.stage_count):
        raise InvalidInputError(
            f"image size {image_size} is not divisible by 2^{spec.stage_count}")
    side = image_size
    c_in = spec.in_channels
    total = 0
    for c_out in spec.channels:
        side //= 2
        total += side * side * c_out * 9 * c_in
        c_in = c_out
    total += side * side * len(anchors.sizes) * anchors.per_anchor * c_in
    return int(total)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def tensor_entries(tensors: Mapping[str, np.ndarray], prefix: str = "") -> tuple[dict, dict]:
    """(archive entries, manifest) for a named tensor set; 64-bit little-endian."""
    entries = {}
    manifest = {}
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries[f"tensors/{prefix}{name}.bin"] = arr.astype("<f8").tobytes()
        manifest[f"{prefix}{name}"] = {"shape": list(arr.shape)}
    return entries, manifest


def read_tensors(entries: Mapping[str, bytes], manifest: Mapping[str, Mapping]) -> dict:
    """Inverse of tensor_entries; validates presence and exact byte counts."""
    tensors = {}
    for name, info in manifest.items():
        key = f"tensors/{name}.bin"
        if key not in entries:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        shape = tuple(int(v) for v in info["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        data = entries[key]
        if len(data) != expected:
            raise CheckpointError(
                f"tensor {name!r} holds {len(data)} bytes, expected {expected}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    stray = [k for k in entries if k.startswith("tensors/")
             and k.removeprefix("tensors/").removesuffix(".bin") not in manifest]
    if stray:
        raise CheckpointError(f"checkpoint contains unlisted tensors {stray}")
    return tensors


def save_checkpoint(params: DetectorParams, path) -> None:
    entries, manifest = tensor_entries(params.tensors)
    entries["format.json"] = json_bytes({"kind": "detector", "version": CHECKPOINT_VERSION})
    entries["spec.json"] = json_bytes({"stages": params.spec.to_dict(),
                                       "anchors": params.anchors.to_dict()})
    entries["manifest.json"] = json_bytes(manifest)
    entries["freeze.json"] = json_bytes(sorted(params.frozen))
    write_archive(path, entries)


def _load_archive_checked(path, kind: str) -> tuple[dict, dict]:
    entries = read_archive(path)
    try:
        fmt = _json(entries["format.json"])
    except KeyError:
        raise CheckpointError(f"{path}: not a checkpoint archive (no format entry)") from None
    if fmt.get("kind") != kind:
        raise CheckpointError(f"{path}: archive holds a {fmt.get('kind')!r}, expected {kind!r}")
    if fmt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {fmt.get('version')!r}")
    return entries, fmt


def _json(data: bytes):
    import json

    return json.loads(data.decode("utf-8"))


def load_checkpoint(path) -> DetectorParams:
    entries, _ = _load_archive_checked(path, "detector")
    spec_doc = _json(entries["spec.json"])
    spec = StageSpec.from_dict(spec_doc["stages"])
    anchors = AnchorConfig.from_dict(spec_doc["anchors"])
    tensors = read_tensors(entries, _json(entries["manifest.json"]))
    frozen = set(_json(entries["freeze.json"]))
    missing = set(stage_tensor_names(spec) + ["head.weight", "head.bias"]) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint manifest lacks tensors {sorted(missing)}")
    return DetectorParams(spec=spec, anchors=anchors, tensors=tensors, frozen=frozen)
