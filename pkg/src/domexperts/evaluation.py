"""Detection evaluation: IoU matching, average precision, domain stratification.

Protocol, stated once so every test can hold it to account:

  * matching is greedy per image and class: detections in descending score
    order each claim their best-IoU unmatched ground truth if that IoU meets
    the threshold, otherwise they are false positives;
  * AP uses all-point interpolation (area under the precision envelope) over
    the pooled detections of a scope, with score ties ordered FP before TP;
  * per-domain numbers treat the domain's images as their own test set;
  * the domain average is the unweighted mean over domains that contain at
    least one ground-truth object. Zero-object domains are flagged, not
    silently zeroed.

Boxes are (x, y, w, h) with w, h > 0, matching the annotation files.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetParseError, InvalidInputError
from .fileio import dump_json, load_structured
from .schema import DomainKey

Box = tuple[float, float, float, float]


def _check_box(bbox, owner: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in bbox)
    if len(vals) != 4:
        raise InvalidInputError(f"{owner}: bbox must have 4 entries, got {len(vals)}")
    x, y, w, h = vals
    if not all(math.isfinite(v) for v in vals):
        raise InvalidInputError(f"{owner}: bbox has non-finite entries {vals}")
    if w <= 0 or h <= 0:
        raise InvalidInputError(f"{owner}: bbox needs positive width and height, got {vals}")
    return vals


@dataclass(frozen=True)
class Detection:
    """One scored box, the unit of a detection dump."""

    image_id: str
    bbox: Box
    score: float
    category_id: int

    def __post_init__(self):
        object.__setattr__(self, "bbox", _check_box(self.bbox, "detection"))
        if not math.isfinite(self.score):
            raise InvalidInputError(f"detection score must be finite, got {self.score}")
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "category_id", int(self.category_id))

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "bbox": list(self.bbox),
                "score": self.score, "category_id": self.category_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(image_id=d["image_id"], bbox=tuple(d["bbox"]),
                   score=d["score"], category_id=d["category_id"])


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    bbox: Box
    category_id: int

    def __post_init__(self):
        object.__setattr__(self, "bbox", _check_box(self.bbox, "ground truth"))
        object.__setattr__(self, "category_id", int(self.category_id))


@dataclass(frozen=True)
class GroundTruthSet:
    """Annotated boxes plus a domain key per image (empty images included)."""

    image_ids: tuple[str, ...]
    boxes: tuple[GroundTruthBox, ...]
    domains: Mapping[str, DomainKey]


# ---------------------------------------------------------------------------
# Geometry and matching
# ---------------------------------------------------------------------------

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) xywh boxes; returns (n,m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two xywh boxes."""
    a = _check_box(a, "box a")
    b = _check_box(b, "box b")
    return float(iou_matrix(np.array([a]), np.array([b]))[0, 0])


def match_detections(boxes, scores, gt_boxes, iou_threshold: float):
    """Greedy single-image, single-class matching.

    Returns (tp_flags, gt_matched): booleans aligned with the input detection
    order and the ground-truth order. Detections are processed in descending
    score (stable on ties); each claims its best-IoU unmatched ground truth
    when that IoU reaches the threshold. Tied IoUs go to the lowest GT index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] != scores.shape[0]:
        raise InvalidInputError(
            f"{boxes.shape[0]} boxes but {scores.shape[0]} scores")
    for arr, owner in ((boxes, "detection"), (gt, "ground truth")):
        if arr.size and (np.any(arr[:, 2] <= 0) or np.any(arr[:, 3] <= 0)):
            raise InvalidInputError(f"{owner} boxes need positive width and height")

    flags = np.zeros(boxes.shape[0], dtype=bool)
    matched = np.zeros(gt.shape[0], dtype=bool)
    if boxes.shape[0] == 0 or gt.shape[0] == 0:
        return flags, matched
    matrix = iou_matrix(boxes, gt)
    for i in np.argsort(-scores, kind="stable"):
        row = np.where(matched, -1.0, matrix[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            flags[i] = True
            matched[j] = True
    return flags, matched


def _sorted_pr(flags: np.ndarray, scores: np.ndarray, n_gt: int):
    """Cumulative recall/precision in evaluation order (ties: FP first)."""
    order = np.lexsort((flags, -scores))
    f = flags[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    precision = tp / (tp + fp)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(precision)
    return recall, precision


def average_precision(tp_flags, scores, n_gt: int) -> float | None:
    """Area under the precision envelope; None when the metric is undefined.

    Undefined means no ground truth and no detections. With ground truth but
    no detections (or the reverse) the value is an honest 0.
    """
    flags = np.asarray(tp_flags, dtype=bool).reshape(-1)
    sc = np.asarray(scores, dtype=np.float64).reshape(-1)
    if flags.shape != sc.shape:
        raise InvalidInputError(f"{flags.shape[0]} flags but {sc.shape[0]} scores")
    if not isinstance(n_gt, (int, np.integer)) or n_gt < 0:
        raise InvalidInputError(f"ground-truth count must be a nonnegative integer, got {n_gt!r}")
    if sc.size and not np.all(np.isfinite(sc)):
        raise InvalidInputError("detection scores must be finite")
    if int(flags.sum()) > n_gt:
        raise InvalidInputError(f"{int(flags.sum())} true positives exceed {n_gt} ground truths")
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    recall, precision = _sorted_pr(flags, sc, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


# ---------------------------------------------------------------------------
# Whole-set evaluation
# ---------------------------------------------------------------------------

def _tkey(t: float) -> str:
    return format(float(t), "g")


def _mean_or_none(values: Iterable[float]) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


@dataclass
class EvalReport:
    """Per-class, per-domain AP values at each IoU threshold, plus counts.

    Nested dictionaries are keyed by threshold string (``"0.5"``), domain key
    string, and class id string, so the report serializes losslessly.
    """

    thresholds: list[float]
    class_ids: list[int]
    domains: list[str]
    full: dict
    per_domain: dict
    averages: dict
    counts: dict
    excluded_domains: list[str]
    curves: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def map_full(self, t) -> float | None:
        return self.full[_tkey(t)]["map"]

    def ap_full(self, t, class_id: int) -> float | None:
        return self.full[_tkey(t)]["per_class"][str(class_id)]

    def domain_map(self, t, domain: str) -> float | None:
        return self.per_domain[_tkey(t)][domain]["map"]

    def domain_ap(self, t, domain: str, class_id: int) -> float | None:
        return self.per_domain[_tkey(t)][domain]["per_class"][str(class_id)]

    def domain_average(self, t) -> float | None:
        return self.averages[_tkey(t)]["map"]

    def domain_average_ap(self, t, class_id: int) -> float | None:
        return self.averages[_tkey(t)]["per_class"][str(class_id)]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "class_ids": list(self.class_ids),
            "domains": list(self.domains),
            "full": self.full,
            "per_domain": self.per_domain,
            "averages": self.averages,
            "counts": self.counts,
            "excluded_domains": list(self.excluded_domains),
            "curves": self.curves,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            thresholds=[float(t) for t in d["thresholds"]],
            class_ids=[int(c) for c in d["class_ids"]],
            domains=list(d["domains"]),
            full=dict(d["full"]),
            per_domain=dict(d["per_domain"]),
            averages=dict(d["averages"]),
            counts=dict(d["counts"]),
            excluded_domains=list(d["excluded_domains"]),
            curves=dict(d.get("curves", {})),
            notes=list(d.get("notes", [])),
        )


_AVERAGE_NOTE = ("domain average is the unweighted mean over domains with at least one "
                 "ground-truth object; zero-object domains are listed under "
                 "excluded_domains and contribute nothing")


def evaluate(detections: Sequence[Detection], truth: GroundTruthSet,
             thresholds: Sequence[float] = (0.5,)) -> EvalReport:
    """Score a detection set against annotated images, stratified by domain."""
    if not truth.image_ids:
        raise InvalidInputError("evaluation needs at least one annotated image")
    if not thresholds:
        raise InvalidInputError("evaluation needs at least one IoU threshold")
    ids = list(truth.image_ids)
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate image ids in ground truth")
    id_set = set(ids)
    for img in ids:
        if img not in truth.domains:
            raise InvalidInputError(f"image {img!r} carries no domain key")
    for b in truth.boxes:
        if b.image_id not in id_set:
            raise InvalidInputError(f"ground truth references unknown image {b.image_id!r}")
    dets = list(detections)
    for d in dets:
        if d.image_id not in id_set:
            raise InvalidInputError(f"detection references unknown image {d.image_id!r}")

    classes = sorted({b.category_id for b in truth.boxes} | {d.category_id for d in dets})
    gt_by: dict = defaultdict(list)
    for b in truth.boxes:
        gt_by[(b.image_id, b.category_id)].append(b.bbox)
    det_by: dict = defaultdict(list)
    for d in dets:
        det_by[(d.image_id, d.category_id)].append(d)

    domain_of = {img: str(truth.domains[img]) for img in ids}
    domain_list = sorted(set(domain_of.values()))
    images_of = {dom: [img for img in ids if domain_of[img] == dom] for dom in domain_list}
    counts = {dom: {"images": len(imgs),
                    "objects": sum(len(gt_by.get((img, c), ())) for img in imgs
                                   for c in classes)}
              for dom, imgs in images_of.items()}
    excluded = [dom for dom in domain_list if counts[dom]["objects"] == 0]

    # Match once per threshold, image, and class; scopes reuse the flags.
    match_of: dict = {}
    for t in thresholds:
        for (img, cls), ds in det_by.items():
            boxes = np.array([d.bbox for d in ds], dtype=np.float64)
            scores = np.array([d.score for d in ds], dtype=np.float64)
            gtb = np.asarray(gt_by.get((img, cls), []), dtype=np.float64).reshape(-1, 4)
            flags, _ = match_detections(boxes, scores, gtb, t)
            match_of[(_tkey(t), img, cls)] = (flags, scores)

    def scope_ap(tk: str, imgs: list[str], cls: int):
        flags: list[bool] = []
        scores: list[float] = []
        for img in imgs:
            got = match_of.get((tk, img, cls))
            if got is not None:
                flags.extend(got[0].tolist())
                scores.extend(got[1].tolist())
        n_gt = sum(len(gt_by.get((img, cls), ())) for img in imgs)
        return average_precision(flags, scores, n_gt), n_gt

    full: dict = {}
    per_domain: dict = {}
    averages: dict = {}
    curves: dict = {}
    for t in thresholds:
        tk = _tkey(t)
        per_class: dict = {}
        gt_totals: dict = {}
        curves[tk] = {}
        for cls in classes:
            ap, n_gt = scope_ap(tk, ids, cls)
            per_class[str(cls)] = ap
            gt_totals[cls] = n_gt
            flags_all: list[bool] = []
            scores_all: list[float] = []
            for img in ids:
                got = match_of.get((tk, img, cls))
                if got is not None:
                    flags_all.extend(got[0].tolist())
                    scores_all.extend(got[1].tolist())
            if flags_all and n_gt > 0:
                recall, precision = _sorted_pr(np.array(flags_all, dtype=bool),
                                               np.array(scores_all, dtype=np.float64), n_gt)
                curves[tk][str(cls)] = {"recall": [float(r) for r in recall],
                                        "precision": [float(p) for p in precision]}
            else:
                curves[tk][str(cls)] = {"recall": [], "precision": []}
        full[tk] = {"per_class": per_class,
                    "map": _mean_or_none(per_class[str(c)] for c in classes
                                         if gt_totals[c] > 0)}

        per_domain[tk] = {}
        for dom in domain_list:
            imgs = images_of[dom]
            dom_per_class: dict = {}
            dom_gt: dict = {}
            for cls in classes:
                ap, n_gt = scope_ap(tk, imgs, cls)
                dom_per_class[str(cls)] = ap
                dom_gt[cls] = n_gt
            per_domain[tk][dom] = {
                "per_class": dom_per_class,
                "map": _mean_or_none(dom_per_class[str(c)] for c in classes
                                     if dom_gt[c] > 0),
            }

        avg_per_class = {}
        for cls in classes:
            vals = [per_domain[tk][dom]["per_class"][str(cls)] for dom in domain_list
                    if sum(len(gt_by.get((img, cls), ())) for img in images_of[dom]) > 0]
            avg_per_class[str(cls)] = _mean_or_none(vals)
        averages[tk] = {
            "per_class": avg_per_class,
            "map": _mean_or_none(per_domain[tk][dom]["map"] for dom in domain_list
                                 if dom not in excluded),
        }

    return EvalReport(
        thresholds=[float(t) for t in thresholds],
        class_ids=[int(c) for c in classes],
        domains=domain_list,
        full=full,
        per_domain=per_domain,
        averages=averages,
        counts=counts,
        excluded_domains=excluded,
        curves=curves,
        notes=[_AVERAGE_NOTE],
    )


def ground_truth_of(dataset, schema) -> GroundTruthSet:
    """Bin an annotated dataset's metadata and package it for evaluation."""
    from .schema import bin_metadata

    ids = []
    boxes = []
    domains = {}
    for rec in dataset.records:
        ids.append(rec.image_id)
        domains[rec.image_id] = bin_metadata(rec.metadata, schema)
        for ann in rec.annotations:
            boxes.append(GroundTruthBox(image_id=rec.image_id, bbox=tuple(ann.bbox),
                                        category_id=ann.category_id))
    return GroundTruthSet(image_ids=tuple(ids), boxes=tuple(boxes), domains=domains)


# ---------------------------------------------------------------------------
# Files: detection dumps, report emission
# ---------------------------------------------------------------------------

def save_detections(detections: Sequence[Detection], path) -> None:
    dump_json([d.to_dict() for d in detections], path)


def load_detections(path) -> list[Detection]:
    doc = load_structured(path)
    if not isinstance(doc, list):
        raise DatasetParseError(f"{path}: detection dump must be a list")
    out = []
    for i, entry in enumerate(doc):
        try:
            out.append(Detection.from_dict(entry))
        except (KeyError, TypeError) as exc:
            key = exc.args[0] if isinstance(exc, KeyError) else exc
            raise DatasetParseError(f"{path}: detections[{i}] missing or invalid {key!r}") from None
    return out


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(load_structured(path))


def format_value(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cols = [list(col) for col in zip(headers, *rows)]
    widths = [max(len(cell) for cell in col) for col in cols]
    lines = []
    for row in (headers, *rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_report_table(report: EvalReport) -> str:
    blocks = []
    for t in report.thresholds:
        tk = _tkey(t)
        headers = ["domain", "images", "objects"]
        headers += [f"AP[{c}]" for c in report.class_ids] + ["mAP"]
        rows = []
        full_row = ["full", str(sum(c["images"] for c in report.counts.values())),
                    str(sum(c["objects"] for c in report.counts.values()))]
        full_row += [format_value(report.ap_full(t, c)) for c in report.class_ids]
        full_row.append(format_value(report.map_full(t)))
        rows.append(full_row)
        for dom in report.domains:
            row = [dom, str(report.counts[dom]["images"]), str(report.counts[dom]["objects"])]
            row += [format_value(report.domain_ap(t, dom, c)) for c in report.class_ids]
            row.append(format_value(report.domain_map(t, dom)))
            rows.append(row)
        if report.domains:
            avg_row = ["average (by domain)", "", ""]
            avg_row += [format_value(report.domain_average_ap(t, c)) for c in report.class_ids]
            avg_row.append(format_value(report.domain_average(t)))
            rows.append(avg_row)
        block = f"IoU threshold {tk}\n" + render_table(headers, rows)
        if report.excluded_domains:
            block += ("excluded from the average (no objects): "
                      + ", ".join(report.excluded_domains) + "\n")
        blocks.append(block)
    return "\n".join(blocks)


def _render_plots(report: EvalReport, out_dir: Path, basename: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for t in report.thresholds:
        tk = _tkey(t)
        fig, ax = plt.subplots(figsize=(5, 4))
        for cls in report.class_ids:
            curve = report.curves.get(tk, {}).get(str(cls), {})
            if curve.get("recall"):
                ax.plot([0.0] + curve["recall"], [1.0] + curve["precision"],
                        drawstyle="steps-post", label=f"class {cls}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"precision-recall at IoU {tk}")
        ax.legend(loc="lower left", fontsize=8)
        path = out_dir / f"{basename}_pr_{tk.replace('.', '_')}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        files.append(path)

        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(report.domains) + 2), 4))
        values = [report.domain_map(t, dom) for dom in report.domains]
        heights = [0.0 if v is None else v for v in values]
        ax.bar(range(len(report.domains)), heights, color="#4878a8")
        full = report.map_full(t)
        avg = report.domain_average(t)
        if full is not None:
            ax.axhline(full, color="#333333", linestyle="--", linewidth=1, label="full set")
        if avg is not None:
            ax.axhline(avg, color="#a84848", linestyle=":", linewidth=1.2, label="domain average")
        ax.set_xticks(range(len(report.domains)))
        ax.set_xticklabels(report.domains, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(f"mAP at IoU {tk}")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{basename}_domains_{tk.replace('.', '_')}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        files.append(path)
    return files


def emit_report(report: EvalReport, out_dir, plots: bool = False,
                basename: str = "report") -> dict:
    """Write the machine-readable report plus a human table; plots on request."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{basename}.json", "table": out_dir / f"{basename}.txt"}
    dump_json(report.to_dict(), paths["json"])
    paths["table"].write_text(render_report_table(report))
    if plots:
        paths["plots"] = _render_plots(report, out_dir, basename)
    return paths
