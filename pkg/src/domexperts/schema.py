"""Domain schemas: declarative binning of sensor metadata into discrete keys.

A schema is an ordered list of dimensions. Each dimension reads one metadata
field (flight altitude, gimbal pitch, capture time) and maps it to a label
from a fixed list, either by numeric binning or by a categorical predicate.
The tuple of per-dimension labels is the image's domain key, which selects
the expert branch at train and test time.

Binning conventions (stated here so tests are unambiguous):
  * bins are half-open [edge_i, edge_{i+1}), the last bin is right-closed;
  * a value sitting exactly on an interior edge belongs to the higher bin;
  * out-of-range values clamp to the first/last bin, so every finite reading
    routes to some expert.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InvalidInputError, SchemaMismatchError
from .fileio import dump_json, load_structured

KIND_EQUIDISTANT = "equidistant_bins"
KIND_EDGES = "explicit_edges"
KIND_CATEGORICAL = "categorical"

# Metadata fields a dimension may read.
FIELD_ALTITUDE = "altitude_m"
FIELD_PITCH = "gimbal_pitch_deg"
FIELD_TIME = "timestamp"

DEFAULT_BIRD_PITCH_DEG = 60.0
DEFAULT_DAY_HOURS = (7.0, 19.0)

_LABEL_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass(frozen=True)
class MetadataRecord:
    """Per-image sensor readings. Fields a schema does not reference may be None."""

    altitude_m: float | None = None
    gimbal_pitch_deg: float | None = None
    timestamp: float | None = None
    night: bool | None = None
    gps: tuple[float, float] | None = None
    speed_mps: float | None = None

    def __post_init__(self):
        if self.altitude_m is not None:
            if not math.isfinite(self.altitude_m) or self.altitude_m < 0:
                raise InvalidInputError(f"altitude_m must be finite and >= 0, got {self.altitude_m}")
        if self.gimbal_pitch_deg is not None:
            if not math.isfinite(self.gimbal_pitch_deg) or not 0 <= self.gimbal_pitch_deg <= 90:
                raise InvalidInputError(
                    f"gimbal_pitch_deg must be in [0, 90], got {self.gimbal_pitch_deg}"
                )

    def to_dict(self) -> dict:
        out = {
            "altitude_m": self.altitude_m,
            "gimbal_pitch_deg": self.gimbal_pitch_deg,
            "timestamp": self.timestamp,
            "night": self.night,
        }
        if self.gps is not None:
            out["gps"] = list(self.gps)
        if self.speed_mps is not None:
            out["speed_mps"] = self.speed_mps
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetadataRecord":
        gps = d.get("gps")
        return cls(
            altitude_m=d.get("altitude_m"),
            gimbal_pitch_deg=d.get("gimbal_pitch_deg"),
            timestamp=d.get("timestamp"),
            night=d.get("night"),
            gps=tuple(gps) if gps is not None else None,
            speed_mps=d.get("speed_mps"),
        )


@dataclass(frozen=True, order=True)
class DomainKey:
    """One label per schema dimension; the router's input."""

    labels: tuple[str, ...]

    def __str__(self) -> str:
        return "+".join(self.labels)

    @classmethod
    def parse(cls, text: str) -> "DomainKey":
        return cls(tuple(text.split("+")))


def _check_labels(labels: tuple[str, ...]):
    seen = set()
    for lab in labels:
        if not _LABEL_RE.match(lab):
            raise InvalidInputError(f"label {lab!r} contains characters outside [A-Za-z0-9_.-]")
        if lab in seen:
            raise InvalidInputError(f"duplicate label {lab!r}")
        seen.add(lab)


@dataclass(frozen=True)
class DomainDimension:
    """One axis of the domain grid.

    ``base_labels`` are the labels produced by the raw binning rule;
    ``grouping`` (set by :func:`fuse_labels`) maps them onto the public
    ``labels``. Without fusion the two label lists coincide.
    """

    name: str
    kind: str
    field_name: str
    base_labels: tuple[str, ...]
    labels: tuple[str, ...]
    lo: float | None = None
    hi: float | None = None
    n: int | None = None
    edges: tuple[float, ...] | None = None
    threshold: float | None = None
    day_hours: tuple[float, float] | None = None
    grouping: tuple[tuple[str, str], ...] | None = None

    def __post_init__(self):
        _check_labels(self.base_labels)
        _check_labels(self.labels)
        if self.kind in (KIND_EQUIDISTANT, KIND_EDGES):
            if self.edges is None or len(self.edges) < 2:
                raise InvalidInputError(f"dimension {self.name!r} needs at least two bin edges")
            diffs = np.diff(self.edges)
            if not np.all(diffs > 0):
                raise InvalidInputError(f"dimension {self.name!r} edges must be strictly increasing")
            if len(self.base_labels) != len(self.edges) - 1:
                raise InvalidInputError(
                    f"dimension {self.name!r}: {len(self.base_labels)} labels for "
                    f"{len(self.edges) - 1} bins"
                )
            if self.kind == KIND_EQUIDISTANT and (self.n is None or self.n < 1):
                raise InvalidInputError(f"equidistant dimension {self.name!r} needs n >= 1")
        elif self.kind == KIND_CATEGORICAL:
            if self.threshold is None and self.day_hours is None:
                raise InvalidInputError(
                    f"categorical dimension {self.name!r} needs a threshold or an hour window"
                )
            if len(self.base_labels) != 2:
                raise InvalidInputError(
                    f"categorical dimension {self.name!r} must carry exactly two base labels"
                )
        else:
            raise InvalidInputError(f"unknown dimension kind {self.kind!r}")
        if self.grouping is not None:
            mapping = dict(self.grouping)
            if set(mapping) != set(self.base_labels):
                raise InvalidInputError(
                    f"dimension {self.name!r}: grouping must cover every base label"
                )
            if tuple(dict.fromkeys(mapping[b] for b in self.base_labels)) != self.labels:
                raise InvalidInputError(f"dimension {self.name!r}: labels inconsistent with grouping")
        elif self.labels != self.base_labels:
            raise InvalidInputError(f"dimension {self.name!r}: labels differ without a grouping")

    # -- constructors ----------------------------------------------------

    @classmethod
    def equidistant(cls, name: str, field_name: str, lo: float, hi: float, n: int,
                    labels: tuple[str, ...] | None = None) -> "DomainDimension":
        if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
            raise InvalidInputError(f"equidistant dimension {name!r} needs finite lo < hi")
        if n < 1:
            raise InvalidInputError(f"equidistant dimension {name!r} needs n >= 1")
        edges = tuple(lo + (hi - lo) * i / n for i in range(n))
        edges = edges + (hi,)
        labels = labels or tuple(f"bin{i}" for i in range(n))
        return cls(name=name, kind=KIND_EQUIDISTANT, field_name=field_name,
                   base_labels=tuple(labels), labels=tuple(labels),
                   lo=lo, hi=hi, n=n, edges=edges)

    @classmethod
    def from_edges(cls, name: str, field_name: str, edges: tuple[float, ...],
                   labels: tuple[str, ...] | None = None) -> "DomainDimension":
        labels = labels or tuple(f"bin{i}" for i in range(len(edges) - 1))
        return cls(name=name, kind=KIND_EDGES, field_name=field_name,
                   base_labels=tuple(labels), labels=tuple(labels), edges=tuple(edges))

    @classmethod
    def pitch_split(cls, name: str = "angle", threshold: float = DEFAULT_BIRD_PITCH_DEG,
                    labels: tuple[str, str] = ("acute", "bird")) -> "DomainDimension":
        """Below the threshold -> first label, at or above -> second label."""
        return cls(name=name, kind=KIND_CATEGORICAL, field_name=FIELD_PITCH,
                   base_labels=tuple(labels), labels=tuple(labels), threshold=threshold)

    @classmethod
    def day_night(cls, name: str = "time", day_hours: tuple[float, float] = DEFAULT_DAY_HOURS,
                  labels: tuple[str, str] = ("day", "night")) -> "DomainDimension":
        """Hour in [day_hours) -> first label; the explicit night flag overrides."""
        return cls(name=name, kind=KIND_CATEGORICAL, field_name=FIELD_TIME,
                   base_labels=tuple(labels), labels=tuple(labels), day_hours=tuple(day_hours))

    # -- binning ---------------------------------------------------------

    def _raw_value(self, meta: MetadataRecord) -> float:
        if self.field_name == FIELD_ALTITUDE:
            if meta.altitude_m is None:
                raise SchemaMismatchError(FIELD_ALTITUDE)
            return meta.altitude_m
        if self.field_name == FIELD_PITCH:
            if meta.gimbal_pitch_deg is None:
                raise SchemaMismatchError(FIELD_PITCH)
            return meta.gimbal_pitch_deg
        raise InvalidInputError(f"dimension {self.name!r} reads unsupported field {self.field_name!r}")

    def _base_label(self, meta: MetadataRecord) -> str:
        if self.kind in (KIND_EQUIDISTANT, KIND_EDGES):
            return self._bin_base_label(self._raw_value(meta))
        if self.day_hours is not None:
            if meta.night is not None:
                return self.base_labels[1] if meta.night else self.base_labels[0]
            if meta.timestamp is None:
                raise SchemaMismatchError(FIELD_TIME)
            hour = (meta.timestamp % 86400.0) / 3600.0
            is_day = self.day_hours[0] <= hour < self.day_hours[1]
            return self.base_labels[0] if is_day else self.base_labels[1]
        value = self._raw_value(meta)
        return self.base_labels[1] if value >= self.threshold else self.base_labels[0]

    def _bin_base_label(self, value: float) -> str:
        if not math.isfinite(value):
            raise InvalidInputError(f"cannot bin non-finite value {value!r}")
        idx = int(np.searchsorted(self.edges, value, side="right")) - 1
        idx = min(max(idx, 0), len(self.base_labels) - 1)
        return self.base_labels[idx]

    def label_for(self, meta: MetadataRecord) -> str:
        base = self._base_label(meta)
        if self.grouping is None:
            return base
        return dict(self.grouping)[base]


@dataclass(frozen=True)
class DomainSchema:
    """Ordered dimensions; the key space is their label product."""

    dimensions: tuple[DomainDimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if len(names) != len(set(names)):
            raise InvalidInputError(f"dimension names must be unique, got {names}")
        if not self.dimensions:
            raise InvalidInputError("schema needs at least one dimension")

    @property
    def key_space_size(self) -> int:
        size = 1
        for d in self.dimensions:
            size *= len(d.labels)
        return size

    @property
    def dimension_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def key_of(self, meta: MetadataRecord) -> DomainKey:
        return bin_metadata(meta, self)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def bin_value(value: float, dim: DomainDimension) -> str:
    """Label of the bin containing ``value`` for a numeric dimension."""
    if dim.kind not in (KIND_EQUIDISTANT, KIND_EDGES):
        raise InvalidInputError(f"bin_value needs a binned dimension, got kind {dim.kind!r}")
    if value is None or not math.isfinite(value):
        raise InvalidInputError(f"cannot bin non-finite value {value!r}")
    base = dim._bin_base_label(float(value))
    if dim.grouping is None:
        return base
    return dict(dim.grouping)[base]


def bin_metadata(meta: MetadataRecord, schema: DomainSchema) -> DomainKey:
    """Deterministic per-dimension labels for one metadata record."""
    return DomainKey(tuple(dim.label_for(meta) for dim in schema.dimensions))


def enumerate_keys(schema: DomainSchema) -> list[DomainKey]:
    """All keys in lexicographic dimension order."""
    return [DomainKey(labels) for labels in product(*(d.labels for d in schema.dimensions))]


def fuse_labels(dim: DomainDimension, groups: Mapping[str, str]) -> DomainDimension:
    """Compose the dimension's binning with a label grouping.

    ``groups`` must cover every current label. New labels are ordered by
    first appearance over the current label order.
    """
    missing = [lab for lab in dim.labels if lab not in groups]
    if missing:
        raise InvalidInputError(f"grouping does not cover labels {missing}")
    # Compose with any existing grouping so fusions chain.
    if dim.grouping is None:
        composed = tuple((b, groups[b]) for b in dim.base_labels)
    else:
        old = dict(dim.grouping)
        composed = tuple((b, groups[old[b]]) for b in dim.base_labels)
    new_labels = tuple(dict.fromkeys(new for _, new in composed))
    _check_labels(new_labels)
    return replace(dim, labels=new_labels, grouping=composed)


# ---------------------------------------------------------------------------
# Config file format
# ---------------------------------------------------------------------------

_FIELD_ALIASES = {
    "altitude": FIELD_ALTITUDE,
    "altitude_m": FIELD_ALTITUDE,
    "pitch": FIELD_PITCH,
    "angle": FIELD_PITCH,
    "gimbal_pitch": FIELD_PITCH,
    "gimbal_pitch_deg": FIELD_PITCH,
    "time": FIELD_TIME,
    "timestamp": FIELD_TIME,
}


def _dim_from_config(entry: Mapping) -> DomainDimension:
    try:
        name = entry["name"]
        kind = entry["kind"]
    except KeyError as exc:
        raise InvalidInputError(f"schema dimension entry missing key {exc}") from None
    labels = tuple(entry["labels"]) if "labels" in entry else None
    if kind == KIND_EQUIDISTANT:
        field_name = _FIELD_ALIASES.get(entry.get("field", name))
        if field_name is None:
            raise InvalidInputError(f"dimension {name!r}: unknown field {entry.get('field', name)!r}")
        return DomainDimension.equidistant(name, field_name, float(entry["lo"]),
                                           float(entry["hi"]), int(entry["n"]), labels)
    if kind == KIND_EDGES:
        field_name = _FIELD_ALIASES.get(entry.get("field", name))
        if field_name is None:
            raise InvalidInputError(f"dimension {name!r}: unknown field {entry.get('field', name)!r}")
        return DomainDimension.from_edges(name, field_name, tuple(float(e) for e in entry["edges"]),
                                          labels)
    if kind == KIND_CATEGORICAL:
        pred = entry.get("predicate", {})
        field_name = _FIELD_ALIASES.get(pred.get("field", name))
        if field_name == FIELD_TIME or "hours" in pred:
            hours = tuple(float(h) for h in pred.get("hours", DEFAULT_DAY_HOURS))
            return DomainDimension.day_night(name, hours, labels or ("day", "night"))
        if field_name == FIELD_PITCH:
            threshold = float(pred.get("threshold", DEFAULT_BIRD_PITCH_DEG))
            return DomainDimension.pitch_split(name, threshold, labels or ("acute", "bird"))
        raise InvalidInputError(f"dimension {name!r}: categorical predicate needs a known field")
    raise InvalidInputError(f"dimension {name!r}: unknown kind {kind!r}")


def schema_from_dict(doc: Mapping) -> DomainSchema:
    if not isinstance(doc, Mapping) or "dimensions" not in doc:
        raise InvalidInputError("schema config must contain a 'dimensions' list")
    dims = [_dim_from_config(entry) for entry in doc["dimensions"]]
    by_name = {d.name: i for i, d in enumerate(dims)}
    for fusion in doc.get("fusions", []):
        target = fusion.get("dimension")
        if target not in by_name:
            raise InvalidInputError(f"fusion references unknown dimension {target!r}")
        idx = by_name[target]
        dims[idx] = fuse_labels(dims[idx], dict(fusion["groups"]))
    return DomainSchema(tuple(dims))


def schema_to_dict(schema: DomainSchema) -> dict:
    doc: dict = {"dimensions": [], "fusions": []}
    for d in schema.dimensions:
        entry: dict = {"name": d.name, "kind": d.kind, "field": d.field_name,
                       "labels": list(d.base_labels)}
        if d.kind == KIND_EQUIDISTANT:
            entry.update(lo=d.lo, hi=d.hi, n=d.n)
        elif d.kind == KIND_EDGES:
            entry.update(edges=list(d.edges))
        else:
            pred: dict = {"field": d.field_name}
            if d.threshold is not None:
                pred["threshold"] = d.threshold
            if d.day_hours is not None:
                pred["hours"] = list(d.day_hours)
            entry["predicate"] = pred
        doc["dimensions"].append(entry)
        if d.grouping is not None:
            doc["fusions"].append({"dimension": d.name, "groups": dict(d.grouping)})
    if not doc["fusions"]:
        del doc["fusions"]
    return doc


def load_schema(path: str | Path) -> DomainSchema:
    return schema_from_dict(load_structured(path))


def save_schema(schema: DomainSchema, path: str | Path) -> None:
    dump_json(schema_to_dict(schema), path)
