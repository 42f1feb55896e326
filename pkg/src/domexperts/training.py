"""Two-phase training: pooled pretraining, split, freeze, per-domain experts.

Phase 1 trains a monolithic detector on all images with plain SGD. The model
is then split at the configured stage, the shared stages are frozen, and
phase 2 fine-tunes each branch only on images whose metadata routes to it.
Because the shared stages no longer move, every branch trains on cached
shared features, which reproduces full-input gradients bit-for-bit.

Budget fairness is explicit. A baseline consumes
``(epochs_pretrain + epochs_expert) * ceil(N / batch)`` gradient steps; in
``matched_total`` mode the expert run consumes exactly the same total, with
the expert phase partitioned across domains proportionally to their image
counts. ``matched_per_expert`` instead grants every branch the full expert
budget. Planned and consumed counts are both recorded and cross-checked.

Everything is deterministic given (dataset, config): the pooled phase and
each branch draw from their own seeded streams, so branch results do not
depend on the order branches are trained in.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .detector import (
    AnchorConfig,
    DetectorParams,
    StageSpec,
    compute_loss,
    init_params,
    stage_tensor_names,
)
from .errors import InvalidInputError, TrainingDivergenceError
from .evaluation import EvalReport, format_value, render_table
from .experts import ExpertDetector, freeze_shared, shared_forward, split_model
from .schema import DomainKey, DomainSchema, bin_metadata, enumerate_keys
from .scenes import allocate_quota

logger = logging.getLogger(__name__)

EXPERT_INITS = ("clone", "reinit")
BUDGET_MODES = ("matched_total", "matched_per_expert")

# Callback invoked once per gradient step with (phase, domain, image ids);
# lets callers audit exactly which images fed which parameters.
BatchHook = Callable[[str, str, tuple], None]


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 4
    epochs_expert: int = 4
    batch_size: int = 8
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    seed: int = 0
    expert_init: str = "clone"
    budget_mode: str = "matched_total"
    balanced_sampling: bool = False

    def __post_init__(self):
        if self.epochs_pretrain < 1:
            raise InvalidInputError("epochs_pretrain must be at least 1")
        if self.epochs_expert < 0:
            raise InvalidInputError("epochs_expert must be nonnegative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr_decay must lie in (0, 1]")
        if self.lr_decay_every < 0:
            raise InvalidInputError("lr_decay_every must be nonnegative")
        if self.expert_init not in EXPERT_INITS:
            raise InvalidInputError(f"expert_init must be one of {EXPERT_INITS}")
        if self.budget_mode not in BUDGET_MODES:
            raise InvalidInputError(f"budget_mode must be one of {BUDGET_MODES}")

    def to_dict(self) -> dict:
        return {
            "epochs_pretrain": self.epochs_pretrain,
            "epochs_expert": self.epochs_expert,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every,
            "seed": self.seed,
            "expert_init": self.expert_init,
            "budget_mode": self.budget_mode,
            "balanced_sampling": self.balanced_sampling,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown training config fields {sorted(unknown)}")
        try:
            return cls(**known)
        except TypeError as exc:
            raise InvalidInputError(f"bad training config: {exc}") from exc


@dataclass
class RunRecord:
    """Everything needed to audit or replay one training run."""

    kind: str                      # "baseline" or "experts"
    model_name: str
    config: dict
    seed: int
    pooled_losses: list[float] = field(default_factory=list)
    domain_losses: dict[str, list[float]] = field(default_factory=dict)
    step_counts: dict[str, int] = field(default_factory=dict)
    images_seen: dict[str, int] = field(default_factory=dict)
    planned: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    dataset_digest: str | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_name": self.model_name,
            "config": dict(self.config),
            "seed": self.seed,
            "pooled_losses": list(self.pooled_losses),
            "domain_losses": {k: list(v) for k, v in self.domain_losses.items()},
            "step_counts": dict(self.step_counts),
            "images_seen": dict(self.images_seen),
            "planned": dict(self.planned),
            "wall_clock_s": self.wall_clock_s,
            "dataset_digest": self.dataset_digest,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunRecord":
        return cls(**{f: doc[f] for f in cls.__dataclass_fields__ if f in doc})


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    """Gradient steps in one pass: the last partial batch counts."""
    return math.ceil(n_images / batch_size)


def plan_budget(config: TrainConfig, n_images: int,
                domain_counts: Mapping[DomainKey, int]) -> dict:
    """Per-phase gradient-step budgets, exact by construction.

    Domains without images get zero steps in either mode (there is nothing
    to train on); in matched_total mode the pretrain steps plus the summed
    expert steps equal the baseline budget exactly.
    """
    if n_images < 1:
        raise InvalidInputError("budget planning needs a nonempty dataset")
    if sum(domain_counts.values()) != n_images:
        raise InvalidInputError(
            f"domain counts sum to {sum(domain_counts.values())}, dataset has {n_images}")
    spe = steps_per_epoch(n_images, config.batch_size)
    pretrain = config.epochs_pretrain * spe
    expert_total = config.epochs_expert * spe
    keys = sorted(domain_counts)
    if config.budget_mode == "matched_total":
        shares = allocate_quota(expert_total,
                                [domain_counts[k] / n_images for k in keys])
        expert_steps = {str(k): s for k, s in zip(keys, shares)}
    else:
        expert_steps = {str(k): expert_total if domain_counts[k] else 0
                        for k in keys}
    return {
        "steps_per_epoch": spe,
        "pretrain_steps": pretrain,
        "baseline_steps": pretrain + expert_total,
        "expert_steps": expert_steps,
        "budget_mode": config.budget_mode,
    }


def _stack_dataset(dataset):
    if not dataset.records:
        raise InvalidInputError("training needs at least one image")
    images = np.stack([rec.image for rec in dataset.records])
    boxes = [[ann.bbox for ann in rec.annotations] for rec in dataset.records]
    classes = [[ann.category_id for ann in rec.annotations] for rec in dataset.records]
    ids = [rec.image_id for rec in dataset.records]
    return images, boxes, classes, ids


def _lr_at(config: TrainConfig, completed_passes: int) -> float:
    if config.lr_decay_every <= 0 or config.lr_decay == 1.0:
        return config.learning_rate
    return config.learning_rate * config.lr_decay ** (
        completed_passes // config.lr_decay_every)


def _apply(params: DetectorParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
    for name, grad in grads.items():
        if name in params.frozen:
            continue
        params.tensors[name] -= lr * grad


def _epoch_order(rng: np.random.Generator, n: int, groups=None) -> np.ndarray:
    """Shuffled index order; with groups, domains are drawn uniformly first."""
    if groups is None:
        return rng.permutation(n)
    pools = [np.asarray(idx) for idx in groups.values() if len(idx)]
    picks = rng.integers(0, len(pools), size=n)
    return np.array([pools[p][rng.integers(0, len(pools[p]))] for p in picks])


def _train_pooled(params, images, boxes, classes, ids, epochs, config,
                  phase: str, on_batch: BatchHook | None, groups=None):
    """SGD over the pooled set; returns (per-epoch mean losses, steps taken)."""
    n = len(ids)
    rng = np.random.default_rng((config.seed, 1))
    losses = []
    step = 0
    for epoch in range(epochs):
        lr = _lr_at(config, epoch)
        order = _epoch_order(rng, n, groups if config.balanced_sampling else None)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    parts, grads = compute_loss(
                        params, images[sel], [boxes[i] for i in sel],
                        [classes[i] for i in sel])
                    _apply(params, grads, lr)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(epoch=epoch, step=step) from exc
            epoch_losses.append(parts.total)
            step += 1
            if on_batch is not None:
                on_batch(phase, "pooled", tuple(ids[i] for i in sel))
        losses.append(float(np.mean(epoch_losses)))
    return losses, step


def train_baseline(dataset, spec: StageSpec, anchors: AnchorConfig,
                   config: TrainConfig, on_batch: BatchHook | None = None):
    """Domain-agnostic training on all images for the full fairness budget."""
    t0 = time.perf_counter()
    images, boxes, classes, ids = _stack_dataset(dataset)
    params = init_params(spec, anchors, (config.seed, 0))
    epochs = config.epochs_pretrain + config.epochs_expert
    losses, steps = _train_pooled(params, images, boxes, classes, ids,
                                  epochs, config, "baseline", on_batch)
    spe = steps_per_epoch(len(ids), config.batch_size)
    record = RunRecord(
        kind="baseline", model_name="baseline", config=config.to_dict(),
        seed=config.seed, pooled_losses=losses,
        step_counts={"total": steps},
        images_seen={"pooled": steps_images(steps, len(ids), config.batch_size)},
        planned={"baseline_steps": epochs * spe, "steps_per_epoch": spe},
        wall_clock_s=time.perf_counter() - t0)
    assert steps == epochs * spe
    return params, record


def steps_images(steps: int, n: int, batch: int) -> int:
    """Images consumed by ``steps`` sequential batches over ``n`` images."""
    spe = steps_per_epoch(n, batch)
    full_passes, rest = divmod(steps, spe)
    consumed = full_passes * n
    consumed += min(rest * batch, n)
    return consumed


def _train_branch(branch, split_stage, feats, boxes, classes, ids, steps,
                  config, domain_index, domain, on_batch: BatchHook | None):
    """Fine-tune one branch on cached shared features for a step budget."""
    n = len(ids)
    rng = np.random.default_rng((config.seed, 2, domain_index))
    losses = []
    done = 0
    consumed = 0
    passes = 0
    while done < steps:
        lr = _lr_at(config, config.epochs_pretrain + passes)
        order = rng.permutation(n)
        pass_losses = []
        for start in range(0, n, config.batch_size):
            if done >= steps:
                break
            sel = order[start:start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    parts, grads = compute_loss(
                        branch, feats[sel], [boxes[i] for i in sel],
                        [classes[i] for i in sel], from_stage=split_stage)
                    _apply(branch, grads, lr)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(epoch=passes, step=done) from exc
            pass_losses.append(parts.total)
            done += 1
            consumed += len(sel)
            if on_batch is not None:
                on_batch("expert", domain, tuple(ids[i] for i in sel))
        passes += 1
        if pass_losses:
            losses.append(float(np.mean(pass_losses)))
    return losses, done, consumed


def train_experts(dataset, spec: StageSpec, anchors: AnchorConfig,
                  schema: DomainSchema, split_stage: int, config: TrainConfig,
                  on_batch: BatchHook | None = None):
    """Pooled pretrain, split at ``split_stage``, freeze, per-domain tune.

    Every image must bin under the schema before any training starts. Empty
    domains keep their post-split initialization (a warning is logged) and
    remain routable. Returns (ExpertDetector, RunRecord).
    """
    t0 = time.perf_counter()
    images, boxes, classes, ids = _stack_dataset(dataset)
    keys = [bin_metadata(rec.metadata, schema) for rec in dataset.records]

    params = init_params(spec, anchors, (config.seed, 0))
    groups: dict[DomainKey, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    pooled_losses, pre_steps = _train_pooled(
        params, images, boxes, classes, ids, config.epochs_pretrain, config,
        "pretrain", on_batch, groups)

    model = split_model(params, schema, split_stage)
    freeze_shared(model)

    all_keys = enumerate_keys(schema)
    counts = {k: len(groups.get(k, [])) for k in all_keys}
    plan = plan_budget(config, len(ids), counts)

    step_counts = {"pretrain": pre_steps}
    images_seen: dict[str, int] = {}
    domain_losses: dict[str, list[float]] = {}
    for domain_index, key in enumerate(all_keys):
        branch = model.branches[key]
        if config.expert_init == "reinit":
            fresh = init_params(spec, anchors, (config.seed, 3, domain_index))
            for name in branch.tensors:
                branch.tensors[name] = fresh.tensors[name]
        idx = groups.get(key, [])
        budget = plan["expert_steps"][str(key)]
        if not idx:
            logger.warning("domain %s has no training images; its branch keeps "
                           "the pretrained initialization", key)
            step_counts[str(key)] = 0
            continue
        feats = shared_forward(model, images[idx])
        losses, done, consumed = _train_branch(
            branch, split_stage, feats, [boxes[i] for i in idx],
            [classes[i] for i in idx], [ids[i] for i in idx], budget, config,
            domain_index, str(key), on_batch)
        step_counts[str(key)] = done
        images_seen[str(key)] = consumed
        domain_losses[str(key)] = losses

    expert_steps = sum(step_counts[str(k)] for k in all_keys)
    for k in all_keys:
        assert step_counts[str(k)] == plan["expert_steps"][str(k)]
    if config.budget_mode == "matched_total":
        assert pre_steps + expert_steps == plan["baseline_steps"]

    record = RunRecord(
        kind="experts", model_name=model.name, config=config.to_dict(),
        seed=config.seed, pooled_losses=pooled_losses,
        domain_losses=domain_losses, step_counts=step_counts,
        images_seen=images_seen, planned=plan,
        wall_clock_s=time.perf_counter() - t0)
    return model, record


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonEntry:
    name: str
    report: EvalReport
    dataset_digest: str | None = None


def compare_runs(entries: Sequence[ComparisonEntry], baseline: str | None = None,
                 threshold: float | None = None) -> tuple[str, list[dict]]:
    """Side-by-side table of evaluation reports.

    Columns are the domain APs, the overall AP, the domain average, and
    deltas against the designated baseline row (the first entry by default).
    All reports must describe the same test set: digests, domain labels and
    thresholds have to agree.
    """
    if not entries:
        raise InvalidInputError("comparison needs at least one report")
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"duplicate run names in comparison: {names}")
    digests = {e.dataset_digest for e in entries if e.dataset_digest is not None}
    if len(digests) > 1:
        raise InvalidInputError(
            "reports were evaluated on different test sets; refusing to compare")
    domains = list(entries[0].report.domains)
    for e in entries[1:]:
        if list(e.report.domains) != domains:
            raise InvalidInputError(
                f"run {e.name!r} covers domains {list(e.report.domains)}, "
                f"expected {domains}")
    if threshold is None:
        threshold = entries[0].report.thresholds[0]
    for e in entries:
        if not any(math.isclose(t, threshold) for t in e.report.thresholds):
            raise InvalidInputError(
                f"run {e.name!r} was not evaluated at IoU {threshold}")
    baseline = baseline if baseline is not None else entries[0].name
    if baseline not in names:
        raise InvalidInputError(f"baseline row {baseline!r} is not among {names}")

    rows = []
    for e in entries:
        rows.append({
            "name": e.name,
            "per_domain": {d: e.report.domain_map(threshold, d) for d in domains},
            "overall": e.report.map_full(threshold),
            "average": e.report.domain_average(threshold),
        })
    base_row = next(r for r in rows if r["name"] == baseline)

    def delta(a, b):
        return None if a is None or b is None else a - b

    for r in rows:
        r["delta_overall"] = delta(r["overall"], base_row["overall"])
        r["delta_average"] = delta(r["average"], base_row["average"])

    headers = ["model", *domains, "overall", "average", "d overall", "d average"]
    text_rows = []
    for r in rows:
        text_rows.append([
            r["name"],
            *[format_value(r["per_domain"][d]) for d in domains],
            format_value(r["overall"]),
            format_value(r["average"]),
            _signed(r["delta_overall"]),
            _signed(r["delta_average"]),
        ])
    table = render_table(headers, text_rows)
    table += f"\n(IoU {threshold:g}; deltas vs {baseline})\n"
    return table, rows


def _signed(v) -> str:
    return "n/a" if v is None else f"{v:+.4f}"
