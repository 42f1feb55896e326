"""Command-line interface: data generation, training, evaluation, comparison.

Batch workflows only; every command is driven by flags or a manifest file and
writes its results to disk. Exit codes are part of the contract:

    0   success
    2   invalid input (bad flags, malformed or missing files, schema errors)
    3   runtime failure (training divergence and other mid-run errors)

A training manifest is a JSON or YAML document; all paths inside it are
resolved relative to the manifest's own directory::

    {
      "out_dir": "runs",
      "dataset": {"path": "data",
                  "generate": {"spec": "scene.json", "n_train": 600,
                               "n_test": 150, "balance": "balanced"}},
      "schema": "schema.json",
      "model": {"stages": {"stage_count": 3, "channels": [4, 6, 8],
                           "in_channels": 1},
                "anchors": {"sizes": [6.0, 16.0], "class_count": 1}},
      "train": {"epochs_pretrain": 4, "epochs_expert": 4, "batch_size": 8,
                "learning_rate": 0.05, "seed": 0},
      "runs": [{"name": "baseline", "kind": "baseline"},
               {"name": "altitude@2", "kind": "experts", "split_stage": 2}]
    }

``dataset`` may instead point at existing splits: {"train": ..., "test": ...}.
Runs may override ``seed``, and expert runs may override ``schema``. Finished
runs (checkpoint plus record present) are skipped on rerun, so an interrupted
manifest resumes where it stopped. Every output file carries the digest of
the manifest and dataset that produced it.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .detector import (
    AnchorConfig,
    StageSpec,
    decode_detections,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    DatasetParseError,
    DomExpertsError,
    InvalidInputError,
    SchemaMismatchError,
)
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruthBox,
    GroundTruthSet,
    evaluate,
    ground_truth_of,
    load_detections,
    render_report_table,
    render_table,
    save_detections,
    _render_plots,
)
from .experts import detect_dataset, load_model, save_model
from .fileio import (
    dump_json,
    load_structured,
    output_lock,
    read_archive,
    resolve_workers,
    sha256_bytes,
)
from .scenes import SceneSpec, dataset_digest, generate_dataset, load_dataset
from .schema import (
    DomainDimension,
    DomainKey,
    DomainSchema,
    bin_metadata,
    enumerate_keys,
    load_schema,
    schema_from_dict,
)
from .training import (
    ComparisonEntry,
    TrainConfig,
    compare_runs,
    plan_budget,
    train_baseline,
    train_experts,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

_INPUT_ERRORS = (InvalidInputError, SchemaMismatchError, DatasetParseError,
                 CheckpointError, FileNotFoundError)

# Object share per altitude cell loosely imitating UAVDT's skew, where the
# lowest band dominates the dataset.
_PRESETS = {"uavdt-like": (0.75, 0.15, 0.10)}

_FPS_DISCLAIMER = ("wall-clock observation only; the asserted invariant is the "
                   "constant per-image op count, not speed")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DomExpertsError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domexperts",
        description="Domain-expert detectors: synthetic data, two-phase "
                    "training, stratified evaluation.",
        epilog="exit codes: 0 success, 2 invalid input, 3 runtime failure")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic train/test dataset")
    g.add_argument("--spec", help="scene spec file (JSON/YAML); defaults apply if omitted")
    g.add_argument("--out", required=True, help="dataset root; train/ and test/ go here")
    g.add_argument("--n-train", type=int, default=600)
    g.add_argument("--n-test", type=int, default=150)
    g.add_argument("--balance", choices=["balanced", "imbalanced"], default="balanced")
    g.add_argument("--weights", help="comma-separated cell weights for imbalanced mode")
    g.add_argument("--preset", choices=sorted(_PRESETS),
                   help="named imbalance preset (overrides --balance/--weights)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run every training job in a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--dry-run", action="store_true",
                   help="print planned gradient-step budgets and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or detection dump")
    e.add_argument("--model", help="detector or expert-model checkpoint")
    e.add_argument("--detections", help="detection dump to score instead of a model")
    e.add_argument("--dataset", required=True, help="annotated dataset directory")
    e.add_argument("--schema", help="domain schema for stratification "
                                    "(defaults to an expert model's own)")
    e.add_argument("--thresholds", default="0.5", help="comma-separated IoU thresholds")
    e.add_argument("--score-threshold", type=float, default=0.05)
    e.add_argument("--nms-iou", type=float, default=0.5)
    e.add_argument("--out", required=True)
    e.add_argument("--name", help="run name recorded in the report")
    e.add_argument("--no-per-domain", action="store_true",
                   help="skip stratification; domain rows and averages are "
                        "omitted entirely rather than reported as zero")
    e.add_argument("--plots", action="store_true")
    e.add_argument("--manifest", help="manifest whose digest to stamp into the report")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate evaluation reports side by side")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--baseline", help="row to take deltas against (default: first)")
    c.add_argument("--threshold", type=float, help="IoU threshold to tabulate")
    c.add_argument("--out", help="directory for comparison.txt/.json and plots")
    c.add_argument("--plots", action="store_true")
    c.set_defaults(func=cmd_compare)
    return parser


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _generator_schema(spec: SceneSpec) -> DomainSchema | None:
    """Schema matching the generator's balancing grid, for count reporting."""
    dims = []
    if spec.altitude_cells > 1:
        dims.append(DomainDimension.equidistant(
            "altitude", "altitude_m", spec.altitude_range[0],
            spec.altitude_range[1], spec.altitude_cells))
    if spec.pitch_cells > 1:
        dims.append(DomainDimension.equidistant(
            "pitch", "gimbal_pitch_deg", spec.pitch_range[0],
            spec.pitch_range[1], spec.pitch_cells))
    if spec.time_mix > 0:
        dims.append(DomainDimension.day_night())
    return DomainSchema(tuple(dims)) if dims else None


def _split_counts(dataset, schema: DomainSchema) -> dict[str, tuple[int, int]]:
    counts: dict[str, tuple[int, int]] = {}
    for rec in dataset.records:
        key = str(bin_metadata(rec.metadata, schema))
        images, objects = counts.get(key, (0, 0))
        counts[key] = (images + 1, objects + len(rec.annotations))
    return counts


def cmd_gen_data(args) -> int:
    spec = SceneSpec.from_dict(load_structured(args.spec) if args.spec else {})
    balance, weights = args.balance, None
    if args.preset:
        weights = _PRESETS[args.preset]
        cells = spec.altitude_cells * spec.pitch_cells
        if cells != len(weights):
            raise InvalidInputError(
                f"preset {args.preset!r} defines {len(weights)} cell weights, "
                f"spec has {cells} cells")
        balance = "imbalanced"
    elif args.weights:
        weights = tuple(float(w) for w in args.weights.split(","))
        balance = "imbalanced"

    out = Path(args.out)
    with output_lock(out):
        paths = generate_dataset(spec, args.n_train, args.n_test, out,
                                 balance=balance, weights=weights)
    train = load_dataset(paths["train"])
    test = load_dataset(paths["test"])

    schema = _generator_schema(spec)
    if schema is not None:
        train_counts = _split_counts(train, schema)
        test_counts = _split_counts(test, schema)
        label = "-".join(d.name for d in schema.dimensions)
        headers = [label, "train images", "train objects",
                   "test images", "test objects"]
        rows = []
        for key in enumerate_keys(schema):
            ti, to = train_counts.get(str(key), (0, 0))
            vi, vo = test_counts.get(str(key), (0, 0))
            rows.append([str(key), str(ti), str(to), str(vi), str(vo)])
        rows.append(["total", str(len(train.records)),
                     str(sum(len(r.annotations) for r in train.records)),
                     str(len(test.records)),
                     str(sum(len(r.annotations) for r in test.records))])
        print(render_table(headers, rows))
    else:
        print(f"{len(train.records)} train images, {len(test.records)} test images")
    for split in ("train", "test"):
        print(f"{split}: {paths[split]}  digest {dataset_digest(paths[split])[:16]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def _load_schema_ref(ref, base: Path) -> DomainSchema:
    if isinstance(ref, str):
        path = _resolve(base, ref)
        if not path.exists():
            raise InvalidInputError(f"schema file {path} does not exist")
        return load_schema(path)
    return schema_from_dict(ref)


def _load_manifest(path: Path) -> dict:
    if not path.exists():
        raise InvalidInputError(f"manifest {path} does not exist")
    doc = load_structured(path)
    base = path.parent
    for field_name in ("out_dir", "dataset", "model", "train", "runs"):
        if field_name not in doc:
            raise InvalidInputError(f"manifest lacks required field {field_name!r}")

    runs = doc["runs"]
    if not isinstance(runs, list) or not runs:
        raise InvalidInputError("manifest needs a nonempty 'runs' list")
    names = [r.get("name") for r in runs]
    if len(set(names)) != len(names) or any(not n for n in names):
        raise InvalidInputError(f"run names must be present and unique, got {names}")

    global_schema = None
    if "schema" in doc:
        global_schema = _load_schema_ref(doc["schema"], base)
    parsed_runs = []
    for run in runs:
        kind = run.get("kind")
        if kind not in ("baseline", "experts"):
            raise InvalidInputError(
                f"run {run.get('name')!r}: kind must be baseline or experts")
        schema = global_schema
        if "schema" in run:
            schema = _load_schema_ref(run["schema"], base)
        if kind == "experts":
            if schema is None:
                raise InvalidInputError(
                    f"run {run['name']!r} trains experts but no schema is given")
            if "split_stage" not in run:
                raise InvalidInputError(f"run {run['name']!r} needs a split_stage")
        parsed_runs.append({
            "name": run["name"], "kind": kind, "schema": schema,
            "split_stage": run.get("split_stage"), "seed": run.get("seed"),
        })

    dataset_cfg = doc["dataset"]
    if "generate" in dataset_cfg:
        gen = dataset_cfg["generate"]
        spec_ref = gen.get("spec", {})
        if isinstance(spec_ref, str):
            spec_path = _resolve(base, spec_ref)
            if not spec_path.exists():
                raise InvalidInputError(f"scene spec {spec_path} does not exist")
            scene = SceneSpec.from_dict(load_structured(spec_path))
        else:
            scene = SceneSpec.from_dict(spec_ref)
        dataset = {"mode": "generate", "scene": scene,
                   "root": _resolve(base, dataset_cfg.get("path", "data")),
                   "n_train": int(gen.get("n_train", 600)),
                   "n_test": int(gen.get("n_test", 150)),
                   "balance": gen.get("balance", "balanced"),
                   "weights": gen.get("weights")}
    else:
        for split in ("train", "test"):
            if split not in dataset_cfg:
                raise InvalidInputError(
                    "manifest dataset needs either 'generate' or train/test paths")
            if not _resolve(base, dataset_cfg[split]).exists():
                raise InvalidInputError(
                    f"dataset split {dataset_cfg[split]!r} does not exist")
        dataset = {"mode": "existing",
                   "train": _resolve(base, dataset_cfg["train"]),
                   "test": _resolve(base, dataset_cfg["test"])}

    return {
        "base": base,
        "out_dir": _resolve(base, doc["out_dir"]),
        "dataset": dataset,
        "spec": StageSpec.from_dict(doc["model"]["stages"]),
        "anchors": AnchorConfig.from_dict(doc["model"]["anchors"]),
        "train": TrainConfig.from_dict(doc["train"]),
        "runs": parsed_runs,
    }


def _ensure_dataset(plan: dict) -> tuple[Path, Path]:
    cfg = plan["dataset"]
    if cfg["mode"] == "existing":
        return cfg["train"], cfg["test"]
    root = cfg["root"]
    train_dir, test_dir = root / "train", root / "test"
    if train_dir.exists() and test_dir.exists():
        return train_dir, test_dir
    with output_lock(root):
        paths = generate_dataset(cfg["scene"], cfg["n_train"], cfg["n_test"],
                                 root, balance=cfg["balance"],
                                 weights=cfg["weights"])
    return paths["train"], paths["test"]


def _run_config(plan: dict, run: dict) -> TrainConfig:
    doc = plan["train"].to_dict()
    if run["seed"] is not None:
        doc["seed"] = int(run["seed"])
    return TrainConfig.from_dict(doc)


def _print_budgets(plan: dict, dataset) -> None:
    n = len(dataset.records)
    for run in plan["runs"]:
        config = _run_config(plan, run)
        if run["kind"] == "baseline":
            budget = plan_budget(config, n, {DomainKey(("all",)): n})
            print(f"run {run['name']}: baseline, {budget['baseline_steps']} steps "
                  f"({budget['steps_per_epoch']} steps/epoch)")
        else:
            counts: dict[DomainKey, int] = {
                k: 0 for k in enumerate_keys(run["schema"])}
            for rec in dataset.records:
                counts[bin_metadata(rec.metadata, run["schema"])] += 1
            budget = plan_budget(config, n, counts)
            detail = ", ".join(f"{k}: {v}" for k, v in budget["expert_steps"].items())
            print(f"run {run['name']}: experts@{run['split_stage']}, "
                  f"{budget['pretrain_steps']} pretrain steps + expert steps "
                  f"{{{detail}}} [{budget['budget_mode']}]")


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    plan = _load_manifest(manifest_path)
    manifest_digest = sha256_bytes(manifest_path.read_bytes())
    train_dir, test_dir = _ensure_dataset(plan)
    dataset = load_dataset(train_dir)
    train_digest = dataset_digest(train_dir)

    if args.dry_run:
        _print_budgets(plan, dataset)
        print(f"dry run: nothing trained (dataset at {train_dir.parent})")
        return EXIT_OK

    out_dir = plan["out_dir"]
    with output_lock(out_dir):
        for run in plan["runs"]:
            run_dir = out_dir / run["name"]
            ckpt_path = run_dir / "model.ckpt"
            record_path = run_dir / "record.json"
            if ckpt_path.exists() and record_path.exists():
                print(f"run {run['name']}: finished checkpoint found, "
                      f"skipping (resume)")
                continue
            run_dir.mkdir(parents=True, exist_ok=True)
            config = _run_config(plan, run)
            print(f"run {run['name']}: training ({run['kind']}, seed {config.seed})")
            try:
                if run["kind"] == "baseline":
                    params, record = train_baseline(dataset, plan["spec"],
                                                    plan["anchors"], config)
                    save_checkpoint(params, ckpt_path)
                else:
                    model, record = train_experts(
                        dataset, plan["spec"], plan["anchors"], run["schema"],
                        int(run["split_stage"]), config)
                    save_model(model, ckpt_path)
            except Exception:
                print(f"run {run['name']} failed during training", file=sys.stderr)
                raise
            record.checkpoint = str(ckpt_path)
            record.dataset_digest = train_digest
            dump_json({"manifest_digest": manifest_digest, **record.to_dict()},
                      record_path)
            print(f"run {run['name']}: done in {record.wall_clock_s:.1f}s "
                  f"-> {ckpt_path}")
    print(f"test split for evaluation: {test_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _checkpoint_kind(path: Path) -> str:
    if not path.exists():
        raise InvalidInputError(f"checkpoint {path} does not exist")
    entries = read_archive(path)
    if "format.json" not in entries:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    return json.loads(entries["format.json"]).get("kind", "")


def _detect_with_model(path: Path, kind: str, dataset, score_threshold: float,
                       nms_iou: float) -> tuple[list[Detection], DomainSchema | None, float]:
    """Detections in record order, the model's own schema, and elapsed time."""
    started = time.perf_counter()
    if kind == "experts":
        model = load_model(path)
        detections = detect_dataset(model, dataset, score_threshold, nms_iou)
        return detections, model.schema, time.perf_counter() - started
    params = load_checkpoint(path)

    def on_record(rec):
        return [Detection(image_id=rec.image_id, bbox=sb.bbox, score=sb.score,
                          category_id=sb.class_id)
                for sb in decode_detections(params, rec.image, score_threshold,
                                            nms_iou)]

    workers = resolve_workers()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_record = list(pool.map(on_record, dataset.records))
    else:
        per_record = [on_record(rec) for rec in dataset.records]
    detections = [d for group in per_record for d in group]
    return detections, None, time.perf_counter() - started


def _unstratified_truth(dataset) -> GroundTruthSet:
    key = DomainKey(("all",))
    boxes = tuple(
        GroundTruthBox(image_id=rec.image_id, bbox=ann.bbox,
                       category_id=ann.category_id)
        for rec in dataset.records for ann in rec.annotations)
    return GroundTruthSet(
        image_ids=tuple(rec.image_id for rec in dataset.records),
        boxes=boxes,
        domains={rec.image_id: key for rec in dataset.records})


def _strip_stratification(report: EvalReport) -> EvalReport:
    return replace(report, domains=[], per_domain={}, averages={},
                   excluded_domains=[],
                   notes=["stratification was disabled; domain rows and their "
                          "aggregates are omitted rather than reported as zero"])


def cmd_eval(args) -> int:
    if bool(args.model) == bool(args.detections):
        raise InvalidInputError("provide exactly one of --model or --detections")
    per_domain = not args.no_per_domain
    model_path = Path(args.model) if args.model else None
    kind = _checkpoint_kind(model_path) if model_path else None

    # Resolve the stratification schema before touching the images so that a
    # missing one fails fast instead of after a full detection pass.
    schema = None
    if per_domain:
        if args.schema:
            schema = load_schema(args.schema)
        elif kind != "experts":
            raise InvalidInputError(
                "per-domain evaluation needs --schema (or an expert model "
                "that embeds one); pass --no-per-domain to skip stratification")

    dataset = load_dataset(args.dataset)
    ds_digest = dataset_digest(args.dataset)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))

    fps_note = None
    if model_path:
        detections, model_schema, elapsed = _detect_with_model(
            model_path, kind, dataset, args.score_threshold, args.nms_iou)
        if schema is None:
            schema = model_schema
        if elapsed > 0:
            fps_note = (f"throughput: {len(dataset.records) / elapsed:.1f} "
                        f"images/s ({_FPS_DISCLAIMER})")
    else:
        detections = load_detections(args.detections)

    truth = (ground_truth_of(dataset, schema) if per_domain
             else _unstratified_truth(dataset))
    report = evaluate(detections, truth, thresholds)
    if not per_domain:
        report = _strip_stratification(report)

    out = Path(args.out)
    name = args.name or (Path(args.model).stem if args.model
                         else Path(args.detections).stem)
    with output_lock(out):
        wrapper = {
            "name": name,
            "dataset_digest": ds_digest,
            "source": str(args.model or args.detections),
            "thresholds": list(thresholds),
            "report": report.to_dict(),
        }
        if args.model:
            wrapper["decode"] = {"score_threshold": args.score_threshold,
                                 "nms_iou": args.nms_iou}
        if args.manifest:
            wrapper["manifest_digest"] = sha256_bytes(Path(args.manifest).read_bytes())
        dump_json(wrapper, out / "eval.json")
        table = render_report_table(report)
        (out / "eval.txt").write_text(table)
        if args.model:
            save_detections(detections, out / "detections.json")
        if args.plots:
            _render_plots(report, out, "eval")
    print(table)
    if fps_note:
        print(fps_note)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _sweep_plot(rows: list[dict], out_dir: Path) -> Path:
    import re

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sweep = []
    flat = []
    for row in rows:
        m = re.search(r"@(\d+)$", row["name"])
        (sweep if m else flat).append((int(m.group(1)) if m else None, row))

    fig, ax = plt.subplots(figsize=(6, 4))
    if sweep:
        sweep.sort(key=lambda sr: sr[0])
        xs = [s for s, _ in sweep]
        ax.plot(xs, [r["overall"] for _, r in sweep], marker="o", label="overall AP")
        ax.plot(xs, [r["average"] for _, r in sweep], marker="s",
                label="domain-averaged AP")
        ax.set_xlabel("shared stages (s)")
        ax.set_xticks(xs)
        for _, row in flat:
            if row["overall"] is not None:
                ax.axhline(row["overall"], linestyle="--", linewidth=1,
                           color="#555555", label=f"{row['name']} overall")
    else:
        xs = range(len(rows))
        width = 0.38
        ax.bar([x - width / 2 for x in xs],
               [r["overall"] or 0.0 for r in rows], width, label="overall AP")
        ax.bar([x + width / 2 for x in xs],
               [r["average"] or 0.0 for r in rows], width,
               label="domain-averaged AP")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([r["name"] for r in rows], rotation=30, ha="right",
                           fontsize=8)
    ax.set_ylabel("AP")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "comparison.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def cmd_compare(args) -> int:
    entries = []
    digests = set()
    for raw in args.reports:
        path = Path(raw)
        if not path.exists():
            raise InvalidInputError(f"report {path} does not exist")
        doc = load_structured(path)
        if not isinstance(doc, dict) or "report" not in doc or "name" not in doc:
            raise InvalidInputError(f"{path} is not an evaluation output")
        entries.append(ComparisonEntry(doc["name"],
                                       EvalReport.from_dict(doc["report"]),
                                       doc.get("dataset_digest")))
        if doc.get("dataset_digest"):
            digests.add(doc["dataset_digest"])
    table, rows = compare_runs(entries, baseline=args.baseline,
                               threshold=args.threshold)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(table)
        dump_json({
            "baseline": args.baseline or entries[0].name,
            "dataset_digest": digests.pop() if len(digests) == 1 else None,
            "rows": rows,
        }, out / "comparison.json")
        if args.plots:
            _sweep_plot(rows, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
