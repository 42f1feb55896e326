"""Domain-expert object detection: shared lower stages, per-domain upper branches.

Detectors are split at a stage index s. Stages 1..s are trained once on the
pooled data and shared by every domain; stages s+1..S plus the head are
duplicated per domain key and fine-tuned on that domain's slice. At test time
sensor metadata (altitude, gimbal pitch, capture time) picks the branch.
"""

__version__ = "0.1.0"

from .detector import (
    AnchorConfig,
    StageSpec,
    compute_loss,
    count_inference_ops,
    count_parameters,
    decode_detections,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    DatasetParseError,
    DomExpertsError,
    InvalidInputError,
    SchemaMismatchError,
    TrainingDivergenceError,
)
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruthBox,
    GroundTruthSet,
    average_precision,
    evaluate,
    ground_truth_of,
    match_detections,
    render_report_table,
)
from .experts import (
    ExpertDetector,
    detect_dataset,
    expert_parameter_count,
    freeze_shared,
    load_model,
    route_forward,
    routed_op_count,
    save_model,
    split_model,
)
from .scenes import Dataset, SceneSpec, dataset_digest, generate_dataset, load_dataset
from .schema import (
    DomainDimension,
    DomainKey,
    DomainSchema,
    MetadataRecord,
    bin_metadata,
    bin_value,
    enumerate_keys,
    fuse_labels,
    load_schema,
    save_schema,
)
from .training import (
    ComparisonEntry,
    RunRecord,
    TrainConfig,
    compare_runs,
    plan_budget,
    train_baseline,
    train_experts,
)

__all__ = [
    "AnchorConfig",
    "CheckpointError",
    "ComparisonEntry",
    "Dataset",
    "DatasetParseError",
    "Detection",
    "DomExpertsError",
    "DomainDimension",
    "DomainKey",
    "DomainSchema",
    "EvalReport",
    "ExpertDetector",
    "GroundTruthBox",
    "GroundTruthSet",
    "InvalidInputError",
    "MetadataRecord",
    "RunRecord",
    "SceneSpec",
    "SchemaMismatchError",
    "StageSpec",
    "TrainConfig",
    "TrainingDivergenceError",
    "average_precision",
    "bin_metadata",
    "bin_value",
    "compare_runs",
    "compute_loss",
    "count_inference_ops",
    "count_parameters",
    "dataset_digest",
    "decode_detections",
    "detect_dataset",
    "enumerate_keys",
    "evaluate",
    "expert_parameter_count",
    "freeze_shared",
    "fuse_labels",
    "generate_dataset",
    "ground_truth_of",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "load_model",
    "load_schema",
    "match_detections",
    "plan_budget",
    "render_report_table",
    "route_forward",
    "routed_op_count",
    "save_checkpoint",
    "save_model",
    "save_schema",
    "split_model",
    "train_baseline",
    "train_experts",
    "__version__",
]
