"""Rolling-unrolling LSTM action anticipation over pre-extracted features."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FeatureStore,
    FeatureTable,
    SampleRecord,
    Vocabulary,
    bag_of_objects,
    load_dataset,
    read_feature_table,
    sample_features,
    write_feature_table,
)
from .estimator import RUAnticipator
from .linalg import ShapeError, matmul, relu, sigmoid, softmax, tanh
from .metrics import (
    EvalRecord,
    MetricsReport,
    aggregate,
    mean_topk_recall,
    min_observation_ratio,
    time_to_action,
    topk_hit,
)
from .model import (
    FusionModel,
    PredictionTimeline,
    RUBranchParams,
    anticipation_loss,
    branch_forward,
    early_recognition_forward,
    marginalize,
)
from .nn import (
    DropoutSpec,
    GradCheckReport,
    LinearParams,
    LstmCellParams,
    MlpParams,
    NonDeterministicClosureError,
    SgdMomentum,
    gradcheck,
)
from .rng import Rng
from .synth import SynthConfig, synth_generate, write_dataset
from .timeline import TimelineSpec
from .train import (
    TrainConfig,
    TrainingDivergedError,
    build_train_data,
    early_stop_select,
    run_protocol,
    train_branch,
    train_fusion,
)

__all__ = [
    "Dataset", "DropoutSpec", "EvalRecord", "FeatureStore", "FeatureTable",
    "FusionModel", "GradCheckReport", "LinearParams", "LstmCellParams",
    "MetricsReport", "MlpParams", "NonDeterministicClosureError",
    "PredictionTimeline", "RUAnticipator", "RUBranchParams", "Rng",
    "SampleRecord", "SgdMomentum", "ShapeError", "SynthConfig",
    "TimelineSpec", "TrainConfig", "TrainingDivergedError", "Vocabulary",
    "aggregate", "anticipation_loss", "bag_of_objects", "branch_forward",
    "build_train_data", "early_recognition_forward", "early_stop_select",
    "gradcheck", "load_dataset", "marginalize", "matmul", "mean_topk_recall",
    "min_observation_ratio", "read_feature_table", "relu", "run_protocol",
    "sample_features", "sigmoid", "softmax", "synth_generate", "tanh",
    "time_to_action", "topk_hit", "train_branch", "train_fusion",
    "write_dataset", "write_feature_table",
]
