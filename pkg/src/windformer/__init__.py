"""Spatio-temporal wind speed forecasting over gridded turbine clusters.

The model couples a bidirectional convolutional GRU over the input scene
sequence with hierarchical shifted-window self-attention over the turbine
grid, 2x2 turbine merging between stages, and a channel-fusion gate, ending
in a per-turbine prediction head. Everything runs on a small numpy tensor
core with reverse-mode automatic differentiation.
"""

from .data import (
    FeatureStats,
    Scene,
    SceneSequence,
    TurbineLayout,
    dense_layout,
    embed_to_grid,
    extract_turbine_values,
    fit_normalizer,
    load_csv_dataset,
    split_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    ShapeError,
    TrainingDiverged,
    WindformerError,
)
from .evaluate import (
    AblationSpec,
    MetricsReport,
    MetricsRow,
    evaluate,
    evaluate_persistence,
    export_prediction_curve,
    full_ablation_grid,
    persistence_baseline,
    run_ablation,
)
from .model import ModelConfig, Prediction, Windformer, build_model
from .nn import load_checkpoint, read_manifest, save_checkpoint
from .synthetic import SynthConfig, synthesize_wake_dataset
from .tensor import Parameter, Tensor, backward, no_grad
from .training import (
    AdamW,
    GradCheckReport,
    History,
    TrainConfig,
    gradient_check,
    mae_metric,
    mse_loss,
    mse_metric,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AblationSpec", "AdamW", "CheckpointError", "ConfigError", "DataError",
    "FeatureStats", "GradCheckReport", "History", "MetricsReport", "MetricsRow",
    "ModelConfig", "Parameter", "Prediction", "Scene", "SceneSequence",
    "ShapeError", "SynthConfig", "Tensor", "TrainConfig", "TrainingDiverged",
    "TurbineLayout", "Windformer", "WindformerError", "backward", "build_model",
    "dense_layout", "embed_to_grid", "evaluate", "evaluate_persistence",
    "export_prediction_curve", "extract_turbine_values", "fit_normalizer",
    "full_ablation_grid", "gradient_check", "load_checkpoint",
    "load_csv_dataset", "mae_metric", "mse_loss", "mse_metric", "no_grad",
    "persistence_baseline", "read_manifest", "run_ablation", "save_checkpoint",
    "split_dataset", "synthesize_wake_dataset", "train",
]
