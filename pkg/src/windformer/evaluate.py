"""Evaluation surface: metric reports in the quantitative-table format,
persistence baseline, the module-ablation grid, and prediction-curve export.

All metrics are computed on denormalized values, so MSE is in (m/s)^2 and
MAE in m/s regardless of how features were scaled for the model.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import FeatureStats, TurbineLayout, last_observed_wind_speed, stack_sequences
from .errors import ConfigError, DataError
from .model import ModelConfig, Prediction, Windformer
from .temporal import TEMPORAL_VARIANTS
from .training import TrainConfig, train

log = logging.getLogger(__name__)

SPATIAL_CHOICES = ("empty", "cnn", "window", "shift-window")
FUSION_CHOICES = ("empty", "global-only", "detail-only", "full")


@dataclass(frozen=True)
class MetricsRow:
    dataset_id: str
    model_id: str
    horizon_minutes: int
    mse: float
    mae: float
    n_samples: int

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ConfigError("metrics cannot be negative")
        # Jensen: mean|e| <= sqrt(mean e^2); equality only for constant |e|
        if self.mae > math.sqrt(self.mse) * (1 + 1e-9) + 1e-12:
            raise ConfigError(
                f"invalid metrics row: MAE {self.mae} exceeds sqrt(MSE) "
                f"{math.sqrt(self.mse)}"
            )


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricsRow):
        self.rows.append(row)

    def extend(self, other: "MetricsReport"):
        self.rows.extend(other.rows)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset_id", "model_id", "horizon_minutes",
                             "mse", "mae", "n_samples"])
            for r in self.rows:
                writer.writerow([r.dataset_id, r.model_id, r.horizon_minutes,
                                 repr(r.mse), repr(r.mae), r.n_samples])

    def format_table(self) -> str:
        """Rows as models, MSE/MAE columns per horizon (the usual layout of
        quantitative comparison tables)."""
        horizons = sorted({r.horizon_minutes for r in self.rows})
        models = []
        for r in self.rows:
            if r.model_id not in models:
                models.append(r.model_id)
        by_key = {(r.model_id, r.horizon_minutes): r for r in self.rows}
        header = ["Model"]
        header += [f"MSE@{h}min" for h in horizons] + [f"MAE@{h}min" for h in horizons]
        lines = ["  ".join(f"{c:>14s}" for c in header)]
        for m in models:
            cells = [f"{m:>14s}"]
            for metric in ("mse", "mae"):
                for h in horizons:
                    r = by_key.get((m, h))
                    cells.append(f"{getattr(r, metric):14.3f}" if r else " " * 14)
            lines.append("  ".join(cells))
        return "\n".join(lines)


def evaluate(model: Windformer, sequences, stats: FeatureStats,
             dataset_id="dataset", model_id="windformer",
             batch_size=32) -> MetricsReport:
    """Denormalized MSE/MAE over all turbines and timestamps; deterministic."""
    if not sequences:
        raise DataError("cannot evaluate on an empty sequence list")
    mask = model.layout.valid_mask()
    was_training = model.training
    model.eval()
    se = ae = 0.0
    n = 0
    with T.no_grad():
        for lo in range(0, len(sequences), batch_size):
            chunk = sequences[lo:lo + batch_size]
            x, y = stack_sequences(chunk)
            pred = model.forward_arrays(stats.apply_features(x, mask)).data
            pred_phys = stats.denormalize_prediction(pred).astype(np.float64)
            se += float(((pred_phys - y) ** 2).sum())
            ae += float(np.abs(pred_phys - y).sum())
            n += y.size
    if was_training:
        model.train()
    report = MetricsReport()
    report.add(MetricsRow(dataset_id, model_id, sequences[0].horizon_minutes,
                          se / n, ae / n, n))
    return report


def persistence_baseline(sequence, layout: TurbineLayout) -> Prediction:
    """Forecast every turbine's last observed wind speed."""
    return Prediction(
        values=last_observed_wind_speed(sequence, layout),
        horizon_minutes=sequence.horizon_minutes,
        timestamp=sequence.target_timestamp,
        turbine_ids=layout.turbine_ids,
    )


def evaluate_persistence(sequences, layout: TurbineLayout,
                         dataset_id="dataset") -> MetricsReport:
    if not sequences:
        raise DataError("cannot evaluate on an empty sequence list")
    se = ae = 0.0
    n = 0
    for seq in sequences:
        err = persistence_baseline(seq, layout).values.astype(np.float64) - seq.target
        se += float((err ** 2).sum())
        ae += float(np.abs(err).sum())
        n += err.size
    report = MetricsReport()
    report.add(MetricsRow(dataset_id, "persistence", sequences[0].horizon_minutes,
                          se / n, ae / n, n))
    return report


@dataclass(frozen=True)
class AblationSpec:
    """One cell of the module-ablation grid; every combination constructs."""

    temporal_variant: str = "bi-convgru"
    spatial_variant: str = "shift-window"
    fusion_variant: str = "full"

    def __post_init__(self):
        if self.temporal_variant not in TEMPORAL_VARIANTS:
            raise ConfigError(f"unknown temporal variant {self.temporal_variant!r}")
        if self.spatial_variant not in SPATIAL_CHOICES:
            raise ConfigError(f"unknown spatial variant {self.spatial_variant!r}")
        if self.fusion_variant not in FUSION_CHOICES:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")

    @property
    def model_id(self) -> str:
        return f"t={self.temporal_variant},s={self.spatial_variant},f={self.fusion_variant}"

    def apply_to(self, config: ModelConfig) -> ModelConfig:
        doc = config.to_dict()
        doc.update(
            temporal_variant=self.temporal_variant,
            spatial_variant=self.spatial_variant,
            fusion_variant=self.fusion_variant,
        )
        return ModelConfig.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "AblationSpec":
        known = {f.name for f in fields(cls)}
        bad = set(doc) - known
        if bad:
            raise ConfigError(f"unknown ablation spec keys: {sorted(bad)}")
        return cls(**doc)


def full_ablation_grid():
    return [
        AblationSpec(t, s, f)
        for t in TEMPORAL_VARIANTS
        for s in SPATIAL_CHOICES
        for f in FUSION_CHOICES
    ]


def run_ablation(specs, layout: TurbineLayout, model_config: ModelConfig,
                 train_config: TrainConfig, train_seqs, val_seqs, test_seqs,
                 stats: FeatureStats, dataset_id="dataset",
                 include_persistence=True) -> MetricsReport:
    """Train every variant under identical seed and data, then evaluate on
    the test split; one report table, rows in spec order."""
    report = MetricsReport()
    trained = {}
    for spec in specs:
        log.info("ablation: training %s", spec.model_id)
        model = Windformer(spec.apply_to(model_config), layout,
                           seed=train_config.seed)
        model.set_normalizer(stats)
        train(model, train_seqs, val_seqs, train_config, stats)
        report.extend(
            evaluate(model, test_seqs, stats, dataset_id, spec.model_id)
        )
        trained[spec.model_id] = model
    if include_persistence:
        report.extend(evaluate_persistence(test_seqs, layout, dataset_id))
    return report, trained


def export_prediction_curve(model: Windformer, sequences, stats: FeatureStats,
                            turbine_id: str, out_path, time_range=None) -> int:
    """CSV of (timestamp, actual, predicted) for one turbine over the target
    timestamps covered by ``sequences``; returns the row count."""
    ids = model.layout.turbine_ids
    if turbine_id not in ids:
        raise DataError(f"unknown turbine id {turbine_id!r}")
    column = ids.index(turbine_id)
    chosen = [
        s for s in sequences
        if time_range is None or time_range[0] <= s.target_timestamp <= time_range[1]
    ]
    chosen.sort(key=lambda s: s.target_timestamp)
    model.set_normalizer(stats)
    preds = model.predict(chosen)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "actual", "predicted"])
        for seq, pred in zip(chosen, preds):
            writer.writerow(
                [seq.target_timestamp, repr(float(seq.target[column])),
                 repr(float(pred.values[column]))]
            )
    return len(chosen)
