"""Command-line surface: synthesize / train / predict / evaluate / gradcheck
/ ablate.

Every subcommand reads an optional JSON config file with sections ``model``
(ModelConfig fields), ``train`` (TrainConfig fields), ``synth`` (generator
settings plus grid dims), and ``ablation`` (a list of variant specs); flags
override the file. Outputs are deterministic given (config, seed).

Exit codes: 0 success, 2 usage, 3 config error, 4 data error, 5 training
divergence or failed gradient check, 6 checkpoint error, 1 unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import (
    FeatureStats,
    TurbineLayout,
    dense_layout,
    fit_normalizer,
    load_csv_dataset,
    split_dataset,
    stack_sequences,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    TrainingDiverged,
    WindformerError,
)
from .evaluate import (
    AblationSpec,
    evaluate,
    evaluate_persistence,
    export_prediction_curve,
    run_ablation,
)
from .model import ModelConfig, Windformer
from .nn import load_checkpoint
from .synthetic import SynthConfig, generate_raw_fields, write_dataset_csv
from .training import TrainConfig, gradient_check, train

log = logging.getLogger(__name__)

DEFAULT_SYNTH_GRID = {"grid_height": 16, "grid_width": 16, "n_turbines": 200,
                      "layout_seed": 0}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {"model", "train", "synth", "ablation"}
    bad = set(doc) - known
    if bad:
        raise ConfigError(f"unknown config sections: {sorted(bad)}; expected {sorted(known)}")
    return doc


def resolve_configs(doc: dict, args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    if getattr(args, "seed", None) is not None:
        train_doc["seed"] = args.seed
    if getattr(args, "horizon", None) is not None:
        train_doc["horizon_minutes"] = args.horizon
    return model_cfg, TrainConfig.from_dict(train_doc)


def synth_settings(doc: dict):
    section = dict(doc.get("synth", {}))
    grid = {k: section.pop(k, v) for k, v in DEFAULT_SYNTH_GRID.items()}
    return grid, section


def load_dataset(args, model_cfg: ModelConfig, train_cfg: TrainConfig):
    layout = TurbineLayout.from_json_file(args.layout)
    sequences = load_csv_dataset(args.data, layout, train_cfg.horizon_minutes,
                                 model_cfg.T)
    if not sequences:
        raise DataError(f"{args.data}: no complete windows for T={model_cfg.T}, "
                        f"horizon={train_cfg.horizon_minutes}")
    return layout, sequences


def load_run_dir(run_dir):
    cfg_path = os.path.join(run_dir, "config.json")
    try:
        with open(cfg_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"run directory {run_dir} has no config.json") from e
    model_cfg = ModelConfig.from_dict(doc["model"])
    train_cfg = TrainConfig.from_dict(doc["train"])
    layout = TurbineLayout.from_json_file(os.path.join(run_dir, "layout.json"))
    stats = FeatureStats.from_json_file(os.path.join(run_dir, "stats.json"))
    model = Windformer(model_cfg, layout, seed=train_cfg.seed)
    load_checkpoint(model, os.path.join(run_dir, "checkpoint.zip"))
    model.set_normalizer(stats)
    model.eval()
    return model, train_cfg, layout, stats


def cmd_synthesize(args) -> int:
    doc = load_config_file(args.config)
    grid, synth_doc = synth_settings(doc)
    if args.seed is not None:
        synth_doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(synth_doc)
    layout = dense_layout(grid["grid_height"], grid["grid_width"],
                          n_turbines=grid["n_turbines"], seed=grid["layout_seed"])
    os.makedirs(args.out, exist_ok=True)
    layout.to_json_file(os.path.join(args.out, "layout.json"))
    raw = generate_raw_fields(layout, cfg)
    write_dataset_csv(os.path.join(args.out, "data.csv"), layout, raw,
                      spacing_minutes=cfg.spacing_minutes)
    log.info("wrote %d steps for %d turbines to %s", cfg.steps,
             layout.n_turbines, args.out)
    print(f"synthesized {cfg.steps} steps x {layout.n_turbines} turbines -> {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = load_config_file(args.config)
    model_cfg, train_cfg = resolve_configs(doc, args)
    layout, sequences = load_dataset(args, model_cfg, train_cfg)
    train_seqs, val_seqs, test_seqs = split_dataset(sequences)
    stats = fit_normalizer(train_seqs)
    model = Windformer(model_cfg, layout, seed=train_cfg.seed)
    model.set_normalizer(stats)
    os.makedirs(args.out, exist_ok=True)
    history = train(
        model, train_seqs, val_seqs, train_cfg, stats,
        checkpoint_path=os.path.join(args.out, "checkpoint.zip"),
        history_path=os.path.join(args.out, "history.csv"),
    )
    layout.to_json_file(os.path.join(args.out, "layout.json"))
    stats.to_json_file(os.path.join(args.out, "stats.json"))
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"model": model_cfg.to_dict(),
                   "train": train_cfg.__dict__}, fh, indent=1)
    report = evaluate(model, test_seqs or val_seqs or train_seqs, stats,
                      dataset_id=os.path.basename(args.data), model_id="windformer")
    report.to_csv(os.path.join(args.out, "metrics.csv"))
    print(f"trained {len(history.records)} epochs; best val MSE "
          f"{history.best_val_mse:.4f} (epoch {history.best_epoch})")
    print(report.format_table())
    return 0


def cmd_predict(args) -> int:
    model, train_cfg, layout, stats = load_run_dir(args.run)
    sequences = load_csv_dataset(args.data, layout, train_cfg.horizon_minutes,
                                 model.config.T)
    if not sequences:
        raise DataError(f"{args.data}: no complete windows")
    preds = model.predict(sequences)
    import csv as _csv

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["timestamp", "turbine_id", "predicted_wind_speed"])
        for pred in preds:
            for tid, v in zip(pred.turbine_ids, pred.values):
                writer.writerow([pred.timestamp, tid, repr(float(v))])
    print(f"wrote {len(preds) * layout.n_turbines} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model, train_cfg, layout, stats = load_run_dir(args.run)
    sequences = load_csv_dataset(args.data, layout, train_cfg.horizon_minutes,
                                 model.config.T)
    if args.split == "test":
        _, _, sequences = split_dataset(sequences)
    if not sequences:
        raise DataError("selected split is empty")
    report = evaluate(model, sequences, stats,
                      dataset_id=os.path.basename(args.data),
                      model_id="windformer")
    if args.with_persistence:
        report.extend(evaluate_persistence(sequences, layout,
                                           dataset_id=os.path.basename(args.data)))
    if args.out:
        report.to_csv(args.out)
    print(report.format_table())
    if args.curve_turbine:
        if not args.curve_out:
            raise ConfigError("--curve-out is required with --curve-turbine")
        rows = export_prediction_curve(model, sequences, stats,
                                       args.curve_turbine, args.curve_out)
        print(f"wrote {rows} curve rows to {args.curve_out}")
    return 0


def cmd_gradcheck(args) -> int:
    doc = load_config_file(args.config)
    model_cfg, train_cfg = resolve_configs(doc, args)
    grid, synth_doc = synth_settings(doc)
    spacing = synth_doc.get("spacing_minutes", 30)
    synth_doc.setdefault(
        "steps", model_cfg.T + train_cfg.horizon_minutes // spacing + 1
    )
    synth_cfg = SynthConfig.from_dict(synth_doc)
    layout = dense_layout(grid["grid_height"], grid["grid_width"],
                          n_turbines=grid["n_turbines"], seed=grid["layout_seed"])
    from .synthetic import synthesize_wake_dataset

    sequences = synthesize_wake_dataset(
        layout, steps=synth_cfg.steps, seed=synth_cfg.seed,
        wake_speed_cells_per_step=synth_cfg.wake_speed_cells_per_step,
        noise_std=synth_cfg.noise_std, T=model_cfg.T,
        horizon_minutes=train_cfg.horizon_minutes,
        spacing_minutes=synth_cfg.spacing_minutes,
    )
    stats = fit_normalizer(sequences)
    model = Windformer(model_cfg, layout, seed=train_cfg.seed)
    mask = layout.valid_mask()
    x, y = stack_sequences(sequences[:1])
    report = gradient_check(
        model, stats.apply_features(x, mask), stats.normalize_target(y),
        param_fraction=args.fraction, h=args.step_size, seed=train_cfg.seed,
    )
    print(f"gradient check: {report.n_coordinates} coordinates, "
          f"max rel err {report.max_rel_err:.3e} (worst {report.worst_param})")
    if report.passed(args.threshold):
        print(f"PASS (threshold {args.threshold:g})")
        return 0
    print(f"FAIL (threshold {args.threshold:g})")
    return 5


def cmd_ablate(args) -> int:
    doc = load_config_file(args.config)
    model_cfg, train_cfg = resolve_configs(doc, args)
    specs = [AblationSpec.from_dict(d) for d in doc.get(
        "ablation",
        [{"temporal_variant": "bi-convgru"},
         {"spatial_variant": "window"},
         {"temporal_variant": "empty"},
         {"fusion_variant": "empty"}],
    )]
    layout, sequences = load_dataset(args, model_cfg, train_cfg)
    train_seqs, val_seqs, test_seqs = split_dataset(sequences)
    stats = fit_normalizer(train_seqs)
    report, _ = run_ablation(specs, layout, model_cfg, train_cfg,
                             train_seqs, val_seqs, test_seqs or val_seqs, stats,
                             dataset_id=os.path.basename(args.data))
    report.to_csv(args.out)
    print(report.format_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windformer",
        description="Spatio-temporal wind speed forecasting over turbine grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, help="override training/generation seed")

    p = sub.add_parser("synthesize", help="generate a synthetic wake dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("train", help="train a model on a CSV dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--layout", required=True, help="turbine layout JSON")
    p.add_argument("--horizon", type=int, choices=(30, 60, 90))
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict with a trained run")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--out", help="metrics CSV")
    p.add_argument("--with-persistence", action="store_true", default=True)
    p.add_argument("--no-persistence", dest="with_persistence", action="store_false")
    p.add_argument("--curve-turbine", help="turbine id for curve export")
    p.add_argument("--curve-out", help="curve CSV path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(p)
    p.add_argument("--horizon", type=int, choices=(30, 60, 90))
    p.add_argument("--fraction", type=float, default=0.01,
                   help="fraction of coordinates per parameter")
    p.add_argument("--step-size", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare module ablations")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--horizon", type=int, choices=(30, 60, 90))
    p.add_argument("--out", required=True, help="metrics CSV")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 4
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 5
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 6
    except WindformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
