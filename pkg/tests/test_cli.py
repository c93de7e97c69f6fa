import json

import numpy as np
import pytest

from windformer.cli import main

TINY_CONFIG = {
    "model": {"T": 2, "hidden_channels": 2, "embed_dim": 8, "n_stages": 2,
              "heads": [2, 4], "window_size": 2, "mlp_ratio": 2},
    "train": {"batch_size": 8, "max_epochs": 2, "patience": 5,
              "horizon_minutes": 30, "seed": 0},
    "synth": {"steps": 60, "seed": 0, "spacing_minutes": 30},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    doc = dict(TINY_CONFIG)
    doc["synth"] = dict(TINY_CONFIG["synth"], grid_height=4, grid_width=4,
                        n_turbines=12)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


class TestCliPipeline:
    def test_synthesize_train_evaluate_pipeline(self, tmp_path, tiny_config_file):
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        assert main(["synthesize", "--config", str(tiny_config_file),
                     "--out", str(data_dir)]) == 0
        assert (data_dir / "layout.json").exists()
        assert (data_dir / "data.csv").exists()

        assert main(["train", "--config", str(tiny_config_file),
                     "--data", str(data_dir / "data.csv"),
                     "--layout", str(data_dir / "layout.json"),
                     "--out", str(run_dir)]) == 0
        for name in ("checkpoint.zip", "history.csv", "stats.json",
                     "config.json", "metrics.csv", "layout.json"):
            assert (run_dir / name).exists(), name

        out_csv = tmp_path / "metrics.csv"
        assert main(["evaluate", "--run", str(run_dir),
                     "--data", str(data_dir / "data.csv"),
                     "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].startswith("dataset_id,model_id")
        assert len(lines) >= 3  # header + model + persistence

        pred_csv = tmp_path / "preds.csv"
        assert main(["predict", "--run", str(run_dir),
                     "--data", str(data_dir / "data.csv"),
                     "--out", str(pred_csv)]) == 0
        assert pred_csv.read_text().startswith("timestamp,turbine_id,")

    def test_curve_export_via_evaluate(self, tmp_path, tiny_config_file):
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        main(["synthesize", "--config", str(tiny_config_file), "--out", str(data_dir)])
        main(["train", "--config", str(tiny_config_file),
              "--data", str(data_dir / "data.csv"),
              "--layout", str(data_dir / "layout.json"), "--out", str(run_dir)])
        curve = tmp_path / "curve.csv"
        assert main(["evaluate", "--run", str(run_dir),
                     "--data", str(data_dir / "data.csv"),
                     "--curve-turbine", "T0003", "--curve-out", str(curve)]) == 0
        assert curve.read_text().startswith("timestamp,actual,predicted")

    def test_gradcheck_small_config(self, tmp_path, capsys):
        cfg = {
            "model": {"T": 2, "hidden_channels": 2, "embed_dim": 8,
                      "n_stages": 2, "heads": [2, 4], "window_size": 2,
                      "mlp_ratio": 2},
            "train": {"horizon_minutes": 30},
            "synth": {"grid_height": 4, "grid_width": 4, "n_turbines": 16,
                      "seed": 0},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        code = main(["gradcheck", "--config", str(path), "--fraction", "0.05"])
        out = capsys.readouterr().out
        assert "max rel err" in out
        assert code == 0
        assert "PASS" in out


class TestCliErrors:
    def test_unknown_flag_usage_exit(self, capsys):
        code = main(["train", "--frobnicate"])
        assert code == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert main(["explode"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["synthesize", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 3
        assert "config error" in capsys.readouterr().err

    def test_bad_config_section(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"modle": {}}))
        code = main(["synthesize", "--config", str(path),
                     "--out", str(tmp_path / "o")])
        assert code == 3

    def test_missing_data_file(self, tmp_path, tiny_config_file, capsys):
        data_dir = tmp_path / "data"
        main(["synthesize", "--config", str(tiny_config_file), "--out", str(data_dir)])
        code = main(["train", "--config", str(tiny_config_file),
                     "--data", str(tmp_path / "missing.csv"),
                     "--layout", str(data_dir / "layout.json"),
                     "--out", str(tmp_path / "run")])
        assert code != 0

    def test_invalid_horizon_flag(self, capsys):
        assert main(["train", "--data", "x", "--layout", "y", "--out", "z",
                     "--horizon", "45"]) == 2


class TestCsvRoundTrip:
    def test_synthesized_csv_reloads_exactly(self, tmp_path, tiny_config_file):
        from windformer.data import TurbineLayout, load_csv_dataset, stack_sequences
        from windformer.synthetic import synthesize_wake_dataset

        data_dir = tmp_path / "data"
        main(["synthesize", "--config", str(tiny_config_file), "--out", str(data_dir)])
        layout = TurbineLayout.from_json_file(data_dir / "layout.json")
        loaded = load_csv_dataset(data_dir / "data.csv", layout, 30, 2)
        direct = synthesize_wake_dataset(layout, steps=60, seed=0, T=2,
                                         horizon_minutes=30)
        assert len(loaded) == len(direct)
        xl, yl = stack_sequences(loaded)
        xd, yd = stack_sequences(direct)
        # 9-significant-digit text round-trips float32 exactly
        assert np.array_equal(xl, xd)
        assert np.array_equal(yl, yd)
