"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured quantities (run with ``pytest tests/test_acceptance.py -v -s``).

The comparative criteria train on the reference synthetic wake dataset:
seed 0, 10,000 steps, 16x16 grid, 200 turbines, advection 1 cell/step,
observation noise 0.4 m/s, 90-minute horizon. Training budgets are chosen so
the whole suite fits a desk machine; all tolerances are asserted exactly as
stated per criterion.
"""

import time

import numpy as np
import pytest

import windformer.tensor as T
from windformer import nn
from windformer.attention import (
    WindowAttention,
    build_shift_mask,
    cyclic_shift,
    shift_region_ids,
    window_partition,
)
from windformer.data import (
    dense_layout,
    embed_to_grid,
    extract_turbine_values,
    fit_normalizer,
    split_dataset,
    stack_sequences,
)
from windformer.evaluate import (
    AblationSpec,
    evaluate,
    evaluate_persistence,
    full_ablation_grid,
    run_ablation,
)
from windformer.model import ChannelFusion, ModelConfig, Windformer
from windformer.synthetic import synthesize_wake_dataset
from windformer.tensor import Tensor
from windformer.training import TrainConfig, gradient_check, train

DESK_GRID = 16
DESK_TURBINES = 200
WAKE_DATASET = dict(steps=10_000, seed=0, T=4, horizon_minutes=90,
                    wake_speed_cells_per_step=1, noise_std=0.4, n_modes=6)


def desk_layout():
    return dense_layout(DESK_GRID, DESK_GRID, n_turbines=DESK_TURBINES, seed=0)


def report(criterion, detail):
    print(f"\nACCEPTANCE {criterion}: PASS  ({detail})")


@pytest.fixture(scope="module")
def wake_runs():
    """Shared comparative runs on the reference wake dataset: the default
    model (criteria 4 and 5), the window-only model (4), the empty-temporal
    model (5), and the persistence baseline (4)."""
    layout = desk_layout()
    sequences = synthesize_wake_dataset(layout, **WAKE_DATASET)
    train_seqs, val_seqs, test_seqs = split_dataset(sequences)
    stats = fit_normalizer(train_seqs)
    train_cfg = TrainConfig(batch_size=16, max_epochs=2, patience=10, seed=0,
                            horizon_minutes=90)

    results = {}
    timings = {}
    for tag, model_kw in (
        ("shift-window", {}),
        ("window", {"spatial_variant": "window"}),
        ("empty-temporal", {"temporal_variant": "empty"}),
    ):
        t0 = time.perf_counter()
        model = Windformer(ModelConfig(**model_kw), layout, seed=0)
        train(model, train_seqs, val_seqs, train_cfg, stats)
        results[tag] = evaluate(model, test_seqs, stats, "wake", tag).rows[0]
        timings[tag] = time.perf_counter() - t0
    results["persistence"] = evaluate_persistence(test_seqs, layout, "wake").rows[0]
    return results, timings


class TestCriterion1GradientIntegrity:
    def test_desk_config_end_to_end_finite_differences(self):
        layout = desk_layout()
        sequences = synthesize_wake_dataset(
            layout, steps=8, seed=0, T=4, horizon_minutes=90,
            wake_speed_cells_per_step=1, noise_std=0.4,
        )
        stats = fit_normalizer(sequences)
        model = Windformer(ModelConfig(), layout, seed=0)  # T=4, C1=48
        # a train-mode pass moves batchnorm off its identity init
        x, y = stack_sequences(sequences[:2])
        mask = layout.valid_mask()
        xn = stats.apply_features(x, mask)
        yn = stats.normalize_target(y)
        model.train()
        model.forward_arrays(xn)
        model.zero_grad()

        t0 = time.perf_counter()
        rep = gradient_check(model, xn, yn, param_fraction=0.01, h=1e-4, seed=0)
        elapsed = time.perf_counter() - t0
        assert rep.max_rel_err < 1e-3, rep
        assert elapsed < 600.0
        report(1, f"max rel err {rep.max_rel_err:.2e} over {rep.n_coordinates} "
                  f"coordinates in {elapsed:.0f}s")


class TestCriterion2AttentionOracle:
    def test_single_window_matches_dense_attention(self):
        def np_softmax(a):
            e = np.exp(a - a.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        t0 = time.perf_counter()
        worst = 0.0
        for trial in range(20):
            rng = np.random.default_rng(trial)
            attn = WindowAttention(12, 3, 4, rng, rel_pos_bias=False)
            attn.to_dtype(np.float64)
            x = rng.normal(size=(16, 12))
            with T.no_grad():
                ours = attn(Tensor(x[None]))
            qkv = x @ attn.qkv.weight.data.T + attn.qkv.bias.data
            q, k, v = qkv[:, :12], qkv[:, 12:24], qkv[:, 24:]
            dense = np.zeros((16, 12))
            for h in range(3):
                sl = slice(h * 4, (h + 1) * 4)
                dense[:, sl] = np_softmax(q[:, sl] @ k[:, sl].T * attn.scale) @ v[:, sl]
            dense = dense @ attn.proj.weight.data.T + attn.proj.bias.data
            worst = max(worst, float(np.abs(ours.data[0] - dense).max()))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-5
        assert elapsed < 1.0
        report(2, f"20 instances, max abs diff {worst:.2e}, {elapsed * 1000:.0f}ms")


class TestCriterion3ShiftMaskSoundness:
    def test_no_cross_region_attention_weight(self):
        h = w = 8
        window, shift = 4, 2
        rng = np.random.default_rng(0)
        attn = WindowAttention(16, 4, window, rng)
        attn.to_dtype(np.float64)
        x = Tensor(rng.normal(size=(1, h, w, 16)))
        wins = window_partition(cyclic_shift(x, shift), window)
        mask = build_shift_mask(h, w, window, shift)
        with T.no_grad():
            _, weights = attn(wins, mask, return_weights=True)
        ids = shift_region_ids(h, w, window, shift)
        ids_w = (ids.reshape(h // window, window, w // window, window)
                 .transpose(0, 2, 1, 3).reshape(-1, window * window))
        worst = 0.0
        checked = 0
        for wi in range(weights.shape[0]):
            for head in range(weights.shape[1]):
                for i in range(16):
                    for j in range(16):
                        if ids_w[wi, i] != ids_w[wi, j]:
                            worst = max(worst, float(weights[wi, head, i, j]))
                            checked += 1
        assert worst < 1e-6
        report(3, f"exhaustive: {checked} cross-region weights, max {worst:.1e}")


class TestCriterion4SpatialOrderingAndBaseline:
    def test_shift_window_beats_window_beats_persistence(self, wake_runs):
        results, timings = wake_runs
        shift = results["shift-window"].mse
        window = results["window"].mse
        pers = results["persistence"].mse
        crit4_time = timings["shift-window"] + timings["window"]
        assert shift < window, (shift, window)
        assert window < pers and shift < pers
        assert crit4_time < 3600.0
        report(4, f"test MSE shift {shift:.4f} < window {window:.4f} < "
                  f"persistence {pers:.4f}; {crit4_time:.0f}s")


class TestCriterion5TemporalOrdering:
    def test_bi_convgru_beats_empty_temporal(self, wake_runs):
        results, _ = wake_runs
        full = results["shift-window"].mse
        empty = results["empty-temporal"].mse
        assert full < empty, (full, empty)
        report(5, f"test MSE bi-convgru {full:.4f} < empty temporal {empty:.4f}")


class TestCriterion6FusionGate:
    def test_gate_bound_on_random_inputs(self):
        rng = np.random.default_rng(0)
        fusion = ChannelFusion(16, np.random.default_rng(1))
        fusion.eval()
        for _ in range(1000):
            x = (rng.normal(size=(1, 16, 4, 4)) * rng.uniform(0.1, 30)).astype(np.float32)
            with T.no_grad():
                out = fusion(Tensor(x)).data
            assert np.all(np.abs(out) <= np.abs(x))

    def test_zero_parameter_gate_is_exactly_half(self):
        rng = np.random.default_rng(2)
        fusion = ChannelFusion(16, np.random.default_rng(3))
        for _, p in fusion.named_parameters():
            p.data[:] = 0
        x = rng.normal(size=(2, 16, 4, 4)).astype(np.float32)
        for mode in (True, False):
            fusion.train(mode)
            with T.no_grad():
                out = fusion(Tensor(x)).data
            assert np.array_equal(out, (np.float32(0.5) * x))
        report(6, "|X'| <= |X| on 1000 inputs; zero-parameter gate = 0.5 X exactly")


class TestCriterion7OverfitCapacity:
    def test_eight_sequences_overfit(self):
        layout = desk_layout()
        sequences = synthesize_wake_dataset(
            layout, steps=16, seed=0, T=4, horizon_minutes=90,
            wake_speed_cells_per_step=1, noise_std=0.4,
        )[:8]
        stats = fit_normalizer(sequences)
        model = Windformer(ModelConfig(), layout, seed=0)
        cfg = TrainConfig(batch_size=8, max_epochs=500, patience=10 ** 9, seed=0,
                          horizon_minutes=90, max_steps=150)
        t0 = time.perf_counter()
        history = train(model, sequences, [], cfg, stats)
        elapsed = time.perf_counter() - t0
        best = min(r.train_mse for r in history.records)
        steps = len(history.records)  # one single-batch step per epoch here
        assert steps <= 500
        assert best < 1e-2, best
        assert elapsed < 300.0
        report(7, f"train MSE {best:.2e} after {steps} steps in {elapsed:.0f}s")


class TestCriterion8DeterminismAndPersistence:
    def test_bit_identical_histories_and_checkpoint_round_trip(self, tmp_path):
        layout = desk_layout()
        sequences = synthesize_wake_dataset(
            layout, steps=80, seed=0, T=4, horizon_minutes=90,
            wake_speed_cells_per_step=1, noise_std=0.4,
        )
        tr, va, te = split_dataset(sequences)
        stats = fit_normalizer(tr)
        cfg = TrainConfig(batch_size=16, max_epochs=2, patience=10, seed=0,
                          horizon_minutes=90)
        histories = []
        ckpt = tmp_path / "run.zip"
        for _ in range(2):
            model = Windformer(ModelConfig(), layout, seed=0)
            hist = train(model, tr, va, cfg, stats, checkpoint_path=ckpt)
            histories.append(hist)
        a, b = histories
        assert a.metric_matrix().tobytes() == b.metric_matrix().tobytes()

        fresh = Windformer(ModelConfig(), layout, seed=777)
        nn.load_checkpoint(fresh, ckpt)
        fresh.eval()
        from windformer.training import _evaluate_split

        val_mse, _ = _evaluate_split(fresh, va, stats, layout.valid_mask(), 16)
        assert val_mse == b.best_val_mse  # bit-exact reproduction
        report(8, f"two runs bit-identical over {len(a.records)} epochs; "
                  f"checkpoint reproduces val MSE {val_mse:.6f} exactly")


class TestCriterion9RoundTrips:
    def test_all_round_trips(self):
        rng = np.random.default_rng(0)
        # window partition / reverse: exact
        from windformer.attention import window_reverse

        x = Tensor(rng.normal(size=(2, 8, 8, 6)).astype(np.float32))
        back = window_reverse(window_partition(x, 4), 4, 2, 8, 8)
        assert np.array_equal(back.data, x.data)
        # cyclic shift / unshift: exact
        from windformer.attention import reverse_cyclic_shift

        shifted = reverse_cyclic_shift(cyclic_shift(x, 2), 2)
        assert np.array_equal(shifted.data, x.data)
        # grid embed / extract: exact
        layout = dense_layout(6, 7, n_turbines=31, seed=4)
        vals = rng.normal(size=(31, 6)).astype(np.float32)
        records = {tid: vals[i] for i, tid in enumerate(layout.turbine_ids)}
        got = extract_turbine_values(embed_to_grid(records, layout), layout)
        assert np.array_equal(got, vals)
        # normalize / denormalize: within 1e-6
        seqs = synthesize_wake_dataset(layout, steps=30, seed=1, T=2,
                                       horizon_minutes=60)
        stats = fit_normalizer(seqs)
        xs, ys = stack_sequences(seqs)
        mask = layout.valid_mask()
        back = stats.invert_features(stats.apply_features(xs, mask), mask)
        err_x = float(np.max(np.abs(back - xs * mask)))
        back_y = stats.denormalize_prediction(stats.normalize_target(ys))
        err_y = float(np.max(np.abs(back_y - ys)))
        assert err_x <= 1e-6 * max(1.0, float(np.abs(xs).max()))
        assert err_y <= 1e-5
        report(9, f"partition/shift/embed exact; normalize round-trip "
                  f"err x {err_x:.1e}, y {err_y:.1e}")


class TestCriterion10MetricInvariantAcrossGrid:
    def test_full_ablation_grid_rows(self):
        layout = dense_layout(4, 4)
        sequences = synthesize_wake_dataset(layout, steps=60, seed=0, T=2,
                                            horizon_minutes=30)
        tr, va, te = split_dataset(sequences)
        stats = fit_normalizer(tr)
        base = ModelConfig(T=2, hidden_channels=2, embed_dim=8, n_stages=2,
                           heads=(2, 4), window_size=2, mlp_ratio=2)
        cfg = TrainConfig(batch_size=16, max_epochs=1, patience=5, seed=0,
                          horizon_minutes=30)
        specs = full_ablation_grid()
        assert len(specs) == 96
        report_table, _ = run_ablation(specs, layout, base, cfg, tr, va, te,
                                       stats, dataset_id="grid")
        assert len(report_table.rows) == 97  # 96 variants + persistence
        for row in report_table.rows:
            assert row.mae <= np.sqrt(row.mse) * (1 + 1e-9) + 1e-12, row
        report(10, f"MAE <= sqrt(MSE) on {len(report_table.rows)} rows "
                   f"(full 96-cell grid + persistence)")
