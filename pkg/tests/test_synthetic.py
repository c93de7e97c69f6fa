import numpy as np
import pytest

from windformer.data import WIND_SPEED_CHANNEL, dense_layout, split_dataset, stack_sequences
from windformer.errors import DataError
from windformer.synthetic import SynthConfig, generate_raw_fields, synthesize_wake_dataset


class TestAdvection:
    def test_noiseless_downwind_equals_upwind_lagged(self):
        layout = dense_layout(8, 12)
        cfg = SynthConfig(steps=60, seed=3, wake_speed_cells_per_step=1, noise_std=0.0)
        raw = generate_raw_fields(layout, cfg)
        speed = raw[:, WIND_SPEED_CHANNEL]
        for d in (1, 4, 9):
            # cell (r, c) at time t equals cell (r, c-d) at time t-d, exactly
            assert np.array_equal(speed[d:, :, d:], speed[:-d, :, :-d])

    def test_determinism(self):
        layout = dense_layout(6, 6, n_turbines=20, seed=2)
        a = synthesize_wake_dataset(layout, steps=40, seed=11)
        b = synthesize_wake_dataset(layout, steps=40, seed=11)
        xa, ya = stack_sequences(a)
        xb, yb = stack_sequences(b)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_different_seed_differs(self):
        layout = dense_layout(6, 6)
        a, _ = stack_sequences(synthesize_wake_dataset(layout, steps=40, seed=1))
        b, _ = stack_sequences(synthesize_wake_dataset(layout, steps=40, seed=2))
        assert not np.array_equal(a, b)

    def test_lagged_correlation_exceeds_threshold(self):
        layout = dense_layout(4, 16)
        cfg = SynthConfig(steps=600, seed=0, wake_speed_cells_per_step=1, noise_std=0.1)
        raw = generate_raw_fields(layout, cfg)
        speed = raw[:, WIND_SPEED_CHANNEL]
        lag = 10  # pair separated by 10 cells along the advection axis
        a = speed[:-lag, 2, 2]
        b = speed[lag:, 2, 12]
        corr = np.corrcoef(a, b)[0, 1]
        assert corr > 0.6

    def test_too_few_steps_rejected(self):
        layout = dense_layout(4, 4)
        with pytest.raises(DataError, match="steps"):
            synthesize_wake_dataset(layout, steps=5, seed=0, T=4, horizon_minutes=60)

    def test_sequences_have_expected_shape_and_targets(self):
        layout = dense_layout(5, 5, n_turbines=17, seed=0)
        seqs = synthesize_wake_dataset(layout, steps=30, seed=4, T=3, horizon_minutes=90)
        assert len(seqs) == 30 - 3 - 3 + 1
        s = seqs[0]
        assert s.T == 3
        assert s.target.shape == (17,)
        assert s.scenes[0].features.shape == (6, 5, 5)
        # target equals the wind-speed channel of the scene 3 steps later
        rows, cols = layout.rows_cols()
        later = seqs[5].scenes[0]  # timestamp 150 = first target timestamp
        assert later.timestamp == s.target_timestamp
        assert np.array_equal(s.target, later.features[WIND_SPEED_CHANNEL, rows, cols])

    def test_all_channels_vary(self):
        layout = dense_layout(6, 6)
        seqs = synthesize_wake_dataset(layout, steps=50, seed=9, noise_std=0.0)
        x, _ = stack_sequences(seqs)
        stds = x.std(axis=(0, 1, 3, 4))
        assert np.all(stds > 1e-4)

    def test_split_of_synthetic_dataset(self):
        layout = dense_layout(6, 6)
        seqs = synthesize_wake_dataset(layout, steps=100, seed=0)
        train, val, test = split_dataset(seqs)
        assert len(train) > len(val) > 0 and len(test) > 0
