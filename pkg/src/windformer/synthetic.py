"""Synthetic wake-correlated wind fields for desk-scale experiments.

The wind-speed field is an aperiodic 1-d profile advected along the column
axis: speed(t, r, c) = base(r, c - v*t) plus optional white noise. Equal
advected coordinates produce bit-identical base values, so the defining
identity is exact when noise is zero: a cell's value at time t equals the
value d cells upwind at time t - d/v. Upwind turbines therefore predict
downwind turbines at the advection lag, which is the long-distance
correlation the model is meant to exploit.

The profile mixes sinusoids with incommensurate wavelengths (2-20 cells),
so the stream never repeats: a model cannot memorize phases and must learn
the upwind fetch itself. Remaining channels (direction, pressure,
temperature, density) are smooth low-frequency fields; they carry no target
information but keep every channel's variance positive so normalization is
well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    N_CHANNELS,
    Scene,
    SceneSequence,
    TurbineLayout,
    build_sequences,
    encode_features,
)
from .errors import DataError


@dataclass(frozen=True)
class SynthConfig:
    steps: int = 2000
    seed: int = 0
    wake_speed_cells_per_step: int = 1
    noise_std: float = 0.1
    spacing_minutes: int = 30
    mean_speed: float = 8.0
    speed_amplitude: float = 3.5
    n_modes: int = 4

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise DataError(f"unknown synthetic-data options: {sorted(bad)}")
        return cls(**doc)


def generate_raw_fields(layout: TurbineLayout, cfg: SynthConfig) -> np.ndarray:
    """Raw 5-feature fields [steps, 5, H, W]; pure function of (layout, cfg)."""
    h, w = layout.grid_height, layout.grid_width
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.steps)[:, None, None]
    r = np.arange(h)[None, :, None]
    c = np.arange(w)[None, None, :]
    # integer advected coordinate: equal u -> bit-identical base values
    u = c - cfg.wake_speed_cells_per_step * t

    speed = np.full((cfg.steps, h, w), cfg.mean_speed, dtype=np.float64)
    # frequencies spread evenly from 10-cell down to ~2-cell wavelengths:
    # every draw carries fine structure that coarse spatial averaging loses
    freqs = np.linspace(0.10, 0.45, cfg.n_modes)
    amp = cfg.speed_amplitude / cfg.n_modes
    for k in range(cfg.n_modes):
        phase = rng.uniform(0, 2 * np.pi)
        row_m = int(rng.integers(1, max(2, h // 2)))
        row_phase = rng.uniform(0, 2 * np.pi)
        row_gain = 1.0 + 0.5 * np.sin(2 * np.pi * row_m * r / h + row_phase)
        speed += amp * np.sin(2 * np.pi * freqs[k] * u + phase) * row_gain
    if cfg.noise_std > 0:
        speed += cfg.noise_std * rng.standard_normal(speed.shape)

    def smooth_field(base, scale, t_period):
        phases = rng.uniform(0, 2 * np.pi, size=3)
        f = base + scale * (
            np.sin(2 * np.pi * t / t_period + phases[0])
            + 0.5 * np.sin(2 * np.pi * r / h + phases[1])
            + 0.5 * np.sin(2 * np.pi * c / w + phases[2])
        )
        return np.broadcast_to(f, (cfg.steps, h, w)).copy()

    direction = smooth_field(270.0, 8.0, 97.0)  # wind from the west, +c downwind
    pressure = smooth_field(1013.0, 4.0, 211.0)
    temperature = smooth_field(15.0, 5.0, 151.0)
    density = smooth_field(1.225, 0.01, 173.0)

    raw = np.stack([speed, direction, pressure, temperature, density], axis=1)
    return raw.astype(np.float32)


def scenes_from_raw(raw: np.ndarray, layout: TurbineLayout, cfg: SynthConfig) -> dict:
    """Encode direction, zero non-turbine cells, wrap into Scene views."""
    mask = layout.valid_mask()
    encoded = encode_features(np.moveaxis(raw, 1, -1))  # [steps, H, W, 6]
    encoded = np.moveaxis(encoded, -1, 1) * mask  # [steps, 6, H, W]
    encoded = np.ascontiguousarray(encoded, dtype=np.float32)
    encoded.flags.writeable = False
    return {
        int(ts): Scene(features=encoded[i], valid_mask=mask,
                       timestamp=int(ts))
        for i, ts in enumerate(np.arange(raw.shape[0]) * cfg.spacing_minutes)
    }


def synthesize_wake_dataset(layout: TurbineLayout, steps: int, seed: int,
                            wake_speed_cells_per_step: int = 1, noise_std: float = 0.1,
                            T: int = 4, horizon_minutes: int = 60,
                            spacing_minutes: int = 30, **kwargs):
    """Deterministic synthetic dataset of sliding-window sequences."""
    cfg = SynthConfig(
        steps=steps, seed=seed, wake_speed_cells_per_step=wake_speed_cells_per_step,
        noise_std=noise_std, spacing_minutes=spacing_minutes, **kwargs,
    )
    horizon_steps = horizon_minutes // spacing_minutes
    if horizon_minutes % spacing_minutes:
        raise DataError(
            f"horizon {horizon_minutes} not a multiple of spacing {spacing_minutes}"
        )
    if steps < T + horizon_steps:
        raise DataError(
            f"steps={steps} too short for T={T} plus horizon {horizon_steps} steps"
        )
    raw = generate_raw_fields(layout, cfg)
    scenes = scenes_from_raw(raw, layout, cfg)
    return build_sequences(scenes, layout, horizon_minutes, T)


def write_dataset_csv(path, layout: TurbineLayout, raw: np.ndarray,
                      spacing_minutes: int = 30):
    """Dump raw fields as the ingestion CSV (9 significant digits: float32
    values survive the text round-trip exactly)."""
    rows_idx, cols_idx = layout.rows_cols()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp,turbine_id,wind_speed,wind_direction_deg,"
                 "pressure,temperature,air_density\n")
        for i in range(raw.shape[0]):
            ts = i * spacing_minutes
            vals = raw[i][:, rows_idx, cols_idx]  # [5, L]
            for j, tid in enumerate(layout.turbine_ids):
                fh.write(f"{ts},{tid}," + ",".join(f"{v:.9g}" for v in vals[:, j]) + "\n")
