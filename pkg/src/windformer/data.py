"""Gridded turbine scenes: layouts, CSV ingestion, windowing, normalization.

A wind farm is modelled as an H x W grid of cells; each turbine occupies one
cell. A Scene is the grid snapshot of all encoded features at one timestamp,
and a SceneSequence is T consecutive scenes plus the per-turbine wind-speed
target at a later horizon.

Raw files carry five meteorological features per turbine. Wind direction is
an angle, discontinuous at 360 -> 0, so it is encoded as (sin, cos), giving
the model F = 6 channels. Non-turbine cells hold 0 and are flagged invalid.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

RAW_FEATURES = ("wind_speed", "wind_direction_deg", "pressure", "temperature", "air_density")
CHANNELS = ("wind_speed", "dir_sin", "dir_cos", "pressure", "temperature", "air_density")
WIND_SPEED_CHANNEL = 0
N_CHANNELS = len(CHANNELS)

CSV_COLUMNS = ("timestamp", "turbine_id") + RAW_FEATURES


@dataclass(frozen=True)
class TurbineLayout:
    """Mapping from turbines to grid cells.

    ``turbines`` is an ordered tuple of (id, row, col); its order defines the
    turbine index used everywhere a per-turbine vector appears.
    """

    grid_height: int
    grid_width: int
    turbines: tuple
    cell_resolution_km: float = 2.0

    def __post_init__(self):
        seen_cells, seen_ids = set(), set()
        for tid, row, col in self.turbines:
            if not (0 <= row < self.grid_height and 0 <= col < self.grid_width):
                raise DataError(f"turbine {tid!r} at ({row}, {col}) is outside the grid")
            if (row, col) in seen_cells:
                raise DataError(f"turbine {tid!r}: cell ({row}, {col}) already occupied")
            if tid in seen_ids:
                raise DataError(f"duplicate turbine id {tid!r}")
            seen_cells.add((row, col))
            seen_ids.add(tid)

    @property
    def n_turbines(self) -> int:
        return len(self.turbines)

    @property
    def turbine_ids(self):
        return tuple(t[0] for t in self.turbines)

    def rows_cols(self):
        rows = np.array([t[1] for t in self.turbines], dtype=np.intp)
        cols = np.array([t[2] for t in self.turbines], dtype=np.intp)
        return rows, cols

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros((self.grid_height, self.grid_width), dtype=bool)
        rows, cols = self.rows_cols()
        mask[rows, cols] = True
        return mask

    def to_json_file(self, path):
        doc = {
            "grid_height": self.grid_height,
            "grid_width": self.grid_width,
            "cell_resolution_km": self.cell_resolution_km,
            "turbines": [{"id": t, "row": r, "col": c} for t, r, c in self.turbines],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json_file(cls, path) -> "TurbineLayout":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            return cls(
                grid_height=int(doc["grid_height"]),
                grid_width=int(doc["grid_width"]),
                cell_resolution_km=float(doc.get("cell_resolution_km", 2.0)),
                turbines=tuple((t["id"], int(t["row"]), int(t["col"])) for t in doc["turbines"]),
            )
        except (KeyError, TypeError, ValueError, OSError, json.JSONDecodeError) as e:
            raise DataError(f"bad layout file {path}: {e}") from e


def dense_layout(grid_height, grid_width, n_turbines=None, seed=0) -> TurbineLayout:
    """Layout filling the grid row-major; if ``n_turbines`` is given, that many
    cells are kept, chosen at random but reproducibly."""
    cells = [(r, c) for r in range(grid_height) for c in range(grid_width)]
    if n_turbines is not None:
        if n_turbines > len(cells):
            raise DataError(f"{n_turbines} turbines cannot fit {len(cells)} cells")
        idx = np.random.default_rng(seed).choice(len(cells), size=n_turbines, replace=False)
        cells = [cells[i] for i in sorted(idx)]
    turbines = tuple((f"T{i:04d}", r, c) for i, (r, c) in enumerate(cells))
    return TurbineLayout(grid_height, grid_width, turbines)


@dataclass(frozen=True)
class Scene:
    """One grid snapshot: ``features`` [F, H, W], invalid cells hold 0."""

    features: np.ndarray
    valid_mask: np.ndarray
    timestamp: int

    def __post_init__(self):
        if self.features.ndim != 3 or self.features.shape[1:] != self.valid_mask.shape:
            raise DataError(
                f"scene features {self.features.shape} do not match mask {self.valid_mask.shape}"
            )


@dataclass(frozen=True)
class SceneSequence:
    """T consecutive scenes plus the target wind speeds at +horizon minutes."""

    scenes: tuple
    target: np.ndarray
    horizon_minutes: int
    target_timestamp: int = field(default=-1)

    def __post_init__(self):
        if len(self.scenes) < 1:
            raise DataError("a sequence needs at least one scene")
        ts = [s.timestamp for s in self.scenes]
        diffs = np.diff(ts)
        if len(diffs) and (np.any(diffs <= 0) or np.any(diffs != diffs[0])):
            raise DataError(f"scene timestamps not strictly increasing and uniform: {ts}")
        if not np.all(np.isfinite(self.target)):
            raise DataError("non-finite target")

    @property
    def T(self) -> int:
        return len(self.scenes)

    @property
    def spacing_minutes(self) -> int:
        return int(self.scenes[1].timestamp - self.scenes[0].timestamp) if self.T > 1 else 0


def encode_features(raw: np.ndarray) -> np.ndarray:
    """Raw 5-feature rows [..., 5] -> encoded 6-channel rows [..., 6]."""
    out = np.empty(raw.shape[:-1] + (N_CHANNELS,), dtype=raw.dtype)
    theta = np.deg2rad(raw[..., 1])
    out[..., 0] = raw[..., 0]
    out[..., 1] = np.sin(theta)
    out[..., 2] = np.cos(theta)
    out[..., 3:] = raw[..., 2:]
    return out


def embed_to_grid(records: dict, layout: TurbineLayout, timestamp: int = 0) -> Scene:
    """Place per-turbine feature vectors on the grid.

    ``records`` maps turbine id to a feature vector; every layout turbine must
    be present. Cells without a turbine hold 0 and are masked invalid.
    """
    missing = [tid for tid in layout.turbine_ids if tid not in records]
    if missing:
        raise DataError(f"missing record for turbine {missing[0]!r} at timestamp {timestamp}")
    n_feat = len(np.atleast_1d(next(iter(records.values()))))
    grid = np.zeros((n_feat, layout.grid_height, layout.grid_width), dtype=np.float32)
    rows, cols = layout.rows_cols()
    vals = np.stack([np.atleast_1d(records[tid]) for tid in layout.turbine_ids])
    grid[:, rows, cols] = vals.T
    return Scene(features=grid, valid_mask=layout.valid_mask(), timestamp=timestamp)


def extract_turbine_values(scene: Scene, layout: TurbineLayout) -> np.ndarray:
    """Inverse of ``embed_to_grid``: per-turbine rows [L, F]."""
    rows, cols = layout.rows_cols()
    return scene.features[:, rows, cols].T.copy()


def load_csv_dataset(path, layout: TurbineLayout, horizon_minutes: int, T: int):
    """Read the per-turbine CSV into sliding-window sequences.

    Expected header: timestamp, turbine_id, wind_speed, wind_direction_deg,
    pressure, temperature, air_density. Rows with NaN features are rejected
    (counted); timestamps without full turbine coverage become gaps, and
    windows spanning a gap are skipped.
    """
    ids = set(layout.turbine_ids)
    by_time: dict[int, dict] = {}
    rejected = 0
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(CSV_COLUMNS):
            raise DataError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                ts = int(row[0])
                tid = row[1]
                vals = np.array([float(v) for v in row[2:]], dtype=np.float32)
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            if tid not in ids:
                raise DataError(f"{path}:{lineno}: unknown turbine id {tid!r}")
            if not np.all(np.isfinite(vals)):
                rejected += 1
                continue
            by_time.setdefault(ts, {})[tid] = vals
    if rejected:
        log.info("%s: rejected %d records with non-finite features", path, rejected)

    scenes = {}
    dropped_times = 0
    for ts in sorted(by_time):
        records = by_time[ts]
        if len(records) != layout.n_turbines:
            dropped_times += 1
            continue
        encoded = {tid: encode_features(v) for tid, v in records.items()}
        scenes[ts] = embed_to_grid(encoded, layout, timestamp=ts)
    if dropped_times:
        log.info("%s: dropped %d timestamps with incomplete coverage", path, dropped_times)
    return build_sequences(scenes, layout, horizon_minutes, T)


def build_sequences(scenes: dict, layout: TurbineLayout, horizon_minutes: int, T: int,
                    stride: int = 1):
    """Assemble sliding windows from a timestamp -> Scene map.

    Window spacing is the smallest timestamp difference present; windows whose
    T input steps or target timestamp are missing are skipped and counted.
    """
    times = sorted(scenes)
    if len(times) < 2:
        raise DataError("need at least two timestamps to form sequences")
    dt = int(min(np.diff(times)))
    if horizon_minutes % dt:
        raise DataError(f"horizon {horizon_minutes} not a multiple of spacing {dt} minutes")
    present = set(times)
    rows, cols = layout.rows_cols()
    sequences = []
    skipped = 0
    for t0 in times[::stride]:
        wanted = [t0 + k * dt for k in range(T)]
        target_ts = t0 + (T - 1) * dt + horizon_minutes
        if any(w not in present for w in wanted) or target_ts not in present:
            skipped += 1
            continue
        target = scenes[target_ts].features[WIND_SPEED_CHANNEL, rows, cols].astype(np.float32)
        sequences.append(
            SceneSequence(
                scenes=tuple(scenes[w] for w in wanted),
                target=target,
                horizon_minutes=horizon_minutes,
                target_timestamp=target_ts,
            )
        )
    if skipped:
        log.info("skipped %d windows spanning gaps or running past the end", skipped)
    return sequences


def split_dataset(sequences, fractions=(0.7, 0.15, 0.15)):
    """Contiguous-in-time train/val/test split (no shuffling, no leakage)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    seqs = sorted(sequences, key=lambda s: s.scenes[0].timestamp)
    n = len(seqs)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return seqs[:n_train], seqs[n_train:n_train + n_val], seqs[n_train + n_val:]


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean/std fitted on the training split's valid cells."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            bad = int(np.argmin(self.std))
            raise DataError(
                f"feature {CHANNELS[bad]!r} has zero variance on the training split; rejected"
            )

    def to_json_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"mean": self.mean.tolist(), "std": self.std.tolist()}, fh, indent=1)

    @classmethod
    def from_json_file(cls, path) -> "FeatureStats":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            mean=np.array(doc["mean"], dtype=np.float32),
            std=np.array(doc["std"], dtype=np.float32),
        )

    # -- array paths used by batching, metrics and prediction ----------
    def apply_features(self, x: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
        """z-score feature maps [..., F, H, W]; invalid cells stay 0."""
        shape = (-1,) + (1, 1)
        out = (x - self.mean.reshape(shape)) / self.std.reshape(shape)
        return (out * valid_mask).astype(x.dtype)

    def invert_features(self, x: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1, 1)
        out = x * self.std.reshape(shape) + self.mean.reshape(shape)
        return (out * valid_mask).astype(x.dtype)

    def normalize_target(self, y: np.ndarray) -> np.ndarray:
        return ((y - self.mean[WIND_SPEED_CHANNEL]) / self.std[WIND_SPEED_CHANNEL]).astype(
            y.dtype
        )

    def denormalize_prediction(self, y: np.ndarray) -> np.ndarray:
        return (y * self.std[WIND_SPEED_CHANNEL] + self.mean[WIND_SPEED_CHANNEL]).astype(
            y.dtype
        )


def fit_normalizer(train_sequences) -> FeatureStats:
    """Channel stats over the unique scenes of the training split only."""
    seen = {}
    for seq in train_sequences:
        for scene in seq.scenes:
            seen.setdefault(scene.timestamp, scene)
    if not seen:
        raise DataError("cannot fit normalizer on an empty training split")
    total = np.zeros(N_CHANNELS, dtype=np.float64)
    total_sq = np.zeros(N_CHANNELS, dtype=np.float64)
    count = 0
    for ts in sorted(seen):
        scene = seen[ts]
        vals = scene.features[:, scene.valid_mask]
        total += vals.sum(axis=1)
        total_sq += (vals.astype(np.float64) ** 2).sum(axis=1)
        count += vals.shape[1]
    mean = total / count
    var = total_sq / count - mean ** 2
    return FeatureStats(
        mean=mean.astype(np.float32), std=np.sqrt(np.maximum(var, 0.0)).astype(np.float32)
    )


def stack_sequences(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays: raw features [B, T, F, H, W] and raw targets [B, L]."""
    x = np.stack([np.stack([s.features for s in seq.scenes]) for seq in sequences])
    y = np.stack([seq.target for seq in sequences])
    return x, y


def last_observed_wind_speed(sequence: SceneSequence, layout: TurbineLayout) -> np.ndarray:
    rows, cols = layout.rows_cols()
    return sequence.scenes[-1].features[WIND_SPEED_CHANNEL, rows, cols].copy()
