"""Activity data: accelerometer preprocessing, a synthetic stand-in source and
the non-IID user x iteration partitioner.

Preprocessing chain for one recording: two-second non-overlapping windows,
integer-factor decimation to 50 Hz, then single-level Haar approximation
coefficients per axis concatenated as x || y || z.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

TARGET_RATE = 50
WINDOW_SECONDS = 2.0


class InvalidRateError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class CapacityError(ValueError):
    """Not enough rows of some label to fill the requested shards."""

    def __init__(self, label: int, needed: int, available: int):
        super().__init__(f"label {label}: need {needed} rows, only {available} available")
        self.label = label
        self.needed = needed
        self.available = available


@dataclass(frozen=True)
class LabelUniverse:
    """Activity names with dense ids ``0..L-1`` in list order."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("label universe is empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate label names in {self.names}")

    def __len__(self):
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown label {name!r}; known: {', '.join(self.names)}") from None

    def label_set(self, names: Iterable[str]) -> tuple[int, ...]:
        ids = tuple(self.id(n) for n in names)
        return make_label_set(ids, len(self))


def make_label_set(ids: Iterable[int], universe_size: int | None = None) -> tuple[int, ...]:
    """Validate an ordered, duplicate-free, non-empty tuple of label ids."""
    ids = tuple(int(i) for i in ids)
    if not ids:
        raise ValueError("a label set cannot be empty")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate labels in {ids}")
    if universe_size is not None and any(not 0 <= i < universe_size for i in ids):
        raise ValueError(f"label ids {ids} outside 0..{universe_size - 1}")
    return ids


@dataclass
class RawRecording:
    timestamps: np.ndarray  # seconds, shape (n,)
    samples: np.ndarray  # (n, 3) acceleration x, y, z
    rate: float
    label: str

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 3)
        if self.samples.shape[0] != self.timestamps.shape[0]:
            raise ValueError("one (x, y, z) triple per timestamp required")
        if not self.rate > 0:
            raise InvalidRateError(f"sampling rate must be positive, got {self.rate}")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.rate


@dataclass
class LabeledData:
    """Feature rows with integer labels; stands in for both D_0 and a pooled source."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} disagree")

    def __len__(self):
        return self.y.shape[0]

    def index(self) -> dict[int, np.ndarray]:
        """Label id -> row indices, ascending."""
        return {int(l): np.flatnonzero(self.y == l) for l in np.unique(self.y)}


@dataclass
class PrivateShard:
    owner: int
    iteration: int
    features: np.ndarray
    labels: np.ndarray
    label_set: tuple[int, ...]
    source_rows: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        bad = set(np.unique(self.labels).tolist()) - set(self.label_set)
        if bad:
            raise ValueError(f"shard ({self.owner}, {self.iteration}) holds foreign labels {sorted(bad)}")

    def __len__(self):
        return self.labels.shape[0]


# -- preprocessing ----------------------------------------------------------


def window(rec: RawRecording, seconds: float = WINDOW_SECONDS) -> list[np.ndarray]:
    """Non-overlapping ``seconds``-long segments of shape (samples, 3); remainder dropped."""
    per = int(round(seconds * rec.rate))
    if per < 1:
        return []
    count = rec.samples.shape[0] // per
    return [rec.samples[k * per : (k + 1) * per] for k in range(count)]


def decimate(segment: np.ndarray, from_rate: float, to_rate: float = TARGET_RATE) -> np.ndarray:
    """Anti-aliased integer-factor downsampling along axis 0.

    Order-8 Butterworth low-pass at 80% of the target Nyquist frequency,
    run forward and backward (zero phase), then every ``q``-th sample.
    """
    if to_rate <= 0 or from_rate < to_rate:
        raise InvalidRateError(f"cannot decimate {from_rate} Hz to {to_rate} Hz")
    ratio = from_rate / to_rate
    q = int(round(ratio))
    if abs(ratio - q) > 1e-9:
        raise InvalidRateError(f"{from_rate} Hz -> {to_rate} Hz is not an integer factor")
    segment = np.asarray(segment, dtype=np.float64)
    if q == 1:
        return segment.copy()
    sos = signal.butter(8, 0.8 / q, output="sos")
    # sosfiltfilt's default padding needs more samples than very short segments have
    padlen = min(3 * (2 * len(sos) + 1), segment.shape[0] - 1)
    filtered = signal.sosfiltfilt(sos, segment, axis=0, padlen=padlen)
    return filtered[::q]


def dwt_approx(segment: np.ndarray) -> np.ndarray:
    """Single-level Haar approximation coefficients along axis 0.

    Odd lengths are padded by repeating the last sample.
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.shape[0] == 0:
        raise ValueError("dwt_approx of an empty signal")
    if segment.shape[0] % 2:
        segment = np.concatenate([segment, segment[-1:]], axis=0)
    return (segment[0::2] + segment[1::2]) / math.sqrt(2.0)


def make_feature_window(segment: np.ndarray, from_rate: float, to_rate: float = TARGET_RATE) -> np.ndarray:
    """Decimate, take Haar approximations per axis, concatenate x || y || z."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2 or segment.shape[1] != 3:
        raise ValueError(f"expected a (samples, 3) triaxial segment, got {segment.shape}")
    approx = dwt_approx(decimate(segment, from_rate, to_rate))
    return approx.T.reshape(-1)


def recordings_to_features(
    recordings: Sequence[RawRecording],
    universe: LabelUniverse,
    seconds: float = WINDOW_SECONDS,
    to_rate: float = TARGET_RATE,
) -> LabeledData:
    """Run the whole preprocessing chain; recordings with unknown labels are skipped."""
    rows, labels = [], []
    for rec in recordings:
        if rec.label not in universe.names:
            log.info("skipping recording with label %r outside the universe", rec.label)
            continue
        for seg in window(rec, seconds):
            rows.append(make_feature_window(seg, rec.rate, to_rate))
            labels.append(universe.id(rec.label))
    width = 3 * math.ceil(int(round(seconds * to_rate)) / 2)
    x = np.vstack(rows) if rows else np.zeros((0, width))
    return LabeledData(x, np.asarray(labels, dtype=np.int64))


# -- CSV ingestion ----------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for accelerometer CSV exports."""

    timestamp: str = "timestamp"
    x: str = "x"
    y: str = "y"
    z: str = "z"
    label: str = "label"
    rate: str | None = None  # optional per-row rate column
    delimiter: str = ","
    timestamp_unit: str = "s"  # s | ms | us | ns
    default_rate: float | None = None  # used when there is no rate column
    on_malformed: str = "skip"  # skip | error

    def __post_init__(self):
        if self.timestamp_unit not in _TIME_SCALE:
            raise SchemaError(f"timestamp_unit must be one of {sorted(_TIME_SCALE)}")
        if self.on_malformed not in ("skip", "error"):
            raise SchemaError("on_malformed must be 'skip' or 'error'")


_TIME_SCALE = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}


@dataclass
class IngestResult:
    recordings: list[RawRecording]
    malformed: int = 0


def load_schema(path: str | Path) -> CsvSchema:
    """Read a ``key = value`` schema file (keys are :class:`CsvSchema` fields)."""
    from .config import parse_flat  # local import: config depends on data types

    entries = parse_flat(Path(path).read_text(encoding="utf-8"), source=str(path))
    allowed = set(CsvSchema.__dataclass_fields__)
    kwargs = {}
    for key, (value, line) in entries.items():
        if key not in allowed:
            raise SchemaError(f"{path}:{line}: unknown schema key {key!r}")
        if key == "default_rate":
            kwargs[key] = float(value)
        elif key == "delimiter" and value in ("tab", "\\t"):
            kwargs[key] = "\t"
        else:
            kwargs[key] = value
    return CsvSchema(**kwargs)


def _estimate_rate(timestamps: np.ndarray) -> float:
    if timestamps.size < 2:
        raise InvalidRateError("cannot infer a sampling rate from fewer than 2 samples")
    step = float(np.median(np.diff(timestamps)))
    if step <= 0:
        raise InvalidRateError("timestamps are not increasing")
    return 1.0 / step


def ingest_csv(path: str | Path, schema: CsvSchema = CsvSchema()) -> IngestResult:
    """Load accelerometer rows and group contiguous label runs into recordings.

    The rate of each recording comes from the rate column if mapped, else
    ``schema.default_rate``, else the median timestamp spacing.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: no header row")
        required = [schema.timestamp, schema.x, schema.y, schema.z, schema.label]
        if schema.rate:
            required.append(schema.rate)
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")

        scale = _TIME_SCALE[schema.timestamp_unit]
        runs: list[tuple[str, list, list, list]] = []
        malformed = 0
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row[schema.timestamp]) * scale
                xyz = [float(row[schema.x]), float(row[schema.y]), float(row[schema.z])]
                rate = float(row[schema.rate]) if schema.rate else None
                label = (row[schema.label] or "").strip()
                if not label or not all(map(math.isfinite, xyz + [t])):
                    raise ValueError("empty label or non-finite value")
            except (TypeError, ValueError) as exc:
                if schema.on_malformed == "error":
                    raise SchemaError(f"{path}:{lineno}: malformed row ({exc})") from None
                malformed += 1
                continue
            if not runs or runs[-1][0] != label:
                runs.append((label, [], [], []))
            runs[-1][1].append(t)
            runs[-1][2].append(xyz)
            runs[-1][3].append(rate)

    recordings = []
    for label, ts, xyz, rates in runs:
        ts = np.asarray(ts)
        if schema.rate:
            rate = float(np.median(rates))
        elif schema.default_rate:
            rate = schema.default_rate
        else:
            rate = _estimate_rate(ts)
        recordings.append(RawRecording(ts, np.asarray(xyz), rate, label))
    if malformed:
        log.warning("%s: skipped %d malformed row(s)", path, malformed)
    return IngestResult(recordings, malformed)


# -- synthetic source -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticParams:
    """Knobs of the Gaussian-cluster stand-in for real activity windows.

    ``separation`` is the typical distance between label means in units of
    the base noise scale; ``drift_magnitude`` is the per-coordinate standard
    deviation (same units) of the mean offset applied at a drifted draw.
    ``anisotropy`` spreads per-coordinate scales over exp(+-anisotropy/2).
    """

    dim: int = 150
    separation: float = 3.0
    anisotropy: float = 1.0
    drift_magnitude: float = 0.3
    noise: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("synthetic dim must be >= 2")
        if self.noise <= 0 or self.separation < 0 or self.drift_magnitude < 0 or self.anisotropy < 0:
            raise ValueError("synthetic parameters must be non-negative (noise positive)")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# stream tags so independent random quantities never share a generator
_MEANS, _SCALES, _DRIFT, _DRAW = 11, 12, 13, 14


class SyntheticWorld:
    """Fixed label geometry from which any number of drifted draws can be taken."""

    def __init__(self, n_labels: int, params: SyntheticParams = SyntheticParams(), seed: int = 0):
        self.n_labels = n_labels
        self.params = params
        self.seed = seed
        d = params.dim
        radius = params.separation * params.noise / math.sqrt(2.0)
        directions = _rng(seed, _MEANS).normal(size=(n_labels, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.means = radius * directions
        self.scales = params.noise * np.exp(
            params.anisotropy * (_rng(seed, _SCALES).uniform(size=(n_labels, d)) - 0.5)
        )

    def drift_offset(self, label: int, drift: int, group: int = 0) -> np.ndarray:
        if drift == 0 or self.params.drift_magnitude == 0:
            return np.zeros(self.params.dim)
        rng = _rng(self.seed, _DRIFT, group, drift, label)
        return self.params.drift_magnitude * self.params.noise * rng.normal(size=self.params.dim)

    def sample(
        self,
        labels: Sequence[int],
        per_label: int,
        drift: int = 0,
        stream: int = 0,
        group: int = 0,
    ) -> LabeledData:
        """``per_label`` rows for each label, label-major order.

        ``drift`` (an iteration index) and ``group`` (a user id) key the mean
        offsets; ``stream`` only keys the noise, so draws that share drift and
        group come from the same distribution.
        """
        if per_label < 1:
            raise ValueError("per_label must be >= 1")
        rng = _rng(self.seed, _DRAW, stream, group, drift)
        xs, ys = [], []
        for label in labels:
            mean = self.means[label] + self.drift_offset(label, drift, group)
            xs.append(mean + self.scales[label] * rng.normal(size=(per_label, self.params.dim)))
            ys.append(np.full(per_label, label, dtype=np.int64))
        return LabeledData(np.vstack(xs), np.concatenate(ys))


def synth_generate(
    n_labels: int,
    per_label_count: int,
    dim: int = 150,
    seed: int = 0,
    drift: int = 0,
    params: SyntheticParams | None = None,
) -> LabeledData:
    """One synthetic dataset covering every label; the public set uses ``drift=0``."""
    if params is None:
        params = SyntheticParams(dim=dim)
    elif params.dim != dim:
        params = SyntheticParams(dim, params.separation, params.anisotropy, params.drift_magnitude, params.noise)
    world = SyntheticWorld(n_labels, params, seed)
    return world.sample(range(n_labels), per_label_count, drift=drift)


# -- partitioning -----------------------------------------------------------


def partition_noniid(
    dataset: LabeledData,
    users: Sequence[Sequence[int]],
    iterations: int,
    per_label_per_iteration: int,
    seed: int = 0,
) -> list[list[PrivateShard]]:
    """Disjoint shards ``grid[user][iteration]`` drawn from a finite dataset.

    Each shard holds exactly ``per_label_per_iteration`` rows of every label in
    the user's label set. Rows of a label are handed out from one seeded
    permutation, so no row is used twice across the whole grid.
    """
    if iterations < 1 or per_label_per_iteration < 1:
        raise ValueError("iterations and per_label_per_iteration must be >= 1")
    index = dataset.index()
    demand: dict[int, int] = {}
    for labels in users:
        for l in labels:
            demand[l] = demand.get(l, 0) + iterations * per_label_per_iteration
    pools = {}
    for l in sorted(demand):
        rows = index.get(l, np.zeros(0, dtype=np.int64))
        if rows.size < demand[l]:
            raise CapacityError(l, demand[l], rows.size)
        pools[l] = rows[_rng(seed, _DRAW, l).permutation(rows.size)]
    cursor = {l: 0 for l in pools}

    grid = []
    for m, labels in enumerate(users):
        row = []
        for i in range(iterations):
            picks = []
            for l in labels:
                start = cursor[l]
                picks.append(pools[l][start : start + per_label_per_iteration])
                cursor[l] = start + per_label_per_iteration
            idx = np.concatenate(picks)
            row.append(
                PrivateShard(m, i + 1, dataset.x[idx], dataset.y[idx], tuple(labels), source_rows=idx)
            )
        grid.append(row)
    return grid


def synth_shards(
    world: SyntheticWorld,
    users: Sequence[Sequence[int]],
    iterations: int,
    per_label_per_iteration: int,
) -> list[list[PrivateShard]]:
    """Generator-backed shards: fresh draws whose means drift per (user, iteration)."""
    grid = []
    for m, labels in enumerate(users):
        row = []
        for i in range(1, iterations + 1):
            d = world.sample(labels, per_label_per_iteration, drift=i, stream=1000 + m, group=m + 1)
            row.append(PrivateShard(m, i, d.x, d.y, tuple(labels)))
        grid.append(row)
    return grid


def shift_shard(shard: PrivateShard, magnitude: float) -> PrivateShard:
    """Copy of ``shard`` with a class-conditional distribution shift.

    Every label's rows move ``magnitude`` of the way from their own centroid
    toward the centroid of the shard's other labels: 0.5 makes the classes
    coincide, 1.0 swaps them (for two labels). Used to inject a local
    accuracy dip into one user's iteration.
    """
    x = shard.features.copy()
    labels = [l for l in shard.label_set if np.any(shard.labels == l)]
    if len(labels) < 2:
        return PrivateShard(shard.owner, shard.iteration, x, shard.labels, shard.label_set, shard.source_rows)
    centroids = {l: shard.features[shard.labels == l].mean(axis=0) for l in labels}
    for l in labels:
        others = np.mean([centroids[k] for k in labels if k != l], axis=0)
        x[shard.labels == l] += magnitude * (others - centroids[l])
    return PrivateShard(shard.owner, shard.iteration, x, shard.labels, shard.label_set, shard.source_rows)


def split_public(
    pool: LabeledData, n_labels: int, public_per_label: int, seed: int = 0
) -> tuple[LabeledData, LabeledData]:
    """Take ``public_per_label`` rows of every label for D_0; return (public, remainder)."""
    index = pool.index()
    chosen = []
    for l in range(n_labels):
        rows = index.get(l, np.zeros(0, dtype=np.int64))
        if rows.size < public_per_label:
            raise CapacityError(l, public_per_label, rows.size)
        chosen.append(np.sort(_rng(seed, _MEANS, l).permutation(rows)[:public_per_label]))
    public_idx = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(len(pool)), public_idx)
    return (
        LabeledData(pool.x[public_idx], pool.y[public_idx]),
        LabeledData(pool.x[rest], pool.y[rest]),
    )
