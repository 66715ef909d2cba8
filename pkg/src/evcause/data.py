"""Observational event data: ingestion, treatments, sampling, splits, noise.

An :class:`EventCube` holds per-location, per-type, per-time event counts. A
sample is one (location, time) instance whose covariates are the raw counts
of every event type over the trailing window, whose treatment vector marks
event types that rose notably between consecutive windows, and whose outcome
is the occurrence of the target type a fixed lead ahead.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError, IngestionError, ParameterError

TREATMENT_RATIO = 1.5

CSV_HEADER = ["location_id", "time_index", "event_type", "count"]


@dataclass
class EventCube:
    """Dense per-location event counts plus optional location connectivity."""

    counts: np.ndarray  # (M, E, T) nonnegative integers
    location_ids: list[str]
    geo_adjacency: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3:
            raise DimensionError(f"counts must be (M, E, T), got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ParameterError("event counts must be nonnegative")
        m = self.counts.shape[0]
        if len(self.location_ids) != m:
            raise DimensionError(
                f"{len(self.location_ids)} location ids for {m} locations"
            )
        if self.geo_adjacency is not None:
            self.geo_adjacency = np.asarray(self.geo_adjacency, dtype=np.float64)
            if self.geo_adjacency.shape != (m, m):
                raise DimensionError(
                    f"adjacency shape {self.geo_adjacency.shape} is not ({m}, {m})"
                )
            if np.any(self.geo_adjacency < 0):
                raise ParameterError("adjacency weights must be nonnegative")

    @property
    def num_locations(self) -> int:
        return self.counts.shape[0]

    @property
    def num_event_types(self) -> int:
        return self.counts.shape[1]

    @property
    def num_steps(self) -> int:
        return self.counts.shape[2]


@dataclass
class SampleWindow:
    """One (location, time) instance: covariate window, treatments, outcome."""

    location: int
    t: int
    covariates: np.ndarray  # (E, window) nonnegative reals
    treatments: np.ndarray  # (E,) in {0, 1}
    outcome: int            # {0, 1}
    lead: int

    @property
    def key(self) -> tuple[int, int]:
        """(time, location): the canonical ordering key for deterministic passes."""
        return (self.t, self.location)


@dataclass
class DatasetSplit:
    train: list[SampleWindow]
    validation: list[SampleWindow]
    test: list[SampleWindow]
    seed: int
    ratios: tuple[float, float, float]

    def all_samples(self) -> list[SampleWindow]:
        return self.train + self.validation + self.test


@dataclass
class DatasetConfig:
    """On-disk dataset description; see README for the JSON schema."""

    M: int
    E: int
    T: int
    window: int = 7
    lead: int = 1
    target_type: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    chronological: bool = False

    def __post_init__(self):
        for name in ("M", "E", "T", "window", "lead"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset config field {name} must be positive")
        if not 0 <= self.target_type < self.E:
            raise ConfigError(f"target_type {self.target_type} outside [0, {self.E})")
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios must be three values summing to 1, got {self.ratios}")

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "M": self.M, "E": self.E, "T": self.T, "window": self.window,
            "lead": self.lead, "target_type": self.target_type,
            "ratios": list(self.ratios), "seed": self.seed,
            "chronological": self.chronological,
        }

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- ingestion -----------------------------------------------------------------


def load_event_csv(path, num_locations=None, num_event_types=None, num_steps=None) -> EventCube:
    """Read `location_id,time_index,event_type,count` rows into a dense cube.

    Absent (location, type, time) rows are zero; duplicate rows are summed.
    Locations are ordered by first appearance. Dimensions not declared are
    inferred from the data maxima.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(f.strip() for f in r)]

    if not rows:
        if num_locations is None or num_event_types is None or num_steps is None:
            raise IngestionError(
                f"{path}: empty file requires declared M, E and T dimensions"
            )
        ids = [f"loc{i}" for i in range(num_locations)]
        return EventCube(np.zeros((num_locations, num_event_types, num_steps), dtype=np.int64), ids)

    header_line, header = rows[0]
    if [h.strip() for h in header] != CSV_HEADER:
        raise IngestionError(
            f"{path}: line {header_line}: expected header {','.join(CSV_HEADER)}"
        )

    parsed = []
    loc_index: dict[str, int] = {}
    max_type = -1
    max_time = -1
    for line_no, row in rows[1:]:
        if len(row) != 4:
            raise IngestionError(f"{path}: line {line_no}: expected 4 fields, got {len(row)}")
        loc_id = row[0].strip()
        try:
            t = int(row[1])
            etype = int(row[2])
            count = int(row[3])
        except ValueError as exc:
            raise IngestionError(f"{path}: line {line_no}: {exc}") from None
        if count < 0:
            raise IngestionError(f"{path}: line {line_no}: negative count {count}")
        if t < 0 or (num_steps is not None and t >= num_steps):
            raise IngestionError(f"{path}: line {line_no}: time_index {t} out of range")
        if etype < 0 or (num_event_types is not None and etype >= num_event_types):
            raise IngestionError(f"{path}: line {line_no}: unknown event type {etype}")
        if loc_id not in loc_index:
            if num_locations is not None and len(loc_index) >= num_locations:
                raise IngestionError(
                    f"{path}: line {line_no}: location {loc_id!r} exceeds declared M={num_locations}"
                )
            loc_index[loc_id] = len(loc_index)
        max_type = max(max_type, etype)
        max_time = max(max_time, t)
        parsed.append((loc_index[loc_id], etype, t, count))

    m = num_locations if num_locations is not None else len(loc_index)
    e = num_event_types if num_event_types is not None else max_type + 1
    steps = num_steps if num_steps is not None else max_time + 1
    ids = [None] * m
    for loc_id, idx in loc_index.items():
        ids[idx] = loc_id
    for i in range(m):
        if ids[i] is None:
            ids[i] = f"loc{i}"

    counts = np.zeros((m, e, steps), dtype=np.int64)
    for loc, etype, t, count in parsed:
        counts[loc, etype, t] += count
    return EventCube(counts, ids)


def load_adjacency_csv(path, num_locations: int) -> np.ndarray:
    """Read an M-by-M numeric grid (no header)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) != num_locations:
        raise IngestionError(f"{path}: expected {num_locations} rows, got {len(rows)}")
    grid = np.zeros((num_locations, num_locations))
    for i, row in enumerate(rows):
        if len(row) != num_locations:
            raise IngestionError(f"{path}: line {i + 1}: expected {num_locations} columns")
        try:
            grid[i] = [float(v) for v in row]
        except ValueError as exc:
            raise IngestionError(f"{path}: line {i + 1}: {exc}") from None
    return grid


# -- treatments and samples -------------------------------------------------------


def window_treatment_flags(counts: np.ndarray, window: int, t: int) -> np.ndarray:
    """Treatment flags at time ``t`` for counts shaped (..., E, T).

    A type is treated when its mean count over [t-window+1, t] reaches 1.5x
    its mean over [t-2*window+1, t-window]. A zero baseline counts as treated
    exactly when the current window is nonzero.
    """
    if t - 2 * window + 1 < 0 or t >= counts.shape[-1]:
        raise ParameterError(
            f"treatment window out of range: t={t}, window={window}, T={counts.shape[-1]}"
        )
    current = counts[..., t - window + 1 : t + 1].mean(axis=-1)
    previous = counts[..., t - 2 * window + 1 : t - window + 1].mean(axis=-1)
    treated = np.where(previous > 0, current >= TREATMENT_RATIO * previous, current > 0)
    return treated.astype(np.int8)


def derive_treatments(cube: EventCube, window: int, t: int, i: int) -> np.ndarray:
    """Treatment vector for location ``i`` at time ``t``."""
    if not 0 <= i < cube.num_locations:
        raise ParameterError(f"location index {i} outside [0, {cube.num_locations})")
    return window_treatment_flags(cube.counts[i], window, t)


def build_samples(cube: EventCube, window: int, lead: int, target_type: int) -> list[SampleWindow]:
    """All valid samples, time-major: one per (t, i) with full windows and outcome."""
    m, e, steps = cube.counts.shape
    if window < 1 or lead < 1:
        raise ParameterError(f"window and lead must be positive, got {window}, {lead}")
    if not 0 <= target_type < e:
        raise ParameterError(f"target_type {target_type} outside [0, {e})")
    if steps < 2 * window + lead:
        raise ConfigError(
            f"T={steps} too small: need at least 2*window+lead = {2 * window + lead}"
        )
    samples = []
    for t in range(2 * window - 1, steps - lead):
        flags = window_treatment_flags(cube.counts, window, t)  # (M, E)
        for i in range(m):
            samples.append(SampleWindow(
                location=i,
                t=t,
                covariates=cube.counts[i, :, t - window + 1 : t + 1].astype(np.float64),
                treatments=flags[i],
                outcome=int(cube.counts[i, target_type, t + lead] > 0),
                lead=lead,
            ))
    return samples


def split(samples: list[SampleWindow], ratios=(0.7, 0.15, 0.15), seed: int = 0,
          chronological: bool = False) -> DatasetSplit:
    """Seeded uniform shuffle then contiguous partition (deterministic per seed).

    ``chronological=True`` keeps (time, location) order instead of shuffling,
    for leakage-sensitive studies.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ParameterError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    n = len(samples)
    if chronological:
        order = np.array(sorted(range(n), key=lambda k: samples[k].key), dtype=np.int64)
    else:
        order = np.random.default_rng(seed).permutation(n)
    cut1 = int(n * ratios[0])
    cut2 = int(n * (ratios[0] + ratios[1]))
    return DatasetSplit(
        train=[samples[k] for k in order[:cut1]],
        validation=[samples[k] for k in order[cut1:cut2]],
        test=[samples[k] for k in order[cut2:]],
        seed=seed,
        ratios=ratios,
    )


def inject_poisson_noise(samples: list[SampleWindow], lam: float, seed: int,
                         which: str = "features") -> list[SampleWindow]:
    """Return copies with independent Poisson(lam) noise added to each covariate.

    The input samples are never mutated.
    """
    if lam < 0:
        raise ParameterError(f"Poisson rate must be nonnegative, got {lam}")
    if which != "features":
        raise ParameterError(f"unsupported noise target {which!r}")
    rng = np.random.default_rng(seed)
    noisy = []
    for s in samples:
        noise = rng.poisson(lam, size=s.covariates.shape)
        noisy.append(replace(s, covariates=s.covariates + noise))
    return noisy


def positivity_report(samples: list[SampleWindow]) -> dict[int, float]:
    """Treated fraction per treatment event, warning on degenerate assignment."""
    if not samples:
        return {}
    c = np.stack([s.treatments for s in samples])
    fractions = {}
    for j in range(c.shape[1]):
        frac = float(c[:, j].mean())
        fractions[j] = frac
        if frac in (0.0, 1.0):
            warnings.warn(
                f"treatment {j}: treated fraction is {frac:.0f}; "
                "positivity does not hold on this split",
                stacklevel=2,
            )
    return fractions


# -- trainer-facing grids ------------------------------------------------------------


@dataclass
class TimeGrids:
    """Per-time-step dense arrays; one grid row carries all M locations."""

    times: np.ndarray        # (Ts,) sorted time indices
    covariates: np.ndarray   # (Ts, M, E, window)
    treatments: np.ndarray   # (Ts, M, E)
    outcomes: np.ndarray     # (Ts, M)
    train_mask: np.ndarray   # (Ts, M) bool
    val_mask: np.ndarray
    test_mask: np.ndarray

    def mask_for(self, part: str) -> np.ndarray:
        return {"train": self.train_mask, "validation": self.val_mask,
                "test": self.test_mask}[part]


def time_grids(dataset: DatasetSplit, num_locations: int) -> TimeGrids:
    """Regroup a sample split by time step for models that couple locations."""
    everything = dataset.all_samples()
    if not everything:
        raise ParameterError("cannot build grids from an empty split")
    e, window = everything[0].covariates.shape
    times = np.array(sorted({s.t for s in everything}), dtype=np.int64)
    pos = {int(t): r for r, t in enumerate(times)}
    ts = len(times)
    grids = TimeGrids(
        times=times,
        covariates=np.zeros((ts, num_locations, e, window)),
        treatments=np.zeros((ts, num_locations, e), dtype=np.int8),
        outcomes=np.zeros((ts, num_locations), dtype=np.int8),
        train_mask=np.zeros((ts, num_locations), dtype=bool),
        val_mask=np.zeros((ts, num_locations), dtype=bool),
        test_mask=np.zeros((ts, num_locations), dtype=bool),
    )
    filled = np.zeros((ts, num_locations), dtype=bool)
    for part, mask in (("train", grids.train_mask), ("validation", grids.val_mask),
                       ("test", grids.test_mask)):
        for s in getattr(dataset, part if part != "validation" else "validation"):
            r = pos[s.t]
            if filled[r, s.location]:
                raise ParameterError(
                    f"sample ({s.location}, {s.t}) appears in more than one partition"
                )
            filled[r, s.location] = True
            grids.covariates[r, s.location] = s.covariates
            grids.treatments[r, s.location] = s.treatments
            grids.outcomes[r, s.location] = s.outcome
            mask[r, s.location] = True
    return grids
