"""Flow data ingestion, scaling, windowing, splitting and synthetic generation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.PCG64"
CSV_HEADER = ("time_index", "region_index", "inflow", "outflow")


class DataError(ValueError):
    """Raised for malformed or inconsistent flow data."""


@dataclass(frozen=True)
class DatasetMeta:
    n_regions: int
    slots_per_day: int = 48
    interval_minutes: int = 30
    start_slot_of_week: int = 0

    def __post_init__(self):
        if self.n_regions < 1 or self.slots_per_day < 1 or self.interval_minutes < 1:
            raise DataError("n_regions, slots_per_day and interval_minutes must be positive")
        if self.slots_per_day * self.interval_minutes != 1440:
            raise DataError(
                f"slots_per_day * interval_minutes must be 1440, got "
                f"{self.slots_per_day} * {self.interval_minutes}"
            )
        if not 0 <= self.start_slot_of_week < 7 * self.slots_per_day:
            raise DataError("start_slot_of_week outside [0, 7 * slots_per_day)")

    @property
    def slots_per_week(self) -> int:
        return 7 * self.slots_per_day

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FlowDataset:
    """Inflow and outflow counts, each a ``[T, n]`` array."""

    meta: DatasetMeta
    inflow: np.ndarray
    outflow: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inflow = np.asarray(self.inflow, dtype=np.float64)
        self.outflow = np.asarray(self.outflow, dtype=np.float64)
        if self.inflow.ndim != 2 or self.inflow.shape != self.outflow.shape:
            raise DataError(
                f"inflow {self.inflow.shape} and outflow {self.outflow.shape} must share a [T, n] shape"
            )
        if self.inflow.shape[1] != self.meta.n_regions:
            raise DataError(
                f"flow matrices have {self.inflow.shape[1]} regions, meta says {self.meta.n_regions}"
            )
        for arr in (self.inflow, self.outflow):
            if not np.all(np.isfinite(arr)) or (arr < 0).any():
                raise DataError("flows must be finite and nonnegative")

    @property
    def n_slots(self) -> int:
        return self.inflow.shape[0]

    @property
    def n_regions(self) -> int:
        return self.inflow.shape[1]

    def time_of_week(self, t) -> np.ndarray:
        return (self.meta.start_slot_of_week + np.asarray(t)) % self.meta.slots_per_week


@dataclass(frozen=True)
class NormalizationStats:
    min: float
    max: float

    @property
    def scale(self) -> float:
        """Range width; 1 for a range negligible next to its magnitude (constant data)."""
        width = self.max - self.min
        if width <= 1e-12 * max(1.0, abs(self.min), abs(self.max)):
            return 1.0
        return width

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.min


def fit_normalizer(data: FlowDataset, slots: Optional[Sequence[int]] = None) -> NormalizationStats:
    """Min-max statistics over both channels of the given slots (all by default)."""
    idx = slice(None) if slots is None else np.asarray(slots)
    inflow, outflow = data.inflow[idx], data.outflow[idx]
    if inflow.size == 0:
        raise DataError("cannot fit a normalizer on an empty selection")
    lo = float(min(inflow.min(), outflow.min()))
    hi = float(max(inflow.max(), outflow.max()))
    return NormalizationStats(lo, hi)


@dataclass
class Sample:
    """One supervised instance: k-slot histories ending at ``time_index``, targets at +1."""

    history_in: np.ndarray
    history_out: np.ndarray
    time_index: int
    target_in: np.ndarray
    target_out: np.ndarray

    @property
    def target_slot(self) -> int:
        return self.time_index + 1


def make_samples(
    data: FlowDataset,
    k: int,
    target_slots: Optional[Sequence[int]] = None,
    stats: Optional[NormalizationStats] = None,
) -> list[Sample]:
    """Window a dataset into chronological samples.

    Args:
        data: Source flows.
        k: History length.
        target_slots: Restrict to these target slots; each must be in ``[k, T-1]``.
            Defaults to every valid target slot.
        stats: When given, histories and targets are scaled with it.
    """
    T = data.n_slots
    if k < 1:
        raise DataError("history length k must be at least 1")
    if T <= k:
        raise DataError(f"need more than k={k} slots, dataset has {T}")
    if target_slots is None:
        target_slots = range(k, T)
    inflow, outflow = data.inflow, data.outflow
    if stats is not None:
        inflow, outflow = stats.apply(inflow), stats.apply(outflow)
    samples = []
    for s in target_slots:
        s = int(s)
        if not k <= s < T:
            raise DataError(f"target slot {s} outside [{k}, {T - 1}]")
        samples.append(
            Sample(
                history_in=inflow[s - k : s].T.copy(),
                history_out=outflow[s - k : s].T.copy(),
                time_index=s - 1,
                target_in=inflow[s].copy(),
                target_out=outflow[s].copy(),
            )
        )
    return samples


@dataclass(frozen=True)
class Split:
    """Target slots per partition."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split(
    data: FlowDataset,
    train_days: int,
    val_fraction: float = 0.2,
    k: int = 1,
    disallow_overlap: bool = False,
) -> Split:
    """Chronological train/validation/test split by target slot.

    The first ``train_days`` days form train+validation, the last
    ``val_fraction`` of them being validation; the remaining slots are test.
    Histories may reach back across a boundary unless ``disallow_overlap``
    is set, in which case the first k targets of a later partition are dropped.
    """
    if not 0.0 < val_fraction < 1.0:
        raise DataError("val_fraction must lie in (0, 1)")
    T = data.n_slots
    n_trainval = train_days * data.meta.slots_per_day
    if train_days < 1 or n_trainval >= T:
        raise DataError(
            f"train_days={train_days} covers {n_trainval} slots but the dataset has only {T}"
        )
    n_val = int(round(val_fraction * n_trainval))
    val_start = n_trainval - n_val
    bounds = [(0, val_start), (val_start, n_trainval), (n_trainval, T)]
    names = ("train", "validation", "test")
    parts = []
    for name, (lo, hi) in zip(names, bounds):
        if hi - lo < k + 1:
            raise DataError(f"{name} partition has {hi - lo} slots, needs at least k+1={k + 1}")
        first = k if lo == 0 else (lo + k if disallow_overlap else lo)
        parts.append(np.arange(max(first, k), hi))
    return Split(*parts)


@dataclass
class SyntheticSpec:
    n_regions: int = 20
    days: int = 30
    slots_per_day: int = 48
    base_level: float = 100.0
    daily_amplitude: float = 50.0
    noise_std: float = 5.0
    lag_edges: list = field(default_factory=list)
    seed: int = 0
    start_slot_of_week: int = 0

    def __post_init__(self):
        self.lag_edges = [tuple(e) for e in self.lag_edges]
        for src, dst, lag, _ in self.lag_edges:
            if lag < 1:
                raise DataError("lag edges need lag >= 1")
            if not (0 <= src < self.n_regions and 0 <= dst < self.n_regions):
                raise DataError(f"lag edge ({src}, {dst}) references an unknown region")


def seasonal_component(spec: SyntheticSpec, phases: np.ndarray) -> np.ndarray:
    """Noise-free daily pattern, shape ``[T, n]`` for one channel."""
    t = np.arange(spec.days * spec.slots_per_day)
    angle = 2.0 * np.pi * (t % spec.slots_per_day) / spec.slots_per_day
    return spec.base_level + spec.daily_amplitude * np.sin(angle[:, None] + phases[None, :])


def generate_synthetic(spec: SyntheticSpec) -> FlowDataset:
    """Seeded flows with daily seasonality and lagged region-to-region coupling.

    Each channel follows
    ``base + amp * sin(2 pi (t mod S)/S + phase_r) + sum_edges w * flow_src(t - lag) + noise``
    clamped at zero, with per-region phases and Gaussian noise drawn from a
    PCG64 stream seeded by ``spec.seed``. Slots before the start count as 0.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, T = spec.n_regions, spec.days * spec.slots_per_day
    channels = []
    phases_all = rng.uniform(0.0, 2.0 * np.pi, size=(2, n))
    noise_all = rng.standard_normal(size=(2, T, n)) * spec.noise_std
    for c in range(2):
        seasonal = seasonal_component(spec, phases_all[c])
        flow = np.zeros((T, n))
        for t in range(T):
            row = seasonal[t] + noise_all[c, t]
            for src, dst, lag, weight in spec.lag_edges:
                if t - lag >= 0:
                    row[dst] += weight * flow[t - lag, src]
            flow[t] = np.maximum(row, 0.0)
        channels.append(flow)
    meta = DatasetMeta(
        n_regions=n,
        slots_per_day=spec.slots_per_day,
        interval_minutes=1440 // spec.slots_per_day,
        start_slot_of_week=spec.start_slot_of_week,
    )
    extra = {"rng_algorithm": RNG_ALGORITHM, "seed": spec.seed, "phases": phases_all}
    return FlowDataset(meta, channels[0], channels[1], extra=extra)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------
def _data_lines(handle):
    for lineno, line in enumerate(handle, start=1):
        if line.startswith("#") or not line.strip():
            continue
        yield lineno, line


def load_meta(path) -> DatasetMeta:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return DatasetMeta(
            n_regions=int(raw["n_regions"]),
            slots_per_day=int(raw["slots_per_day"]),
            interval_minutes=int(raw["interval_minutes"]),
            start_slot_of_week=int(raw.get("start_slot_of_week", 0)),
        )
    except KeyError as exc:
        raise DataError(f"meta file {path} is missing key {exc}") from None


def load_flow_csv(csv_path, meta_path) -> FlowDataset:
    """Read a long-format flow CSV into dense ``[T, n]`` matrices.

    Cells absent from the file are zero-filled and counted in a warning.
    Lines starting with ``#`` are ignored.
    """
    meta = load_meta(meta_path)
    rows = []
    with open(csv_path, encoding="utf-8", newline="") as fh:
        lines = _data_lines(fh)
        try:
            lineno, first = next(lines)
        except StopIteration:
            raise DataError(f"{csv_path}: no header") from None
        header = tuple(h.strip() for h in next(csv.reader([first])))
        if header != CSV_HEADER:
            raise DataError(f"{csv_path}:{lineno}: expected header {','.join(CSV_HEADER)}")
        for lineno, line in lines:
            fields = next(csv.reader([line]))
            try:
                if len(fields) != 4:
                    raise ValueError
                t, r = int(fields[0]), int(fields[1])
                fin, fout = float(fields[2]), float(fields[3])
            except ValueError:
                raise DataError(f"{csv_path}:{lineno}: malformed row {line.rstrip()!r}") from None
            if t < 0 or r < 0:
                raise DataError(f"{csv_path}:{lineno}: negative index")
            if r >= meta.n_regions:
                raise DataError(
                    f"{csv_path}:{lineno}: region_index {r} >= n_regions {meta.n_regions}"
                )
            if not (math.isfinite(fin) and math.isfinite(fout)) or fin < 0 or fout < 0:
                raise DataError(f"{csv_path}:{lineno}: flows must be finite and nonnegative")
            rows.append((t, r, fin, fout))
    if not rows:
        raise DataError(f"{csv_path}: no data rows (T == 0)")
    T = 1 + max(row[0] for row in rows)
    inflow = np.zeros((T, meta.n_regions))
    outflow = np.zeros((T, meta.n_regions))
    present = np.zeros((T, meta.n_regions), dtype=bool)
    for t, r, fin, fout in rows:
        inflow[t, r], outflow[t, r] = fin, fout
        present[t, r] = True
    missing = int(present.size - present.sum())
    if missing:
        logger.warning("%s: %d missing (time, region) cells filled with 0", csv_path, missing)
    return FlowDataset(meta, inflow, outflow, extra={"missing_cells": missing})


def write_flow_csv(data: FlowDataset, csv_path, meta_path, header_comment: str = "") -> None:
    csv_path, meta_path = Path(csv_path), Path(meta_path)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t in range(data.n_slots):
            for r in range(data.n_regions):
                writer.writerow((t, r, repr(float(data.inflow[t, r])), repr(float(data.outflow[t, r]))))
    meta = data.meta.to_dict()
    for key in ("rng_algorithm", "seed"):
        if key in data.extra:
            meta[key] = data.extra[key]
    if header_comment:
        meta["provenance"] = header_comment
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
