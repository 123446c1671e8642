"""Raw-unit RMSE/MAPE, naive baselines, and metric reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import FlowDataset, NormalizationStats, Sample
from .model import HyperParams, collate, predict

CHANNELS = ("inflow", "outflow")
DEFAULT_MAPE_THRESHOLD = 10.0

# A predictor maps samples to predictions [B, n, 2] in the samples' units.
Predictor = Callable[[Sequence[Sample]], np.ndarray]


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"rmse: length mismatch {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape_counts(pred, truth, threshold: float = DEFAULT_MAPE_THRESHOLD) -> tuple[float, int, int]:
    """MAPE in percent over targets with ``truth >= threshold``, plus (counted, excluded)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"mape: length mismatch {pred.size} vs {truth.size}")
    keep = truth >= threshold
    if threshold <= 0:
        keep &= truth > 0
    counted = int(keep.sum())
    excluded = int(truth.size - counted)
    if counted == 0:
        raise ValueError(f"mape undefined: all {truth.size} targets fall below threshold {threshold}")
    value = float(np.mean(np.abs(pred[keep] - truth[keep]) / truth[keep]) * 100.0)
    return value, counted, excluded


def mape(pred, truth, threshold: float = DEFAULT_MAPE_THRESHOLD) -> float:
    return mape_counts(pred, truth, threshold)[0]


@dataclass
class ChannelMetrics:
    rmse: float
    mape: float
    counted: int
    excluded: int


@dataclass
class MetricsReport:
    name: str
    channels: dict = field(default_factory=dict)  # channel -> ChannelMetrics

    def rows(self) -> list[dict]:
        return [
            {"channel": ch, "rmse": m.rmse, "mape": m.mape, "counted": m.counted, "excluded": m.excluded}
            for ch, m in self.channels.items()
        ]

    @property
    def overall_rmse(self) -> float:
        """RMSE pooled over both channels."""
        mse = [m.rmse**2 for m in self.channels.values()]
        return float(np.sqrt(np.mean(mse)))

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table, one row per predictor, RMSE and MAPE per channel."""
    w = max([len("Method")] + [len(r.name) for r in reports]) + 2
    lines = [
        f"{'':<{w}}{'inflow':>22}{'outflow':>22}",
        f"{'Method':<{w}}{'RMSE':>11}{'MAPE':>11}{'RMSE':>11}{'MAPE':>11}",
    ]
    for r in reports:
        cells = "".join(f"{r.channels[ch].rmse:>11.2f}{r.channels[ch].mape:>10.2f}%" for ch in CHANNELS)
        lines.append(f"{r.name:<{w}}{cells}")
    return "\n".join(lines)


def write_report_csv(reports: Sequence[MetricsReport], path, header_comment: str = "") -> None:
    """Delimited report: one row per (predictor, channel)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["predictor", "channel", "rmse", "mape", "counted", "excluded"])
        for report in reports:
            for row in report.rows():
                writer.writerow(
                    [report.name, row["channel"], repr(row["rmse"]), repr(row["mape"]),
                     row["counted"], row["excluded"]]
                )


def read_report_csv(path) -> dict:
    """Parse a report file into ``{predictor: {channel: ChannelMetrics}}``."""
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(lines):
        out.setdefault(row["predictor"], {})[row["channel"]] = ChannelMetrics(
            float(row["rmse"]), float(row["mape"]), int(row["counted"]), int(row["excluded"])
        )
    return out


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------
class HistoricalAverage:
    """Mean training flow at the target's time-of-week, per region and channel.

    Time-of-week positions never seen in training fall back to the region's
    global training mean.
    """

    def __init__(self, train: FlowDataset, slots: Optional[Sequence[int]] = None,
                 stats: Optional[NormalizationStats] = None):
        slots = np.arange(train.n_slots) if slots is None else np.asarray(slots)
        if slots.size == 0:
            raise ValueError("historical average needs at least one training slot")
        self.meta = train.meta
        self.stats = stats
        week = train.meta.slots_per_week
        flows = np.stack([train.inflow[slots], train.outflow[slots]], axis=-1)  # [S, n, 2]
        tow = train.time_of_week(slots)
        sums = np.zeros((week,) + flows.shape[1:])
        np.add.at(sums, tow, flows)
        counts = np.bincount(tow, minlength=week).astype(np.float64)
        global_mean = flows.mean(axis=0)
        seen = counts > 0
        self.table = np.where(
            seen[:, None, None], sums / np.maximum(counts, 1.0)[:, None, None], global_mean[None]
        )
        self.seen = seen

    def predict_slots(self, target_slots) -> np.ndarray:
        """Raw-unit predictions ``[len, n, 2]`` for absolute target slots."""
        tow = (self.meta.start_slot_of_week + np.asarray(target_slots)) % self.meta.slots_per_week
        return self.table[tow]

    def __call__(self, samples: Sequence[Sample]) -> np.ndarray:
        raw = self.predict_slots([s.target_slot for s in samples])
        return self.stats.apply(raw) if self.stats is not None else raw


def baseline_historical_average(train: FlowDataset, slots=None, stats=None) -> HistoricalAverage:
    return HistoricalAverage(train, slots, stats)


def baseline_last_value(samples: Sequence[Sample]) -> np.ndarray:
    """Repeat each region's most recent history value."""
    return np.stack(
        [np.stack([s.history_in[:, -1], s.history_out[:, -1]], axis=-1) for s in samples]
    )


class ModelPredictor:
    """Evaluation-mode forecaster over stored parameters."""

    def __init__(self, params: dict, hp: HyperParams, meta=None, batch_size: int = 64):
        self.params, self.hp, self.meta, self.batch_size = params, hp, meta, batch_size

    def __call__(self, samples: Sequence[Sample]) -> np.ndarray:
        out = [
            predict(self.params, collate(samples[i : i + self.batch_size]), self.hp, self.meta)
            for i in range(0, len(samples), self.batch_size)
        ]
        return np.concatenate(out, axis=0)


def to_raw(pred, stats: Optional[NormalizationStats]) -> np.ndarray:
    """Invert scaling and clamp at zero."""
    raw = stats.invert(pred) if stats is not None else np.asarray(pred, dtype=np.float64)
    return np.maximum(raw, 0.0)


def targets(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([np.stack([s.target_in, s.target_out], axis=-1) for s in samples])


def evaluate(
    predictor: Predictor,
    samples: Sequence[Sample],
    stats: Optional[NormalizationStats] = None,
    threshold: float = DEFAULT_MAPE_THRESHOLD,
    name: str = "model",
) -> MetricsReport:
    """Per-channel RMSE and MAPE in raw units."""
    if not samples:
        raise ValueError("evaluate: empty test set")
    pred = to_raw(predictor(samples), stats)
    truth = targets(samples)
    if stats is not None:
        truth = stats.invert(truth)
    report = MetricsReport(name)
    for c, channel in enumerate(CHANNELS):
        p, t = pred[..., c], truth[..., c]
        value, counted, excluded = mape_counts(p, t, threshold)
        report.channels[channel] = ChannelMetrics(rmse(p, t), value, counted, excluded)
    return report
