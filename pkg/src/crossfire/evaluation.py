"""Detection metrics, stratified splits, experiment sweeps and timing."""

from __future__ import annotations

import csv
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import detectors as det
from . import nn
from .config import ScenarioConfig
from .fileio import atomic_write_text, csv_text
from .simulation import TrafficSample, run_scenario, write_dataset

logger = logging.getLogger(__name__)

NA = "NA"
HELDOUT_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class ConfusionCounts:
    true_positive: int = 0
    false_positive: int = 0
    true_negative: int = 0
    false_negative: int = 0

    @property
    def total(self) -> int:
        return self.true_positive + self.false_positive + self.true_negative + self.false_negative


def confusion(predictions: Sequence[bool], labels: Sequence[int]) -> ConfusionCounts:
    """Tally verdicts against labels with attack as the positive class."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions but {y.size} labels")
    return ConfusionCounts(
        int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y))
    )


# None marks an undefined metric (zero denominator)

def precision(c: ConfusionCounts) -> float | None:
    d = c.true_positive + c.false_positive
    return c.true_positive / d if d else None


def recall(c: ConfusionCounts) -> float | None:
    d = c.true_positive + c.false_negative
    return c.true_positive / d if d else None


def f1(c: ConfusionCounts) -> float | None:
    p, r = precision(c), recall(c)
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def accuracy(c: ConfusionCounts) -> float | None:
    return (c.true_positive + c.true_negative) / c.total if c.total else None


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> MetricsReport:
        return cls(accuracy(c), precision(c), recall(c), f1(c), c)

    @classmethod
    def from_predictions(cls, predictions, labels) -> MetricsReport:
        return cls.from_counts(confusion(predictions, labels))


class StratificationError(ValueError):
    """A class has too few windows to appear on both sides of a split."""


def split_dataset(labels: Sequence[int], train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded split of item indices into ``(train, test)``.

    Each class contributes ``round(train_fraction * class_size)`` items to
    the training side.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            raise StratificationError(f"class {cls} has {len(idx)} windows; stratification needs at least 2")
        idx = rng.permutation(idx)
        k = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# -- alarm-level analysis ---------------------------------------------------

def detection_latency(timestamps: np.ndarray, states: np.ndarray, attack_start: float) -> float | None:
    """Seconds from the attack start to the first alarm at or after it."""
    hit = np.flatnonzero(states & (np.asarray(timestamps) >= attack_start))
    return float(timestamps[hit[0]] - attack_start) if len(hit) else None


@dataclass(frozen=True)
class AlphaPoint:
    alpha: int
    false_alarms: int  # windows in alarm while the window is normal
    false_alarm_events: int  # alarms raised while the window is normal
    missed: int  # attack windows not in alarm
    latency_s: float | None
    accuracy: float


def alarm_summary(scores: det.StreamScores, alpha: int, attack_start: float | None) -> AlphaPoint:
    states = np.array([s is det.NetworkState.UNDER_ATTACK
                       for s in det.alpha_states(scores.verdicts, alpha)], dtype=bool)
    y = scores.labels.astype(bool)
    raised = states & ~np.concatenate([[False], states[:-1]])
    fa = int(np.sum(states & ~y))
    missed = int(np.sum(~states & y))
    lat = detection_latency(scores.timestamps, states, attack_start) if attack_start is not None else None
    acc = 1.0 - (fa + missed) / len(y) if len(y) else math.nan
    return AlphaPoint(alpha, fa, int(np.sum(raised & ~y)), missed, lat, acc)


def alpha_tradeoff(scores: det.StreamScores, alphas: Sequence[int], attack_start: float | None) -> list[AlphaPoint]:
    return [alarm_summary(scores, a, attack_start) for a in alphas]


def best_alpha(points: Sequence[AlphaPoint]) -> AlphaPoint:
    """Highest alarm-level accuracy; the smallest alpha wins ties."""
    return max(points, key=lambda p: (p.accuracy, -p.alpha))


# -- sweeps -----------------------------------------------------------------

VARIABLE_FIELDS = {"vehicles": "n_vehicles", "speed_range": "speed_range", "alpha": None}


@dataclass
class SweepSpec:
    variable: str
    values: list
    template: ScenarioConfig = field(default_factory=ScenarioConfig)
    archs: tuple[str, ...] = det.ARCHS
    seeds: tuple[int, ...] = (0, 1, 2)
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    alpha: int = 6
    train_fraction: float = 0.7

    def __post_init__(self) -> None:
        if self.variable not in VARIABLE_FIELDS and self.variable not in ScenarioConfig.__dataclass_fields__:
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("repetition seeds must be distinct")
        for arch in self.archs:
            if arch not in det.ARCHS:
                raise ValueError(f"unknown architecture {arch!r}")

    def scenario(self, value: Any, seed: int) -> ScenarioConfig:
        name = VARIABLE_FIELDS.get(self.variable, self.variable)
        changes: dict[str, Any] = {"seed": seed}
        if name is not None:
            changes[name] = tuple(value) if isinstance(value, list) else value
        return self.template.replace(**changes)


RESULT_COLUMNS = [
    "variable", "value", "arch", "rep", "seed", "accuracy", "precision", "recall", "f1",
    "latency_s", "train_s", "detect_s", "false_alarms", "status",
]


@dataclass
class SweepRow:
    variable: str
    value: Any
    arch: str
    rep: int
    seed: int
    metrics: MetricsReport | None = None
    latency_s: float | None = None
    train_s: float | None = None
    detect_s: float | None = None
    false_alarms: int | None = None
    status: str = "ok"

    def as_record(self) -> dict[str, str]:
        m = self.metrics
        return {
            "variable": self.variable,
            "value": format_sweep_value(self.value),
            "arch": self.arch,
            "rep": str(self.rep),
            "seed": str(self.seed),
            "accuracy": _fmt(m.accuracy if m else None),
            "precision": _fmt(m.precision if m else None),
            "recall": _fmt(m.recall if m else None),
            "f1": _fmt(m.f1 if m else None),
            "latency_s": _fmt(self.latency_s),
            "train_s": _fmt(self.train_s, 2),
            "detect_s": _fmt(self.detect_s, 2),
            "false_alarms": NA if self.false_alarms is None else str(self.false_alarms),
            "status": self.status,
        }


def format_sweep_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return "-".join(f"{float(v):g}" for v in value)
    return str(value)


def _fmt(value: float | None, digits: int | None = None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return NA
    return f"{value:.{digits}f}" if digits is not None else repr(float(value))


@dataclass
class TrainedPoint:
    """A trained detector plus what is needed to re-run detection cheaply."""

    model: det.DetectorModel
    metrics: MetricsReport
    train_s: float
    heldout: list[TrafficSample]
    attack_start: float | None
    samples: list[TrafficSample]


def train_point(config: ScenarioConfig, arch: str, train_config: nn.TrainConfig,
                train_fraction: float = 0.7) -> TrainedPoint:
    """Simulate, split the windows, train, and score the test windows."""
    samples = run_scenario(config)
    heldout = run_scenario(config.replace(traffic_seed=config.stream_seed + HELDOUT_SEED_OFFSET))
    model = det.build_detector(arch, config.n_monitored_links, seed=config.seed)
    model.normalization = det.Normalization.fit(samples)
    x, y = det.training_set(model, samples)
    tr, te = split_dataset(y, train_fraction, config.seed)
    t0 = time.perf_counter()
    nn.train(model.network, x[tr], y[tr], replace(train_config, seed=config.seed))
    train_s = time.perf_counter() - t0
    verdicts = model.predict_proba(x[te]) >= model.threshold
    metrics = MetricsReport.from_predictions(verdicts, y[te])
    start = config.attack_window[0] if config.attack_window else None
    return TrainedPoint(model, metrics, train_s, heldout, start, samples)


def detect_point(point: TrainedPoint, alpha: int) -> tuple[AlphaPoint, float]:
    t0 = time.perf_counter()
    scores = det.score_stream(point.model, point.heldout)
    summary = alarm_summary(scores, alpha, point.attack_start)
    return summary, time.perf_counter() - t0


def _run_unit(spec: SweepSpec, arch: str, rep: int, seed: int, values: list,
              artifact_dir: str | None) -> list[SweepRow]:
    """One training unit: every value for a scenario variable, or all alphas."""
    rows = []
    if spec.variable == "alpha":
        groups = [(None, values)]
    else:
        groups = [(v, [v]) for v in values]
    for scenario_value, row_values in groups:
        try:
            config = spec.scenario(scenario_value, seed) if scenario_value is not None else spec.template.replace(seed=seed)
            point = train_point(config, arch, spec.train, spec.train_fraction)
            if artifact_dir is not None:
                _write_artifacts(Path(artifact_dir), spec, scenario_value, arch, rep, point)
        except Exception as exc:  # isolate the failing point, keep sweeping
            logger.error("sweep point %s=%s %s rep %d failed: %s", spec.variable, scenario_value, arch, rep, exc)
            logger.debug(traceback.format_exc())
            rows += [SweepRow(spec.variable, v, arch, rep, seed, status=f"failed: {type(exc).__name__}")
                     for v in row_values]
            continue
        for v in row_values:
            alpha = int(v) if spec.variable == "alpha" else spec.alpha
            summary, detect_s = detect_point(point, alpha)
            rows.append(SweepRow(spec.variable, v, arch, rep, seed, point.metrics, summary.latency_s,
                                 point.train_s, detect_s, summary.false_alarms))
    return rows


def _write_artifacts(root: Path, spec: SweepSpec, value, arch: str, rep: int, point: TrainedPoint) -> None:
    tag = format_sweep_value(value) if value is not None else "all"
    out = root / f"{spec.variable}={tag}" / arch / f"rep{rep}"
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(point.samples, out / "dataset.csv")
    det.save_model(point.model, out / "model.txt")


def run_sweep(spec: SweepSpec, jobs: int = 1, artifact_dir: str | Path | None = None,
              on_unit: Callable[[list[SweepRow]], None] | None = None) -> list[SweepRow]:
    """Run every (value, arch, repetition) point of ``spec``.

    Alpha sweeps train once per (arch, repetition) and only re-run
    detection per alpha. Rows come back in spec order whatever ``jobs`` is.
    """
    units = [(arch, rep, seed) for arch in spec.archs for rep, seed in enumerate(spec.seeds)]
    adir = str(artifact_dir) if artifact_dir is not None else None
    results: dict[tuple[str, int], list[SweepRow]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {(a, r): pool.submit(_run_unit, spec, a, r, s, list(spec.values), adir)
                       for a, r, s in units}
            for key, fut in futures.items():
                results[key] = fut.result()
                if on_unit:
                    on_unit(results[key])
    else:
        for a, r, s in units:
            results[(a, r)] = _run_unit(spec, a, r, s, list(spec.values), adir)
            if on_unit:
                on_unit(results[(a, r)])

    order = {format_sweep_value(v): i for i, v in enumerate(spec.values)}
    rows = [row for key in [(a, r) for a, r, _ in units] for row in results[key]]
    arch_rank = {a: i for i, a in enumerate(spec.archs)}
    rows.sort(key=lambda row: (order[format_sweep_value(row.value)], arch_rank[row.arch], row.rep))
    return rows


def write_results(rows: Sequence[SweepRow], path: str | Path) -> None:
    records = [row.as_record() for row in rows]
    atomic_write_text(path, csv_text(RESULT_COLUMNS, [[r[c] for c in RESULT_COLUMNS] for r in records]))


def read_results(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    """Mean of each numeric column per (variable, value, arch), NA-aware."""
    groups: dict[tuple[str, str, str], list[dict[str, str]]] = {}
    for rec in records:
        groups.setdefault((rec["variable"], rec["value"], rec["arch"]), []).append(rec)
    numeric = ["accuracy", "precision", "recall", "f1", "latency_s", "train_s", "detect_s", "false_alarms"]
    out = []
    for (var, value, arch), recs in groups.items():
        row = {"variable": var, "value": value, "arch": arch, "reps": str(len(recs))}
        for col in numeric:
            vals = [float(r[col]) for r in recs if r.get(col, NA) != NA]
            row[col] = repr(float(np.mean(vals))) if vals else NA
        out.append(row)
    return out


def time_phases(arch: str, samples: Sequence[TrafficSample], stream: Sequence[TrafficSample] | None = None,
                train_config: nn.TrainConfig | None = None, alpha: int = 6, seed: int = 0,
                n_links: int | None = None) -> tuple[float, float]:
    """Wall-clock ``(training_s, detection_s)``, rounded to 0.01 s.

    Only training and :func:`detect_stream` over ``stream`` (default: the
    training samples) are inside the timers.
    """
    n_links = n_links or len(samples[0].flows)
    model = det.build_detector(arch, n_links, seed=seed)
    model.normalization = det.Normalization.fit(samples)
    x, y = det.training_set(model, samples)
    t0 = time.perf_counter()
    nn.train(model.network, x, y, train_config)
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    det.detect_stream(model, stream if stream is not None else samples, alpha)
    detect_s = time.perf_counter() - t0
    return round(train_s, 2), round(detect_s, 2)
