"""Discrete-time traffic simulation over an ITS topology.

Vehicles drive around a ring road partitioned into equal RSU cells and
keep one background flow open to a victim server for the whole run; on
top of that they open short legitimate sessions to the public decoy
servers. During the attack window the bots are split into groups that take turns
sending slowly ramping flows to decoy servers. Every sampling interval,
each monitored link reports the number of distinct flows whose bytes
crossed it and the Kbit they carried.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, ScenarioConfig
from .fileio import atomic_write_text, csv_text
from .topology import NetworkTopology, RouteCache, build_topology

BACKGROUND = "background"
ATTACK = "attack"

# spawn-key tags keep each random stream independent of the others, so
# adding attack flows never perturbs background draws
_VEHICLES, _BOTS, _RATES, _DECOYS, _IMPAIR, _SESSIONS = range(6)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass(frozen=True)
class Vehicle:
    id: int
    speed: float  # m/s
    position: float  # m along the ring road at t = 0
    is_bot: bool = False

    def position_at(self, t: float | np.ndarray, road_length: float):
        return np.mod(self.position + self.speed * np.asarray(t), road_length)


def attached_rsu_index(vehicle: Vehicle, t, config: ScenarioConfig) -> np.ndarray:
    """Index of the RSU cell the vehicle is in at time(s) ``t``."""
    road = config.n_rsus * config.cell_length
    idx = np.floor(vehicle.position_at(t, road) / config.cell_length).astype(int)
    return np.minimum(idx, config.n_rsus - 1)


@dataclass(frozen=True)
class FlowSpec:
    """One flow: constant rate for background, linear ramp for attack."""

    src: int
    dst: str
    start: float
    end: float
    rate_start: float  # Kbps at ``start``
    rate_end: float  # Kbps at ``end``
    kind: str = BACKGROUND

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError(f"flow start {self.start} must precede end {self.end}")

    def rate(self, t: float) -> float:
        if t < self.start or t > self.end:
            return 0.0
        frac = (t - self.start) / (self.end - self.start)
        return self.rate_start + frac * (self.rate_end - self.rate_start)

    def volume(self, a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
        """Kbit sent in [a, b] (exact for the linear profile)."""
        lo = np.maximum(a, self.start)
        hi = np.minimum(b, self.end)
        span = np.maximum(hi - lo, 0.0)
        slope = (self.rate_end - self.rate_start) / (self.end - self.start)
        mid = 0.5 * (lo + hi)
        return span * (self.rate_start + slope * (mid - self.start))


@dataclass(frozen=True)
class ImpairmentOutcome:
    delay_jitter: float
    dropped: bool


def drop_probability(speed: float, coefficient: float) -> float:
    return min(1.0, coefficient * speed)


def connection_impairment(
    speed: float, coefficient: float, rng: np.random.Generator, sample_interval: float = 1.0
) -> ImpairmentOutcome:
    """Handoff impairment for one flow in one interval.

    Drops with probability ``min(1, coefficient * speed)``; otherwise the
    packets are delayed by a uniform jitter in
    ``[0, coefficient * speed * sample_interval]``.
    """
    if speed < 0:
        raise ValueError("speed must be non-negative")
    u_drop, u_jit = rng.random(2)
    return _impair(speed, coefficient, sample_interval, u_drop, u_jit)


def _impair(speed, coefficient, sample_interval, u_drop, u_jit):
    p = drop_probability(speed, coefficient)
    if u_drop < p:
        return ImpairmentOutcome(0.0, True)
    return ImpairmentOutcome(float(u_jit * coefficient * speed * sample_interval), False)


@dataclass(frozen=True)
class TrafficSample:
    """One monitoring interval: per monitored link (flow count, Kbit)."""

    timestamp: float
    flows: np.ndarray  # int, shape (L,)
    sizes: np.ndarray  # float Kbit, shape (L,)
    label: int  # 1 = attack

    @property
    def per_link(self) -> list[tuple[int, float]]:
        return list(zip(self.flows.tolist(), self.sizes.tolist()))

    def features(self) -> np.ndarray:
        """Interleaved ``[flows0, size0, flows1, size1, ...]``."""
        out = np.empty(2 * len(self.flows))
        out[0::2] = self.flows
        out[1::2] = self.sizes
        return out


def make_vehicles(config: ScenarioConfig) -> list[Vehicle]:
    lo, hi = config.speed_range
    road = config.n_rsus * config.cell_length
    speeds = _rng(config.seed, _VEHICLES).uniform(lo, hi, config.n_vehicles)
    positions = _rng(config.stream_seed, _VEHICLES, 1).uniform(0.0, road, config.n_vehicles)
    return [Vehicle(i, float(s), float(p)) for i, (s, p) in enumerate(zip(speeds, positions))]


def assign_bots(
    topology: NetworkTopology, vehicles: Sequence[Vehicle], n_bots: int, seed: int
) -> list[Vehicle]:
    """Flag exactly ``n_bots`` vehicles, chosen uniformly without replacement."""
    if n_bots < 0 or n_bots > len(vehicles):
        raise ValueError(f"cannot pick {n_bots} bots from {len(vehicles)} vehicles")
    rng = _rng(seed, _BOTS)
    chosen = set(rng.choice(len(vehicles), size=n_bots, replace=False).tolist())
    return [replace(v, is_bot=i in chosen) for i, v in enumerate(vehicles)]


def bot_partition(vehicles: Sequence[Vehicle], bot_groups: int) -> list[list[int]]:
    """Round-robin the bots (by id) into non-empty groups.

    The number of groups is capped at the number of bots so that every
    sub-slot of the attack window has someone sending.
    """
    bots = sorted(v.id for v in vehicles if v.is_bot)
    if not bots:
        return []
    n = min(bot_groups, len(bots))
    return [bots[g::n] for g in range(n)]


def generate_flow_schedule(
    config: ScenarioConfig, vehicles: Sequence[Vehicle], topology: NetworkTopology
) -> list[FlowSpec]:
    """Background flows for every vehicle, then the alternating attack flows."""
    rates = _rng(config.seed, _RATES)
    dsts = _rng(config.seed, _RATES, 1)
    lo, hi = config.background_rate
    flows = []
    for v in vehicles:
        rate = float(rates.uniform(lo, hi))
        dst = topology.victims[int(dsts.integers(len(topology.victims)))]
        flows.append(FlowSpec(v.id, dst, 0.0, config.duration, rate, rate, BACKGROUND))
    for v in vehicles:
        flows.extend(_decoy_sessions(config, v, topology))

    bots = [v for v in vehicles if v.is_bot]
    if config.attack_window is None or not bots:
        return flows
    if config.bot_groups < 1:
        raise ConfigError("bot_groups must be >= 1 when bots attack")

    groups = bot_partition(vehicles, config.bot_groups)
    a0, a1 = config.attack_window
    slot = (a1 - a0) / len(groups)
    decoys = _rng(config.seed, _DECOYS)
    r0, r1 = config.attack_rate
    for g, members in enumerate(groups):
        start = a0 + g * slot
        end = a1 if g == len(groups) - 1 else a0 + (g + 1) * slot
        for vid in members:
            dst = topology.decoys[int(decoys.integers(len(topology.decoys)))]
            flows.append(FlowSpec(vid, dst, start, end, r0, r1, ATTACK))
    return flows


def _decoy_sessions(config: ScenarioConfig, vehicle: Vehicle, topology: NetworkTopology) -> list[FlowSpec]:
    """Poisson-arriving legitimate sessions from one vehicle to decoy servers."""
    if config.decoy_session_rate == 0:
        return []
    rng = _rng(config.stream_seed, _SESSIONS, vehicle.id)
    lo, hi = config.background_rate
    mean_gap = 3600.0 / config.decoy_session_rate
    out = []
    t = rng.exponential(mean_gap)
    while t < config.duration:
        end = min(config.duration, t + rng.exponential(config.decoy_session_mean))
        rate = float(rng.uniform(lo, hi))
        dst = topology.decoys[int(rng.integers(len(topology.decoys)))]
        if end > t:
            out.append(FlowSpec(vehicle.id, dst, float(t), float(end), rate, rate, BACKGROUND))
        t += rng.exponential(mean_gap)
    return out


@dataclass
class Simulation:
    config: ScenarioConfig
    topology: NetworkTopology
    vehicles: list[Vehicle]
    flows: list[FlowSpec]
    samples: list[TrafficSample]


def simulate(config: ScenarioConfig) -> Simulation:
    """Run a full scenario and keep the intermediate objects around."""
    config.validate()
    topology = build_topology(config)
    vehicles = assign_bots(topology, make_vehicles(config), config.n_bots, config.seed)
    flows = generate_flow_schedule(config, vehicles, topology)
    samples = _sample_links(config, topology, vehicles, flows)
    return Simulation(config, topology, vehicles, flows, samples)


def run_scenario(config: ScenarioConfig) -> list[TrafficSample]:
    return simulate(config).samples


def interval_labels(config: ScenarioConfig) -> np.ndarray:
    """Attack iff ``[t, t + dt)`` overlaps the window; no bots means no attack."""
    n, dt = config.n_samples, config.sample_interval
    t = np.arange(n) * dt
    if config.attack_window is None or config.n_bots == 0:
        return np.zeros(n, dtype=int)
    a0, a1 = config.attack_window
    return ((t < a1) & (t + dt > a0)).astype(int)


def _sample_links(
    config: ScenarioConfig,
    topology: NetworkTopology,
    vehicles: Sequence[Vehicle],
    flows: Sequence[FlowSpec],
) -> list[TrafficSample]:
    n, dt = config.n_samples, config.sample_interval
    starts = np.arange(n) * dt
    ends = starts + dt
    col = {lid: j for j, lid in enumerate(topology.monitored)}
    n_mon = len(col)
    sizes = np.zeros((n, n_mon))
    counts = np.zeros((n, n_mon), dtype=np.int64)
    routes = RouteCache(topology)
    by_id = {v.id: v for v in vehicles}
    n_background = sum(f.kind == BACKGROUND for f in flows)

    for index, flow in enumerate(flows):
        vehicle = by_id[flow.src]
        # incidence[r, j]: route from RSU r to flow.dst uses monitored link j
        incidence = np.zeros((config.n_rsus, n_mon), dtype=bool)
        for r, rsu in enumerate(topology.rsus):
            for lid in routes(rsu, flow.dst):
                if lid in col:
                    incidence[r, col[lid]] = True

        k0 = max(0, int(math.floor(flow.start / dt)))
        k1 = min(n, int(math.ceil(flow.end / dt)))
        if k1 <= k0:
            continue
        ks = np.arange(k0, k1)
        a = np.maximum(starts[ks], flow.start)
        b = np.minimum(ends[ks], flow.end)
        volume = flow.volume(a, b)

        # one stream per flow, keyed by its position within its kind
        key = (index,) if flow.kind == BACKGROUND else (1, index - n_background)
        rng = _rng(config.stream_seed, _IMPAIR, *key)
        u = rng.random((len(ks), 2))
        p = drop_probability(vehicle.speed, config.impairment_coefficient)
        kept = u[:, 0] >= p
        jitter = np.where(kept, u[:, 1] * config.impairment_coefficient * vehicle.speed * dt, 0.0)

        # share of the interval's bytes pushed past the interval boundary
        span = np.maximum(b - a, 1e-300)
        late = (np.maximum(b + jitter - ends[ks], 0.0) - np.maximum(a + jitter - ends[ks], 0.0)) / span
        late = np.clip(late, 0.0, 1.0)
        on_time = np.where(kept, volume * (1.0 - late), 0.0)
        shifted = np.where(kept, volume * late, 0.0)

        on_path = incidence[attached_rsu_index(vehicle, starts[ks], config)]
        sizes[ks] += on_time[:, None] * on_path
        present = (on_time > 0)[:, None] & on_path

        nxt = ks + 1
        ok = nxt < n
        carry = np.zeros((n, n_mon), dtype=bool)
        carry[nxt[ok]] = (shifted[ok] > 0)[:, None] & on_path[ok]
        sizes[nxt[ok]] += shifted[ok][:, None] * on_path[ok]
        hit = np.zeros((n, n_mon), dtype=bool)
        hit[ks] = present
        counts += hit | carry

    labels = interval_labels(config)
    return [
        TrafficSample(float(starts[k]), counts[k], sizes[k], int(labels[k]))
        for k in range(n)
    ]


def samples_to_arrays(samples: Sequence[TrafficSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(timestamps[N], features[N, 2L], labels[N])`` with interleaved features."""
    if not samples:
        return np.zeros(0), np.zeros((0, 0)), np.zeros(0, dtype=int)
    t = np.array([s.timestamp for s in samples], dtype=float)
    x = np.stack([s.features() for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    return t, x, y


def dataset_header(n_links: int) -> list[str]:
    cols = ["t"]
    for j in range(n_links):
        cols += [f"link{j}_flows", f"link{j}_size"]
    return cols + ["label"]


def write_dataset(samples: Iterable[TrafficSample], path: str | Path) -> None:
    samples = list(samples)
    n_links = len(samples[0].flows) if samples else 0
    rows = []
    for s in samples:
        row = [f"{s.timestamp:.3f}"]
        for c, z in zip(s.flows.tolist(), s.sizes.tolist()):
            row += [str(int(c)), repr(float(z))]
        rows.append(row + [str(s.label)])
    atomic_write_text(path, csv_text(dataset_header(n_links), rows))


class DatasetError(ValueError):
    pass


def read_dataset(path: str | Path) -> list[TrafficSample]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    header = rows[0]
    n_links = (len(header) - 2) // 2
    if header != dataset_header(n_links):
        raise DatasetError(f"{path}: unexpected header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = row[1:-1]
            flows = np.array([int(v) for v in vals[0::2]], dtype=np.int64)
            sizes = np.array([float(v) for v in vals[1::2]])
            label = int(row[-1])
            out.append(TrafficSample(float(row[0]), flows, sizes, label))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if label not in (0, 1):
            raise DatasetError(f"{path}:{lineno}: label must be 0 or 1")
    return out
