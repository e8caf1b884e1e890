#!/usr/bin/env python3
"""
Deadline-driven (s, b) adaptation

The controller keeps a performance table (encode/decode times, payload
size and task metric per configuration) and a smoothed estimate of the
channel. For every frame it predicts the round-trip time of each
configuration and picks the best metric that still meets the deadline.
"""

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, replace
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from quant_codec import payload_size
from split_config import repo_path, section
from split_errors import ConfigError, ControllerError, SessionClosedError

PERF_COLUMNS = ("s", "b", "encode_ms", "decode_ms", "payload_bytes", "metric")

# leg-delay solutions the delay observation is the median of; one frame
# straddling a rate change cannot move it
DELAY_WINDOW = 5


@dataclass(frozen=True, order=True)
class ConfigPoint:
    s: int
    b: int

    def __str__(self):
        return f"(s={self.s}, b={self.b})"


def config_space(max_size: int = 4, max_bits: int = 4) -> List[ConfigPoint]:
    return [ConfigPoint(s, b) for s in range(1, max_size + 1) for b in range(1, max_bits + 1)]


@dataclass
class PerfEntry:
    encode_ms: float
    decode_ms: float
    payload_bytes: int
    metric: float


class PerfTable:
    """Per-configuration knowledge the controller decides from"""

    def __init__(self, entries: Optional[Dict[ConfigPoint, PerfEntry]] = None):
        self.entries: Dict[ConfigPoint, PerfEntry] = dict(entries or {})

    def __len__(self):
        return len(self.entries)

    def __contains__(self, cfg: ConfigPoint) -> bool:
        return cfg in self.entries

    def __getitem__(self, cfg: ConfigPoint) -> PerfEntry:
        try:
            return self.entries[cfg]
        except KeyError:
            raise ControllerError(f"performance table has no entry for {cfg}")

    def __setitem__(self, cfg: ConfigPoint, entry: PerfEntry):
        self.entries[cfg] = entry

    def points(self) -> List[ConfigPoint]:
        return sorted(self.entries)

    @property
    def max_size(self) -> int:
        return max(cfg.s for cfg in self.entries)

    def validate(self):
        """Payload depends only on b and every metric is finite"""
        payload_by_bits: Dict[int, int] = {}
        for cfg, entry in self.entries.items():
            if not math.isfinite(entry.metric):
                raise ControllerError(f"non-finite metric for {cfg}")
            seen = payload_by_bits.setdefault(cfg.b, entry.payload_bytes)
            if seen != entry.payload_bytes:
                raise ControllerError(f"payload for b={cfg.b} differs across ensemble sizes ({seen} vs {entry.payload_bytes})")

    def update_decode_times(self, decode_ms: Dict[Tuple[int, int], float]):
        """Fold in the server's PERF_REPORT"""
        for (s, b), ms in decode_ms.items():
            cfg = ConfigPoint(s, b)
            if cfg in self.entries:
                self.entries[cfg] = replace(self.entries[cfg], decode_ms=ms)

    def scaled_metric(self, factor: float) -> 'PerfTable':
        return PerfTable({cfg: replace(e, metric=e.metric * factor) for cfg, e in self.entries.items()})

    def with_payloads(self, numel: int) -> 'PerfTable':
        """Same timings and metrics with payload sizes recomputed for a numel-element bottleneck"""
        return PerfTable({cfg: replace(e, payload_bytes=payload_size(numel, cfg.b)) for cfg, e in self.entries.items()})

    @classmethod
    def from_rtt_rows(cls, rows: Iterable[Tuple[float, float, int, int]]) -> 'PerfTable':
        """(rtt_ms, metric, s, b) rows, with the whole RTT charged as encode time"""
        return cls({ConfigPoint(int(s), int(b)): PerfEntry(float(rtt), 0.0, 0, float(metric))
                    for rtt, metric, s, b in rows})

    @classmethod
    def load_csv(cls, path: str) -> 'PerfTable':
        try:
            with open(path, 'r', newline='') as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != PERF_COLUMNS:
                    raise ConfigError(f"{path}: expected header {','.join(PERF_COLUMNS)}, got {reader.fieldnames}")
                entries = {}
                for row in reader:
                    cfg = ConfigPoint(int(row["s"]), int(row["b"]))
                    entries[cfg] = PerfEntry(float(row["encode_ms"]), float(row["decode_ms"]),
                                             int(row["payload_bytes"]), float(row["metric"]))
        except FileNotFoundError:
            raise ConfigError(f"performance table not found: {path}")
        except ValueError as e:
            raise ConfigError(f"{path}: {e}")
        table = cls(entries)
        table.validate()
        return table

    def save_csv(self, path: str):
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(PERF_COLUMNS)
            for cfg in self.points():
                e = self.entries[cfg]
                writer.writerow([cfg.s, cfg.b, f"{e.encode_ms:.3f}", f"{e.decode_ms:.3f}", e.payload_bytes,
                                 f"{e.metric:.6g}"])


@dataclass
class ChannelEstimate:
    rate_Bps: Optional[float] = None
    delay_ms: float = 0.0
    alpha: float = 0.2
    observations: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"EWMA alpha must be in (0, 1], got {self.alpha}")


@dataclass
class Observation:
    """One measured transfer.

    `legs` counts how many one-way delays the measurement contains (2 for an
    uplink plus downlink round trip). Without an explicit delay the current
    estimate is subtracted.
    """
    bytes: float
    measured_transfer_ms: float
    delay_ms: Optional[float] = None
    legs: int = 1


def update_estimate(est: ChannelEstimate, obs: Observation) -> ChannelEstimate:
    """EWMA of effective rate (and delay when observed); the first observation initializes"""
    if obs.measured_transfer_ms <= 0:
        raise ControllerError(f"measured transfer time must be positive, got {obs.measured_transfer_ms}")
    delay = est.delay_ms if obs.delay_ms is None else obs.delay_ms
    serialization_ms = obs.measured_transfer_ms - obs.legs * delay
    # a stale delay estimate can exceed the measurement
    serialization_ms = max(serialization_ms, 0.01 * obs.measured_transfer_ms)
    observed_rate = obs.bytes / (serialization_ms / 1000.0)

    if est.observations == 0 or est.rate_Bps is None:
        return replace(est, rate_Bps=observed_rate, delay_ms=delay, observations=est.observations + 1)

    a = est.alpha
    new_delay = a * obs.delay_ms + (1 - a) * est.delay_ms if obs.delay_ms is not None else est.delay_ms
    return replace(est, rate_Bps=a * observed_rate + (1 - a) * est.rate_Bps, delay_ms=new_delay,
                   observations=est.observations + 1)


def leg_delay(total_bytes: float, network_ms: float, uplink_bytes: float, uplink_ms: float) -> Optional[float]:
    """One-way delay from the uplink and downlink legs of a round trip.

    Both legs share rate and delay, so two sizes and two times pin down both.
    Returns None when the legs are too close in size to tell them apart.
    """
    legs = sorted([(uplink_bytes, uplink_ms), (total_bytes - uplink_bytes, network_ms - uplink_ms)])
    (small_bytes, small_ms), (big_bytes, big_ms) = legs
    if small_bytes <= 0 or big_bytes < 2 * small_bytes or big_ms <= small_ms:
        return None
    ms_per_byte = (big_ms - small_ms) / (big_bytes - small_bytes)
    return min(max(small_ms - small_bytes * ms_per_byte, 0.0), small_ms)


def predict_rtt(cfg: ConfigPoint, table: PerfTable, est: ChannelEstimate,
                result_bytes: float = 64, overhead_bytes: float = 0) -> float:
    """encode + uplink (bytes/rate + delay) + decode + result return (bytes/rate + delay)"""
    entry = table[cfg]
    if est.rate_Bps is None or est.rate_Bps <= 0:
        raise ControllerError("no channel rate estimate yet")
    uplink = (entry.payload_bytes + overhead_bytes) / est.rate_Bps * 1000.0 + est.delay_ms
    downlink = result_bytes / est.rate_Bps * 1000.0 + est.delay_ms
    return entry.encode_ms + uplink + entry.decode_ms + downlink


def select_config(table: PerfTable, est: ChannelEstimate, deadline_ms: float, margin: float = 1.0,
                  current: Optional[ConfigPoint] = None, switch_penalty_ms: float = 0.0,
                  rtt_fn: Optional[Callable[[ConfigPoint], float]] = None,
                  **predict_kwargs) -> ConfigPoint:
    """Highest metric among configs predicted to meet the deadline.

    Ties go to the smaller predicted RTT, then smaller s, then smaller b.
    When nothing is feasible the minimum-RTT configuration is returned.
    """
    if not len(table):
        raise ControllerError("cannot select from an empty performance table")
    rtt_fn = rtt_fn or (lambda cfg: predict_rtt(cfg, table, est, **predict_kwargs))

    scored = []
    for cfg in table.points():
        rtt = rtt_fn(cfg) * margin
        if current is not None and cfg != current:
            rtt += switch_penalty_ms
        scored.append((cfg, rtt))

    feasible = [(cfg, rtt) for cfg, rtt in scored if rtt <= deadline_ms]
    if feasible:
        return min(feasible, key=lambda item: (-table[item[0]].metric, item[1], item[0].s, item[0].b))[0]
    return min(scored, key=lambda item: (item[1], item[0].s, item[0].b))[0]


@dataclass
class DecisionRecord:
    seq: int
    s: int
    b: int
    predicted_rtt_ms: float
    measured_rtt_ms: float
    rate_est_Bps: float
    deadline_ms: float


@dataclass
class FrameOutcome:
    """What the edge learned from one round trip"""
    seq: int
    measured_rtt_ms: float
    network_ms: float
    network_bytes: int
    breakdown: Optional[object] = None
    uplink_ms: Optional[float] = None
    uplink_bytes: Optional[int] = None


class AdaptationController:
    """Owns the channel estimate, the current configuration and the decision log"""

    def __init__(self, table: PerfTable, deadline_ms: Optional[float] = None, alpha: Optional[float] = None,
                 margin: Optional[float] = None, switch_penalty_ms: Optional[float] = None,
                 prior_rate_Bps: Optional[float] = None, prior_delay_ms: float = 0.0,
                 result_bytes: Optional[float] = None, overhead_bytes: float = 0):
        settings = section('controller')
        self.table = table
        self.deadline_ms = settings['deadline_ms'] if deadline_ms is None else deadline_ms
        self.margin = settings['margin'] if margin is None else margin
        self.switch_penalty_ms = settings['switch_penalty_ms'] if switch_penalty_ms is None else switch_penalty_ms
        self.result_bytes = settings['result_bytes'] if result_bytes is None else result_bytes
        self.overhead_bytes = overhead_bytes
        self.estimate = ChannelEstimate(prior_rate_Bps, prior_delay_ms,
                                        settings['alpha'] if alpha is None else alpha)
        self.current: Optional[ConfigPoint] = None
        self.records: List[DecisionRecord] = []
        self._leg_delays: Deque[float] = deque(maxlen=DELAY_WINDOW)

    def predict(self, cfg: ConfigPoint) -> float:
        return predict_rtt(cfg, self.table, self.estimate, self.result_bytes, self.overhead_bytes)

    def decide(self) -> Tuple[ConfigPoint, float]:
        if self.estimate.rate_Bps is None:
            raise ControllerError("controller needs a prior rate or one observation before deciding")
        cfg = select_config(self.table, self.estimate, self.deadline_ms, self.margin, self.current,
                            self.switch_penalty_ms, rtt_fn=self.predict)
        self.current = cfg
        return cfg, self.predict(cfg)

    def observe(self, outcome: FrameOutcome, cfg: ConfigPoint, predicted_rtt_ms: float) -> DecisionRecord:
        delay = None
        if outcome.uplink_ms is not None and outcome.uplink_bytes is not None:
            solved = leg_delay(outcome.network_bytes, outcome.network_ms, outcome.uplink_bytes, outcome.uplink_ms)
            if solved is not None:
                self._leg_delays.append(solved)
                delay = float(np.median(self._leg_delays))
        self.estimate = update_estimate(self.estimate, Observation(outcome.network_bytes, outcome.network_ms,
                                                                   delay_ms=delay, legs=2))
        record = DecisionRecord(outcome.seq, cfg.s, cfg.b, predicted_rtt_ms, outcome.measured_rtt_ms,
                                self.estimate.rate_Bps, self.deadline_ms)
        self.records.append(record)
        return record

    def state(self) -> Dict:
        return {"estimate": asdict(self.estimate),
                "current": asdict(self.current) if self.current else None,
                "decisions": len(self.records)}

    def save_state(self, path: str):
        with open(path, 'w') as f:
            json.dump(self.state(), f, indent=2)

    def write_decision_log(self, path: str):
        write_decision_log(path, self.records)


def write_decision_log(path: str, records: Sequence[DecisionRecord]):
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(asdict(record)) + "\n")


def control_loop(edge, controller: AdaptationController, frames: int,
                 state_path: Optional[str] = None) -> Iterator[Tuple[DecisionRecord, FrameOutcome]]:
    """Per frame: select (s, b), run it through the edge, fold the measurement back in.

    `edge` provides run_frame(cfg) -> FrameOutcome. If the session drops the
    loop ends and the controller state is written to `state_path`.
    """
    try:
        for _ in range(frames):
            cfg, predicted = controller.decide()
            outcome = edge.run_frame(cfg)
            yield controller.observe(outcome, cfg, predicted), outcome
    except SessionClosedError:
        if state_path:
            controller.save_state(state_path)
        return


def load_measured_table(path: Optional[str] = None) -> PerfTable:
    return PerfTable.load_csv(path or repo_path(section("paths")["measured_table"]))


def load_desk_table(path: Optional[str] = None) -> PerfTable:
    return PerfTable.load_csv(path or repo_path(section("paths")["desk_perf_table"]))
