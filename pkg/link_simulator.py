#!/usr/bin/env python3
"""
Simulated bandwidth-limited link between the edge device and the server

Rates are bytes/second, times are milliseconds. A channel is either a
constant rate or a step-function trace; transfers that straddle a trace
breakpoint are integrated piecewise. Everything runs against a clock that is
either virtual (tests, simulations) or the wall clock (demos).
"""

import bisect
import csv
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from split_config import check_keys, section
from split_errors import ConfigError, SessionClosedError

CONSTANT = "constant"
TRACE = "trace"

# recent transfers kept on a SimulatedLink for inspection
TRANSFER_HISTORY = 1024


@dataclass
class ChannelModel:
    mode: str = CONSTANT
    rate_Bps: float = 200000.0
    delay_ms: float = 10.0
    trace: List[Tuple[float, float]] = field(default_factory=list)
    seed: int = 0
    jitter_pct: float = 0.0
    rate_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in (CONSTANT, TRACE):
            raise ConfigError(f"channel mode must be '{CONSTANT}' or '{TRACE}', got {self.mode!r}")
        if self.delay_ms < 0:
            raise ConfigError(f"delay_ms must be non-negative, got {self.delay_ms}")
        if not 0 <= self.jitter_pct < 100:
            raise ConfigError(f"jitter_pct must be in [0, 100), got {self.jitter_pct}")
        if self.rate_scale <= 0:
            raise ConfigError(f"rate_scale must be positive, got {self.rate_scale}")
        if self.mode == CONSTANT:
            if not self.rate_Bps > 0:
                raise ConfigError(f"rate_Bps must be positive, got {self.rate_Bps}")
            return

        if not self.trace:
            raise ConfigError("trace channel needs at least one (t_ms, rate_Bps) breakpoint")
        self.trace = [(float(t), float(r)) for t, r in self.trace]
        for (t0, _), (t1, _) in zip(self.trace, self.trace[1:]):
            if t1 <= t0:
                raise ConfigError(f"trace timestamps must be strictly increasing ({t0} then {t1})")
        for t, rate in self.trace:
            if not rate > 0:
                raise ConfigError(f"trace rate at t={t} ms must be positive, got {rate}")

    @classmethod
    def constant(cls, rate_Bps: float, delay_ms: float = 0.0, **kwargs) -> 'ChannelModel':
        return cls(CONSTANT, rate_Bps, delay_ms, **kwargs)

    @classmethod
    def from_trace(cls, trace: Sequence[Tuple[float, float]], delay_ms: float = 0.0, **kwargs) -> 'ChannelModel':
        return cls(TRACE, trace[0][1] if trace else 0.0, delay_ms, list(trace), **kwargs)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ChannelModel':
        allowed = ('mode', 'rate_Bps', 'delay_ms', 'trace', 'seed', 'jitter_pct', 'rate_scale')
        check_keys(data, allowed, "channel")
        return cls(**data)

    def _times(self) -> List[float]:
        return [t for t, _ in self.trace]

    def rate_at(self, t_ms: float) -> float:
        """Effective rate at t; before the first breakpoint the first rate holds, after the last the last"""
        if self.mode == CONSTANT:
            return self.rate_Bps * self.rate_scale
        idx = bisect.bisect_right(self._times(), t_ms) - 1
        return self.trace[max(idx, 0)][1] * self.rate_scale

    def segments(self, t_start: float) -> Iterator[Tuple[float, float, float]]:
        """(begin, end, rate) pieces from t_start on; the last piece ends at +inf"""
        if self.mode == CONSTANT:
            yield t_start, math.inf, self.rate_at(t_start)
            return
        t = t_start
        for bp, _ in self.trace:
            if bp > t:
                yield t, bp, self.rate_at(t)
                t = bp
        yield t, math.inf, self.rate_at(t)


def serialization_ms(nbytes: float, channel: ChannelModel, t_now: float) -> float:
    """Time to push nbytes onto the link starting at t_now (no propagation delay)"""
    if nbytes < 0:
        raise ValueError(f"byte count must be non-negative, got {nbytes}")
    remaining = float(nbytes)
    if remaining == 0:
        return 0.0
    for begin, end, rate in channel.segments(t_now):
        capacity = rate * (end - begin) / 1000.0
        if remaining <= capacity:
            return begin + remaining / rate * 1000.0 - t_now
        remaining -= capacity
    raise AssertionError("unreachable: last segment is unbounded")


def transfer_time(nbytes: float, channel: ChannelModel, t_now: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Serialization (with optional seeded jitter) plus one-way delay, in ms"""
    serial = serialization_ms(nbytes, channel, t_now)
    if channel.jitter_pct and rng is not None:
        spread = channel.jitter_pct / 100.0
        serial *= 1.0 + rng.uniform(-spread, spread)
    return serial + channel.delay_ms


def bytes_deliverable(channel: ChannelModel, t1: float, t2: float) -> float:
    """Integral of the rate over [t1, t2]"""
    if t2 <= t1:
        return 0.0
    total = 0.0
    for begin, end, rate in channel.segments(t1):
        stop = min(end, t2)
        total += rate * (stop - begin) / 1000.0
        if end >= t2:
            break
    return total


# ---------------------------------------------------------------------------
# Walk profiles and trace files
# ---------------------------------------------------------------------------

def default_anchors() -> List[Tuple[float, float]]:
    return [tuple(a) for a in section('link')['distance_rate_anchors']]


def distance_to_rate(distance_m: float, anchors: Optional[Sequence[Tuple[float, float]]] = None) -> float:
    if distance_m < 0:
        raise ConfigError(f"distance must be non-negative, got {distance_m} m")
    anchors = sorted(anchors or default_anchors())
    return float(np.interp(distance_m, [d for d, _ in anchors], [r for _, r in anchors]))


def walk_profile(schedule: Sequence[Tuple[float, float]],
                 anchors: Optional[Sequence[Tuple[float, float]]] = None,
                 step_ms: Optional[float] = None,
                 delay_ms: Optional[float] = None) -> ChannelModel:
    """Turn a (t_ms, distance_m) schedule into a rate trace.

    Distance is interpolated linearly in time and sampled every step_ms;
    distance maps to rate through the anchor table.
    """
    if not schedule:
        raise ConfigError("walk schedule is empty")
    link = section('link')
    step_ms = step_ms or link['walk_step_ms']
    delay_ms = link['delay_ms'] if delay_ms is None else delay_ms
    anchors = anchors or default_anchors()

    times = [float(t) for t, _ in schedule]
    distances = [float(d) for _, d in schedule]
    for d in distances:
        if d < 0:
            raise ConfigError(f"walk schedule has negative distance {d} m")
    for t0, t1 in zip(times, times[1:]):
        if t1 <= t0:
            raise ConfigError(f"walk schedule timestamps must be strictly increasing ({t0} then {t1})")

    samples = list(np.arange(times[0], times[-1], step_ms)) + [times[-1]]
    trace = []
    for t in samples:
        rate = distance_to_rate(float(np.interp(t, times, distances)), anchors)
        if not trace or not math.isclose(trace[-1][1], rate, rel_tol=0, abs_tol=1e-9):
            trace.append((float(t), rate))
    return ChannelModel.from_trace(trace, delay_ms)


def _read_pairs(path: str, columns: Tuple[str, str]) -> List[Tuple[float, float]]:
    try:
        with open(path, 'r', newline='') as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != columns:
                raise ConfigError(f"{path}: expected header {','.join(columns)}, got {reader.fieldnames}")
            return [(float(row[columns[0]]), float(row[columns[1]])) for row in reader]
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except ValueError as e:
        raise ConfigError(f"{path}: {e}")


def _write_pairs(path: str, columns: Tuple[str, str], rows: Sequence[Tuple[float, float]]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for a, b in rows:
            writer.writerow([f"{a:g}", f"{b:g}"])


def load_trace_csv(path: str, delay_ms: Optional[float] = None) -> ChannelModel:
    delay = section('link')['delay_ms'] if delay_ms is None else delay_ms
    return ChannelModel.from_trace(_read_pairs(path, ("t_ms", "rate_Bps")), delay)


def write_trace_csv(path: str, channel: ChannelModel):
    rows = channel.trace if channel.mode == TRACE else [(0.0, channel.rate_Bps)]
    _write_pairs(path, ("t_ms", "rate_Bps"), rows)


def load_walk_csv(path: str) -> List[Tuple[float, float]]:
    return _read_pairs(path, ("t_ms", "distance_m"))


def write_walk_csv(path: str, schedule: Sequence[Tuple[float, float]]):
    _write_pairs(path, ("t_ms", "distance_m"), schedule)


# ---------------------------------------------------------------------------
# Clocks and the simulated transport
# ---------------------------------------------------------------------------

class VirtualClock:
    """Simulation time in ms; only moves when told to"""

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)
        self._lock = threading.Lock()

    def now_ms(self) -> float:
        with self._lock:
            return self._now

    def now_us(self) -> int:
        return int(round(self.now_ms() * 1000))

    def advance(self, ms: float):
        if ms < 0:
            raise ValueError(f"cannot move the clock backwards by {ms} ms")
        with self._lock:
            self._now += ms

    def advance_to(self, t_ms: float):
        with self._lock:
            self._now = max(self._now, t_ms)


class WallClock:
    """Monotonic wall time in ms since construction; advancing means sleeping"""

    def __init__(self):
        self._start = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._start) * 1000.0

    def now_us(self) -> int:
        return int(round(self.now_ms() * 1000))

    def advance(self, ms: float):
        if ms > 0:
            time.sleep(ms / 1000.0)

    def advance_to(self, t_ms: float):
        self.advance(t_ms - self.now_ms())


@dataclass
class TransferRecord:
    direction: str
    nbytes: int
    start_ms: float
    arrival_ms: float

    @property
    def duration_ms(self) -> float:
        return self.arrival_ms - self.start_ms


class LinkEnd:
    """One end of a SimulatedLink, usable as a StreamSession transport"""

    _CLOSED = object()

    def __init__(self, link: 'SimulatedLink', direction: str):
        self.link = link
        self.direction = direction
        self.peer: Optional['LinkEnd'] = None
        self._inbox: queue.Queue = queue.Queue()
        self._leftover = b""
        self._eof = False
        self.last_transfer: Optional[TransferRecord] = None

    def send(self, data: bytes):
        if self.peer is None:
            raise SessionClosedError("simulated link end is closed")
        record = self.link.schedule(self.direction, len(data))
        self.last_transfer = record
        self.peer._inbox.put((record.arrival_ms, bytes(data)))

    def recv(self, max_bytes: int = 65536) -> bytes:
        if not self._leftover:
            if self._eof:
                return b""
            item = self._inbox.get()
            if item is self._CLOSED:
                self._eof = True
                return b""
            arrival_ms, self._leftover = item
            self.link.clock.advance_to(arrival_ms)
        chunk, self._leftover = self._leftover[:max_bytes], self._leftover[max_bytes:]
        return chunk

    def close(self):
        if self.peer is not None:
            self.peer._inbox.put(self._CLOSED)
            self.peer = None


class SimulatedLink:
    """Two serial directions over one channel model.

    A transfer starts when its direction is free, spends the serialization
    time on the wire and arrives one delay later. Receiving a message moves
    the clock to its arrival time.
    """

    UPLINK = "uplink"
    DOWNLINK = "downlink"

    def __init__(self, channel: ChannelModel, clock=None, history: int = TRANSFER_HISTORY):
        self.channel = channel
        self.clock = clock or VirtualClock()
        self._rng = np.random.default_rng(channel.seed)
        self._busy_until = {self.UPLINK: -math.inf, self.DOWNLINK: -math.inf}
        self._lock = threading.Lock()
        self.transfers: Deque[TransferRecord] = deque(maxlen=history)

        self.edge_end = LinkEnd(self, self.UPLINK)
        self.server_end = LinkEnd(self, self.DOWNLINK)
        self.edge_end.peer = self.server_end
        self.server_end.peer = self.edge_end

    def schedule(self, direction: str, nbytes: int) -> TransferRecord:
        with self._lock:
            start = max(self.clock.now_ms(), self._busy_until[direction])
            serial = transfer_time(nbytes, self.channel, start, self._rng) - self.channel.delay_ms
            self._busy_until[direction] = start + serial
            record = TransferRecord(direction, nbytes, start, start + serial + self.channel.delay_ms)
            self.transfers.append(record)
            return record


def simulated_transport(channel: ChannelModel, clock=None) -> SimulatedLink:
    return SimulatedLink(channel, clock)
