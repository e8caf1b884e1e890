#!/usr/bin/env python3
"""
Edge client and server processes

edge:   x -> ensemble encoder (size s) -> quantize (b bits) -> DATA frame
server: DATA frame -> dequantize -> reconstructor + student head -> task head -> RESULT

The two halves talk over any StreamSession transport: a TCP socket for
demos, or the simulated link for reproducible runs on a virtual clock.
"""

import csv
import os
import socket
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests

from adaptation_controller import (AdaptationController, ConfigPoint, DecisionRecord,
                                   FrameOutcome, PerfTable, control_loop, load_desk_table)
from link_simulator import ChannelModel, SimulatedLink, VirtualClock, WallClock
from quant_codec import (FULL_SCALE_BOTTLENECK_SHAPE, SIDE_INFO, dequantize, pack_symbols,
                         quantize, unpack_symbols)
from slimmable_model import SplitModel
from split_config import check_keys, current_config, repo_path
from split_errors import (CodecError, ConfigError, ModelError, ProtocolError,
                          SessionClosedError)
from tensor_ops import Tensor
from toy_dataset import load_image_dir, make_datasets
from wire_protocol import (HEADER_SIZE, MSG_DATA, MSG_NAMES, MSG_PERF_REPORT, MSG_PERF_REQUEST, MSG_RESULT,
                           STATUS_BAD_PAYLOAD, STATUS_DECODER_FAILURE, STATUS_INVARIANT,
                           STATUS_OK, FrameHeader, PerfReport, ResultMessage,
                           SocketTransport, StreamSession, data_header)

ROLES = ("edge", "server", "loopback-sim")
TIMINGS = ("modeled", "wall")


@dataclass
class RunConfig:
    role: str = "loopback-sim"
    checkpoint: Optional[str] = None
    deadline_ms: float = 400.0
    frames: int = 200
    warmup_frames: int = 10
    grid_frames: int = 30
    seed: int = 1
    output_dir: str = "runs"
    host: str = "127.0.0.1"
    port: int = 5055
    http_port: int = 8080
    input_dir: Optional[str] = None
    perf_table: Optional[str] = None
    sigma_mode: str = SIDE_INFO
    timing: str = "modeled"
    full_scale_link: bool = True
    channel: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.timing not in TIMINGS:
            raise ConfigError(f"timing must be one of {TIMINGS}, got {self.timing!r}")
        if self.frames < 1:
            raise ConfigError(f"frames must be positive, got {self.frames}")

    @classmethod
    def from_dict(cls, data: Optional[Dict] = None, defaults: Optional[Dict] = None) -> 'RunConfig':
        defaults = defaults or current_config()
        runtime, paths, link = defaults['runtime'], defaults['paths'], defaults['link']
        merged = {
            "deadline_ms": defaults['controller']['deadline_ms'],
            "frames": runtime['frames'],
            "warmup_frames": runtime['warmup_frames'],
            "grid_frames": runtime['grid_frames'],
            "seed": defaults['training']['seed'],
            "output_dir": paths['output_dir'],
            "host": runtime['host'],
            "port": runtime['port'],
            "http_port": runtime['http_port'],
            "sigma_mode": defaults['codec']['sigma_mode'],
            "full_scale_link": runtime['full_scale_link'],
            "channel": {"rate_Bps": link['rate_Bps'], "delay_ms": link['delay_ms'],
                        "jitter_pct": link['jitter_pct']},
        }
        if data:
            check_keys(data, [f.name for f in fields(cls)], "run")
            merged.update(data)
        return cls(**merged)

    def channel_model(self, bottleneck_numel: Optional[int] = None) -> ChannelModel:
        channel = ChannelModel.from_dict(dict(self.channel))
        if self.full_scale_link and bottleneck_numel:
            channel.rate_scale = link_scale(bottleneck_numel)
        return channel


def link_scale(bottleneck_numel: int) -> float:
    """Rate multiplier under which a desk-scale bottleneck sees full-scale transfer times"""
    return bottleneck_numel / float(np.prod(FULL_SCALE_BOTTLENECK_SHAPE))


@dataclass
class RttBreakdown:
    seq: int
    s: int
    b: int
    encode_ms: float
    quantize_pack_ms: float
    uplink_ms: float
    decode_ms: float
    downlink_ms: float
    total_ms: float
    metric: float

    @property
    def component_sum(self) -> float:
        return self.encode_ms + self.quantize_pack_ms + self.uplink_ms + self.decode_ms + self.downlink_ms


BREAKDOWN_COLUMNS = tuple(f.name for f in fields(RttBreakdown))


def write_breakdown_csv(path: str, rows: Sequence[RttBreakdown]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(BREAKDOWN_COLUMNS)
        for row in rows:
            writer.writerow([f"{v:.3f}" if isinstance(v, float) else v for v in asdict(row).values()])


# ---------------------------------------------------------------------------
# Compute timing
# ---------------------------------------------------------------------------

class ModeledTimer:
    """Charges each compute stage to the clock from the performance table.

    Encode time in the table covers the encoder plus quantize/pack; the
    quantize/pack share is a fixed configured value.
    """

    def __init__(self, table: PerfTable, clock, quantize_pack_ms: float = 1.0):
        self.table = table
        self.clock = clock
        self.quantize_pack_ms = quantize_pack_ms

    def modeled_ms(self, stage: str, cfg: ConfigPoint) -> float:
        entry = self.table[cfg]
        if stage == "encode":
            return max(entry.encode_ms - self.quantize_pack_ms, 0.0)
        if stage == "quantize_pack":
            return min(self.quantize_pack_ms, entry.encode_ms)
        if stage == "decode":
            return entry.decode_ms
        raise ValueError(f"unknown compute stage {stage!r}")

    def run(self, stage: str, cfg: ConfigPoint, work: Callable):
        result = work()
        ms = self.modeled_ms(stage, cfg)
        self.clock.advance(ms)
        return result, ms


class WallTimer:
    """Measures each stage; the wall clock moves by itself"""

    def run(self, stage: str, cfg: ConfigPoint, work: Callable):
        start = time.perf_counter()
        result = work()
        return result, (time.perf_counter() - start) * 1000.0


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

@dataclass
class EncodedFrame:
    header: FrameHeader
    payload: bytes
    encode_ms: float
    quantize_pack_ms: float


def edge_pipeline(model: SplitModel, x: np.ndarray, cfg: ConfigPoint, seq: int = 0,
                  clock=None, timer=None, sigma_mode: str = SIDE_INFO) -> EncodedFrame:
    """f then Q: ensemble encode at size s, quantize to b bits, pack into a DATA frame"""
    clock = clock or VirtualClock()
    timer = timer or WallTimer()
    t_capture_us = clock.now_us()
    z, encode_ms = timer.run("encode", cfg, lambda: model.encode(Tensor(x), cfg.s))

    def quantize_and_pack():
        zq = quantize(z, cfg.b, sigma_mode=sigma_mode)
        return zq, pack_symbols(zq)

    (zq, payload), qp_ms = timer.run("quantize_pack", cfg, quantize_and_pack)
    header = data_header(seq, cfg.s, cfg.b, z.shape, zq.params.sigma, t_capture_us, clock.now_us())
    return EncodedFrame(header, payload, encode_ms, qp_ms)


def server_pipeline(model: SplitModel, header: FrameHeader, payload: bytes, clock=None, timer=None,
                    sigma_mode: str = SIDE_INFO) -> ResultMessage:
    """Q⁻¹ then g: dequantize, reconstruct, classify. Failures become a RESULT with a status code."""
    clock = clock or VirtualClock()
    timer = timer or WallTimer()
    t_recv_us = clock.now_us()
    cfg = ConfigPoint(header.s, header.b)

    expected = model.bottleneck_shape(header.height * 4)
    if header.s > model.max_size or header.dims != expected or header.height != header.width:
        return ResultMessage(header.seq, t_recv_us, clock.now_us(), 0, (), STATUS_INVARIANT)

    try:
        zq = unpack_symbols(payload, header.dims, header.b, sigma=header.sigma, sigma_mode=sigma_mode)
    except CodecError:
        return ResultMessage(header.seq, t_recv_us, clock.now_us(), 0, (), STATUS_BAD_PAYLOAD)

    def decode():
        return model.classify(model.decode(dequantize(zq)))

    try:
        probs, decode_ms = timer.run("decode", cfg, decode)
    except (ModelError, CodecError, FloatingPointError):
        return ResultMessage(header.seq, t_recv_us, clock.now_us(), 0, (), STATUS_DECODER_FAILURE)
    decoder_time_us = max(1, int(round(decode_ms * 1000)))
    return ResultMessage(header.seq, t_recv_us, clock.now_us(), decoder_time_us,
                         tuple(float(p) for p in probs), STATUS_OK)


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

class SplitServer:
    """Decoder side. One thread per session; the frozen model is shared read-only."""

    def __init__(self, model: SplitModel, table: PerfTable, clock=None, timer=None,
                 sigma_mode: str = SIDE_INFO, verbose: bool = True):
        self.model = model
        self.table = table
        self.clock = clock or WallClock()
        self.timer = timer or WallTimer()
        self.sigma_mode = sigma_mode
        self.verbose = verbose
        self.sessions: Dict[int, Dict] = {}
        self._next_session = 0
        self._lock = threading.Lock()
        self._listener: Optional[socket.socket] = None
        self.started_at = time.time()

    def perf_report(self) -> PerfReport:
        return PerfReport([(cfg.s, cfg.b, max(1, int(round(self.table[cfg].decode_ms * 1000))))
                           for cfg in self.table.points()])

    def _register(self, peer: str) -> int:
        with self._lock:
            session_id = self._next_session
            self._next_session += 1
            self.sessions[session_id] = {"id": session_id, "peer": peer, "frames": 0,
                                         "errors": 0, "perf_requests": 0, "last_config": None,
                                         "open": True}
            return session_id

    def handle_session(self, session: StreamSession, peer: str = "loopback"):
        """Serve one connection until the edge goes away"""
        session_id = self._register(peer)
        info = self.sessions[session_id]
        try:
            session.send_perf_report(self.perf_report())
            while True:
                message = session.recv()
                header = message.header
                if header.msg_type == MSG_PERF_REQUEST:
                    with self._lock:
                        info["perf_requests"] += 1
                    session.send_perf_report(self.perf_report())
                    continue
                if header.msg_type != MSG_DATA:
                    raise ProtocolError(f"server got an unexpected {MSG_NAMES[header.msg_type]} message")
                result = server_pipeline(self.model, header, message.payload, self.clock, self.timer,
                                         self.sigma_mode)
                with self._lock:
                    info["frames"] += 1
                    info["last_config"] = [header.s, header.b]
                    if result.status != STATUS_OK:
                        info["errors"] += 1
                session.send_result(result, header.s, header.b)
        except SessionClosedError:
            pass
        except ProtocolError as e:
            if self.verbose:
                print(f"❌ Session {session_id} ({peer}) dropped: {e}")
        finally:
            info["open"] = False
            session.close()

    def serve_tcp(self, host: str, port: int, max_sessions: Optional[int] = None):
        """Accept TCP sessions forever (or until max_sessions have been served)"""
        self._listener = socket.create_server((host, port))
        if self.verbose:
            print(f"🚀 Split server listening on {host}:{port} (N={self.model.max_size})")
        threads = []
        try:
            while max_sessions is None or len(threads) < max_sessions:
                try:
                    conn, addr = self._listener.accept()
                except OSError:
                    break
                session = StreamSession(SocketTransport(conn), "server", self.model.max_size)
                thread = threading.Thread(target=self.handle_session, args=(session, f"{addr[0]}:{addr[1]}"),
                                          daemon=True)
                thread.start()
                threads.append(thread)
        finally:
            for thread in threads:
                thread.join()

    def stop(self):
        if self._listener is not None:
            self._listener.close()

    def start_http(self, host: str, port: int) -> threading.Thread:
        """Status API (health, perf table, sessions) on a background thread"""
        from backend_api import create_app

        app = create_app(self)
        thread = threading.Thread(target=lambda: app.run(host=host, port=port, debug=False, use_reloader=False,
                                                         threaded=True), daemon=True)
        thread.start()
        if self.verbose:
            print(f"📊 Status API on http://{host}:{port}/api/health")
        return thread


# ---------------------------------------------------------------------------
# Edge
# ---------------------------------------------------------------------------

class FrameSource:
    """Endless cycle over input images"""

    def __init__(self, images: Sequence[np.ndarray]):
        if not len(images):
            raise ConfigError("frame source has no images")
        self.images = images
        self.index = 0

    @classmethod
    def from_run(cls, run: RunConfig, input_size: int, count: int = 64) -> 'FrameSource':
        if run.input_dir:
            return cls(load_image_dir(run.input_dir))
        _, val = make_datasets(0, count, input_size, seed=run.seed + 1000)
        return cls(val.images)

    def next(self) -> np.ndarray:
        image = self.images[self.index % len(self.images)]
        self.index += 1
        return image


class EdgeClient:
    def __init__(self, model: SplitModel, session: StreamSession, frames: FrameSource, table: PerfTable,
                 clock=None, timer=None, sigma_mode: str = SIDE_INFO):
        self.model = model
        self.session = session
        self.frames = frames
        self.table = table
        self.clock = clock or WallClock()
        self.timer = timer or WallTimer()
        self.sigma_mode = sigma_mode
        self.breakdowns: List[RttBreakdown] = []
        self.results: List[ResultMessage] = []
        self.capture_ms: List[float] = []

    @staticmethod
    def fetch_health(http_url: str, timeout: float = 5.0) -> Dict:
        """Check the server's status API before opening the binary session"""
        try:
            response = requests.get(f"{http_url.rstrip('/')}/api/health", timeout=timeout)
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            raise ProtocolError(f"server status API unreachable at {http_url}: {e}")

    def fetch_perf_report(self) -> PerfReport:
        report = self.session.recv(MSG_PERF_REPORT).perf_report()
        self.table.update_decode_times(report.decode_ms())
        return report

    def request_perf_report(self) -> PerfReport:
        """Ask the server for its current decoder times and fold them into the table"""
        self.session.send_perf_request()
        return self.fetch_perf_report()

    def run_frame(self, cfg: ConfigPoint) -> FrameOutcome:
        x = self.frames.next()
        t_capture = self.clock.now_ms()
        self.capture_ms.append(t_capture)
        encoded = edge_pipeline(self.model, x, cfg, self.session.next_seq(), self.clock, self.timer,
                                self.sigma_mode)
        t_sent = self.clock.now_ms()
        self.session.send_frame(encoded.header, encoded.payload)
        message = self.session.recv(MSG_RESULT)
        t_done = self.clock.now_ms()
        result = message.result()
        self.results.append(result)

        decode_ms = result.decoder_time_us / 1000.0
        rtt = t_done - t_capture
        network_ms = (t_done - t_sent) - decode_ms
        transfer = getattr(self.session.transport, "last_transfer", None)
        uplink_ms = transfer.duration_ms if transfer is not None else network_ms / 2.0
        breakdown = RttBreakdown(encoded.header.seq, cfg.s, cfg.b, encoded.encode_ms, encoded.quantize_pack_ms,
                                 uplink_ms, decode_ms, network_ms - uplink_ms, rtt,
                                 self.table[cfg].metric if cfg in self.table else float('nan'))
        self.breakdowns.append(breakdown)
        up_bytes = HEADER_SIZE + len(encoded.payload)
        down_bytes = HEADER_SIZE + len(message.payload)
        return FrameOutcome(encoded.header.seq, rtt, network_ms, up_bytes + down_bytes, breakdown,
                            transfer.duration_ms if transfer is not None else None, up_bytes)

    def close(self):
        self.session.close()


def result_frame_bytes(num_classes: int) -> int:
    return len(ResultMessage(0, 0, 0, 0, (0.0,) * num_classes).encode()) + HEADER_SIZE


# ---------------------------------------------------------------------------
# Loopback simulation
# ---------------------------------------------------------------------------

class LoopbackSimulation:
    """Edge and server joined by a SimulatedLink on one virtual clock.

    The server runs on its own thread; the edge waits for each RESULT before
    starting the next frame, so the clock is only ever moved by one side at
    a time and runs are reproducible.
    """

    def __init__(self, model: SplitModel, table: PerfTable, channel: ChannelModel, frames: FrameSource,
                 quantize_pack_ms: Optional[float] = None, sigma_mode: str = SIDE_INFO, clock=None):
        qp_ms = current_config()['runtime']['modeled_quantize_pack_ms'] if quantize_pack_ms is None else quantize_pack_ms
        self.model = model
        self.table = table
        self.clock = clock or VirtualClock()
        self.link = SimulatedLink(channel, self.clock)
        timer = ModeledTimer(table, self.clock, qp_ms) if isinstance(self.clock, VirtualClock) else WallTimer()
        self.server = SplitServer(model, table, self.clock, timer, sigma_mode, verbose=False)
        self.edge = EdgeClient(model, StreamSession(self.link.edge_end, "edge", model.max_size), frames,
                               table, self.clock, timer, sigma_mode)
        self._server_session = StreamSession(self.link.server_end, "server", model.max_size)
        self._thread = threading.Thread(target=self.server.handle_session, args=(self._server_session,),
                                        daemon=True)

    def __enter__(self):
        self._thread.start()
        self.edge.fetch_perf_report()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.edge.close()
        self._thread.join(timeout=10)
        return False

    def controller(self, deadline_ms: float, **kwargs) -> AdaptationController:
        channel = self.link.channel
        return AdaptationController(self.table, deadline_ms,
                                    prior_rate_Bps=channel.rate_at(0.0),
                                    prior_delay_ms=channel.delay_ms,
                                    result_bytes=result_frame_bytes(self.model.meta.num_classes),
                                    overhead_bytes=HEADER_SIZE, **kwargs)


def fit_table_to_model(model: SplitModel, table: PerfTable) -> PerfTable:
    """The table with payload sizes of this model's bottleneck; ensemble sizes must agree"""
    if table.max_size != model.max_size:
        raise ConfigError(f"performance table covers s up to {table.max_size} but the checkpoint has N={model.max_size}")
    return table.with_payloads(int(np.prod(model.bottleneck_shape())))


def run_simulation(model: SplitModel, run: RunConfig, channel: Optional[ChannelModel] = None,
                   table: Optional[PerfTable] = None, frames: Optional[int] = None,
                   verbose: bool = True) -> Tuple[List[DecisionRecord], List[RttBreakdown], AdaptationController]:
    """Adaptive loopback run on the virtual clock"""
    table = table or load_desk_table(repo_path(run.perf_table) if run.perf_table else None)
    table = fit_table_to_model(model, table)
    numel = int(np.prod(model.bottleneck_shape()))
    channel = channel or run.channel_model()
    if run.full_scale_link:
        channel = replace(channel, rate_scale=link_scale(numel))
    source = FrameSource.from_run(run, model.meta.input_size)
    frame_count = frames or run.frames

    with LoopbackSimulation(model, table, channel, source, sigma_mode=run.sigma_mode) as sim:
        controller = sim.controller(run.deadline_ms)
        records = [record for record, _ in control_loop(sim.edge, controller, frame_count)]
        breakdowns = list(sim.edge.breakdowns)
    if verbose:
        misses = sum(1 for r in records[run.warmup_frames:] if r.measured_rtt_ms > run.deadline_ms)
        print(f"✅ Simulated {len(records)} frames, {misses} deadline misses after warmup")
    return records, breakdowns, controller


def run_edge(model: SplitModel, run: RunConfig, table: PerfTable, verbose: bool = True):
    """Real-socket edge: query the status API, connect, adapt until the frame budget is spent"""
    health = EdgeClient.fetch_health(f"http://{run.host}:{run.http_port}")
    if verbose:
        print(f"✅ Server healthy: {health.get('status')} (N={health.get('max_size')})")
    table = fit_table_to_model(model, table)
    transport = SocketTransport.connect(run.host, run.port, timeout=30)
    session = StreamSession(transport, "edge", model.max_size)
    clock = WallClock()
    edge = EdgeClient(model, session, FrameSource.from_run(run, model.meta.input_size), table, clock,
                      WallTimer(), run.sigma_mode)
    edge.fetch_perf_report()
    channel = run.channel_model()
    controller = AdaptationController(table, run.deadline_ms, prior_rate_Bps=channel.rate_at(0.0),
                                      prior_delay_ms=channel.delay_ms,
                                      result_bytes=result_frame_bytes(model.meta.num_classes),
                                      overhead_bytes=HEADER_SIZE)
    os.makedirs(run.output_dir, exist_ok=True)
    state_path = os.path.join(run.output_dir, "controller_state.json")
    try:
        records = [record for record, _ in control_loop(edge, controller, run.frames, state_path)]
    finally:
        edge.close()
    return records, edge.breakdowns, controller
