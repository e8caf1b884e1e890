#!/usr/bin/env python3
"""
SPLC binary wire protocol

Every message is a fixed 42-byte little-endian header followed by a payload:

    magic "SPLC" | version u8 | msg_type u8 | seq u32 | s u8 | b u8 |
    C u16 | H u16 | W u16 | sigma f32 | t_capture_us u64 |
    t_encode_done_us u64 | payload_len u32

DATA frames (edge -> server) carry packed b-bit symbols. RESULT and
PERF_REPORT (server -> edge) carry their body as the payload. PERF_REQUEST
(edge -> server) has no payload and asks for a fresh PERF_REPORT.
"""

import queue
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from quant_codec import payload_size
from split_errors import (BadMagicError, FrameInvariantError, ProtocolError,
                          SessionClosedError, TruncatedFrameError,
                          UnsupportedVersionError)

MAGIC = b"SPLC"
VERSION = 1

MSG_DATA = 0
MSG_RESULT = 1
MSG_PERF_REPORT = 2
MSG_PERF_REQUEST = 3
MSG_NAMES = {MSG_DATA: "DATA", MSG_RESULT: "RESULT", MSG_PERF_REPORT: "PERF_REPORT",
             MSG_PERF_REQUEST: "PERF_REQUEST"}

HEADER = struct.Struct('<4sBBIBBHHHfQQI')
HEADER_SIZE = HEADER.size

RESULT_FIXED = struct.Struct('<IQQIH')
PERF_ENTRY = struct.Struct('<BBI')

STATUS_OK = 0
STATUS_BAD_PAYLOAD = 1
STATUS_INVARIANT = 2
STATUS_DECODER_FAILURE = 3

U32_MAX = 0xFFFFFFFF

# largest body each control message can legally carry
MAX_CONTROL_PAYLOAD = {
    MSG_RESULT: RESULT_FIXED.size + 4 * 0xFFFF + 1,
    MSG_PERF_REPORT: 1 + 255 * PERF_ENTRY.size,
    MSG_PERF_REQUEST: 0,
}


@dataclass
class FrameHeader:
    msg_type: int = MSG_DATA
    seq: int = 0
    s: int = 1
    b: int = 1
    channels: int = 0
    height: int = 0
    width: int = 0
    sigma: float = 0.0
    t_capture_us: int = 0
    t_encode_done_us: int = 0
    payload_len: int = 0
    version: int = VERSION

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def numel(self) -> int:
        return self.channels * self.height * self.width

    def validate(self, max_size: Optional[int] = None):
        """Raise FrameInvariantError if the header breaks a protocol invariant"""
        if self.msg_type not in MSG_NAMES:
            raise FrameInvariantError(f"unknown msg_type {self.msg_type}")
        if not 0 <= self.seq <= U32_MAX:
            raise FrameInvariantError(f"seq {self.seq} does not fit in u32")
        if self.msg_type != MSG_DATA:
            limit = MAX_CONTROL_PAYLOAD[self.msg_type]
            if self.payload_len > limit:
                raise FrameInvariantError(
                    f"{MSG_NAMES[self.msg_type]} payload_len {self.payload_len} exceeds {limit} bytes")
            return
        limit = max_size if max_size is not None else 255
        if not 1 <= self.s <= limit:
            raise FrameInvariantError(f"ensemble size s={self.s} outside [1, {limit}]")
        if not 1 <= self.b <= 8:
            raise FrameInvariantError(f"bits b={self.b} outside [1, 8]")
        expected = payload_size(self.numel, self.b)
        if self.payload_len != expected:
            raise FrameInvariantError(
                f"payload_len {self.payload_len} != ceil({self.channels}*{self.height}*{self.width}*{self.b}/8) = {expected}")

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.msg_type, self.seq, self.s, self.b,
                           self.channels, self.height, self.width, self.sigma,
                           self.t_capture_us, self.t_encode_done_us, self.payload_len)


@dataclass
class ResultMessage:
    seq: int
    t_server_recv_us: int
    t_decode_done_us: int
    decoder_time_us: int
    result: Tuple[float, ...] = ()
    status: int = STATUS_OK

    def encode(self) -> bytes:
        values = tuple(self.result)
        return (RESULT_FIXED.pack(self.seq, self.t_server_recv_us, self.t_decode_done_us,
                                  self.decoder_time_us, len(values))
                + struct.pack(f'<{len(values)}f', *values)
                + struct.pack('<B', self.status))

    @classmethod
    def decode(cls, body: bytes) -> 'ResultMessage':
        if len(body) < RESULT_FIXED.size + 1:
            raise FrameInvariantError(f"RESULT body too short: {len(body)} bytes")
        seq, recv_us, done_us, decoder_us, count = RESULT_FIXED.unpack_from(body)
        expected = RESULT_FIXED.size + 4 * count + 1
        if len(body) != expected:
            raise FrameInvariantError(f"RESULT body is {len(body)} bytes, expected {expected} for {count} values")
        values = struct.unpack_from(f'<{count}f', body, RESULT_FIXED.size)
        status = body[-1]
        return cls(seq, recv_us, done_us, decoder_us, tuple(values), status)


@dataclass
class PerfReport:
    """Server decoder times per (s, b)"""
    entries: List[Tuple[int, int, int]] = field(default_factory=list)

    def encode(self) -> bytes:
        if len(self.entries) > 255:
            raise FrameInvariantError(f"PERF_REPORT holds at most 255 entries, got {len(self.entries)}")
        body = struct.pack('<B', len(self.entries))
        for s, b, decoder_us in self.entries:
            body += PERF_ENTRY.pack(s, b, decoder_us)
        return body

    @classmethod
    def decode(cls, body: bytes) -> 'PerfReport':
        if not body:
            raise FrameInvariantError("empty PERF_REPORT body")
        count = body[0]
        if len(body) != 1 + count * PERF_ENTRY.size:
            raise FrameInvariantError(f"PERF_REPORT body is {len(body)} bytes for {count} entries")
        entries = [PERF_ENTRY.unpack_from(body, 1 + i * PERF_ENTRY.size) for i in range(count)]
        return cls([tuple(e) for e in entries])

    def decode_ms(self) -> Dict[Tuple[int, int], float]:
        return {(s, b): us / 1000.0 for s, b, us in self.entries}


@dataclass
class Message:
    header: FrameHeader
    payload: bytes

    @property
    def msg_type(self) -> int:
        return self.header.msg_type

    def result(self) -> ResultMessage:
        if self.msg_type != MSG_RESULT:
            raise ProtocolError(f"{MSG_NAMES[self.msg_type]} message is not a RESULT")
        return ResultMessage.decode(self.payload)

    def perf_report(self) -> PerfReport:
        if self.msg_type != MSG_PERF_REPORT:
            raise ProtocolError(f"{MSG_NAMES[self.msg_type]} message is not a PERF_REPORT")
        return PerfReport.decode(self.payload)


def data_header(seq: int, s: int, b: int, dims: Sequence[int], sigma: float,
                t_capture_us: int = 0, t_encode_done_us: int = 0) -> FrameHeader:
    channels, height, width = dims
    return FrameHeader(MSG_DATA, seq, s, b, channels, height, width, sigma,
                       t_capture_us, t_encode_done_us,
                       payload_size(channels * height * width, b))


def encode_frame(header: FrameHeader, payload: bytes, max_size: Optional[int] = None) -> bytes:
    """Header then payload; invariants are checked before anything is produced"""
    if header.payload_len != len(payload):
        raise FrameInvariantError(f"header payload_len {header.payload_len} != actual payload {len(payload)} bytes")
    header.validate(max_size)
    return header.pack() + bytes(payload)


def parse_frame(buf, max_size: Optional[int] = None) -> Tuple[FrameHeader, bytes, int]:
    """Parse one frame from the start of `buf`; returns (header, payload, bytes consumed)"""
    have = len(buf)
    if have >= 4 and bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if have >= 5 and buf[4] != VERSION:
        raise UnsupportedVersionError(f"protocol version {buf[4]} not supported (speaking {VERSION})")
    if have < HEADER_SIZE:
        raise TruncatedFrameError(HEADER_SIZE - have, have)

    (_, version, msg_type, seq, s, b, channels, height, width, sigma,
     t_capture_us, t_encode_done_us, payload_len) = HEADER.unpack_from(buf)
    header = FrameHeader(msg_type, seq, s, b, channels, height, width, sigma,
                         t_capture_us, t_encode_done_us, payload_len, version)
    header.validate(max_size)

    total = HEADER_SIZE + payload_len
    if have < total:
        raise TruncatedFrameError(total - have, have)
    return header, bytes(buf[HEADER_SIZE:total]), total


def decode_frame(data: bytes, max_size: Optional[int] = None) -> Tuple[FrameHeader, bytes]:
    header, payload, consumed = parse_frame(data, max_size)
    if consumed != len(data):
        raise FrameInvariantError(f"{len(data) - consumed} trailing bytes after frame seq {header.seq}")
    return header, payload


class FrameDecoder:
    """Incremental reassembly of frames from arbitrary byte chunks"""

    def __init__(self, max_size: Optional[int] = None):
        self.max_size = max_size
        self._buf = bytearray()
        self.needed = HEADER_SIZE

    @property
    def pending(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> List[Message]:
        self._buf.extend(data)
        messages = []
        while self._buf:
            if len(self._buf) < self.needed:
                break
            try:
                header, payload, consumed = parse_frame(self._buf, self.max_size)
            except TruncatedFrameError as e:
                self.needed = len(self._buf) + e.needed
                break
            del self._buf[:consumed]
            self.needed = HEADER_SIZE
            messages.append(Message(header, payload))
        return messages


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class LoopbackTransport:
    """In-memory ordered byte pipe; `chunk_size` fragments every send"""

    _CLOSED = object()

    def __init__(self, chunk_size: Optional[int] = None):
        self.chunk_size = chunk_size
        self._inbox: queue.Queue = queue.Queue()
        self._leftover = b""
        self._peer: Optional['LoopbackTransport'] = None
        self._eof = False

    @classmethod
    def pair(cls, chunk_size: Optional[int] = None) -> Tuple['LoopbackTransport', 'LoopbackTransport']:
        a, b = cls(chunk_size), cls(chunk_size)
        a._peer, b._peer = b, a
        return a, b

    def send(self, data: bytes):
        if self._peer is None:
            raise SessionClosedError("loopback transport has no peer")
        step = self.chunk_size or len(data) or 1
        for start in range(0, len(data), step):
            self._peer._inbox.put(bytes(data[start:start + step]))

    def recv(self, max_bytes: int = 65536) -> bytes:
        if not self._leftover:
            if self._eof:
                return b""
            item = self._inbox.get()
            if item is self._CLOSED:
                self._eof = True
                return b""
            self._leftover = item
        chunk, self._leftover = self._leftover[:max_bytes], self._leftover[max_bytes:]
        return chunk

    def close(self):
        if self._peer is not None:
            self._peer._inbox.put(self._CLOSED)
            self._peer = None


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = None) -> 'SocketTransport':
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, data: bytes):
        self.sock.sendall(data)

    def recv(self, max_bytes: int = 65536) -> bytes:
        try:
            return self.sock.recv(max_bytes)
        except (ConnectionResetError, OSError):
            return b""

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

class StreamSession:
    """Whole-message send/receive over an ordered byte transport.

    Sequence numbers are strictly increasing in each direction. Received
    messages are demultiplexed by msg_type, so a caller waiting for a RESULT
    does not lose a PERF_REPORT that arrived first.
    """

    ROLES = ("edge", "server")

    def __init__(self, transport, role: str, max_size: Optional[int] = None):
        if role not in self.ROLES:
            raise ProtocolError(f"unknown session role {role!r}")
        self.transport = transport
        self.role = role
        self.max_size = max_size
        self._decoder = FrameDecoder(max_size)
        self._queues: Dict[int, deque] = {t: deque() for t in MSG_NAMES}
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self.last_sent_seq: Optional[int] = None
        self.last_recv_seq: Optional[int] = None
        self.closed = False

    def next_seq(self) -> int:
        return 0 if self.last_sent_seq is None else self.last_sent_seq + 1

    def send_frame(self, header: FrameHeader, payload: bytes) -> bytes:
        with self._send_lock:
            return self._send_locked(header, payload)

    def _send_locked(self, header: FrameHeader, payload: bytes) -> bytes:
        if self.closed:
            raise SessionClosedError("send on closed session", self.last_sent_seq)
        if self.last_sent_seq is not None and header.seq <= self.last_sent_seq:
            raise FrameInvariantError(f"seq {header.seq} not greater than last sent {self.last_sent_seq}")
        frame = encode_frame(header, payload, self.max_size)
        self.transport.send(frame)
        self.last_sent_seq = header.seq
        return frame

    def _send_body(self, msg_type: int, body: bytes, s: int = 0, b: int = 0) -> bytes:
        with self._send_lock:
            header = FrameHeader(msg_type, self.next_seq(), s, b, payload_len=len(body))
            return self._send_locked(header, body)

    def send_result(self, result: ResultMessage, s: int = 0, b: int = 0) -> bytes:
        return self._send_body(MSG_RESULT, result.encode(), s, b)

    def send_perf_report(self, report: PerfReport) -> bytes:
        return self._send_body(MSG_PERF_REPORT, report.encode())

    def send_perf_request(self) -> bytes:
        return self._send_body(MSG_PERF_REQUEST, b"")

    def recv(self, msg_type: Optional[int] = None) -> Message:
        """Next message (of `msg_type` if given); raises SessionClosedError at end of stream"""
        with self._recv_lock:
            while True:
                queued = self._pop(msg_type)
                if queued is not None:
                    return queued
                chunk = self.transport.recv(65536)
                if not chunk:
                    self.closed = True
                    if self._decoder.pending:
                        raise SessionClosedError(
                            f"transport closed mid-frame with {self._decoder.pending} bytes buffered",
                            self.last_recv_seq)
                    raise SessionClosedError("transport closed", self.last_recv_seq)
                for message in self._decoder.feed(chunk):
                    seq = message.header.seq
                    if self.last_recv_seq is not None and seq <= self.last_recv_seq:
                        raise FrameInvariantError(f"received seq {seq} after {self.last_recv_seq}")
                    self.last_recv_seq = seq
                    self._queues[message.msg_type].append(message)

    def _pop(self, msg_type: Optional[int]) -> Optional[Message]:
        if msg_type is not None:
            q = self._queues[msg_type]
            return q.popleft() if q else None
        # arrival order across types is preserved by seq
        candidates = [q[0] for q in self._queues.values() if q]
        if not candidates:
            return None
        first = min(candidates, key=lambda m: m.header.seq)
        return self._queues[first.msg_type].popleft()

    def close(self):
        with self._send_lock:
            if not self.closed:
                self.closed = True
                self.transport.close()


def stream_session(transport, role: str, max_size: Optional[int] = None) -> StreamSession:
    return StreamSession(transport, role, max_size)
