"""Wire format and socket runtimes for the two-party protocol.

Frame layout, all little-endian::

    magic "SLP1" | msg_type u8 | session_id u64 | inference_id u64
    | layer_id u32 | path u8 | payload_len u32 | payload (u64 words)

Vectors travel as flat residues; the receiving state machine restores the
token dimension from the topology.  A session is one TCP connection: David
opens it with ``SetupParams``, Charlie echoes its own parameters, then the
same handlers used by the in-memory driver exchange frames until David
closes the socket.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import protocol as P
from .errors import (
    ConnectionClosed,
    MalformedFrame,
    ProtocolError,
    SessionAborted,
    SlipError,
    Timeout,
    TopologyMismatch,
    VersionMismatch,
)
from .ring import FixedVec, RingParams

log = logging.getLogger(__name__)

MAGIC = b"SLP1"
HEADER = struct.Struct("<4sBQQIBI")
HEADER_SIZE = HEADER.size  # 30
DEFAULT_MAX_FRAME = 64 << 20

MSG_TYPES = {
    P.SetupParams: 1,
    P.InferenceInput: 2,
    P.MaskedActivation: 3,
    P.MaskedPartial: 4,
    P.PlainActivation: 5,
    P.InferenceOutput: 6,
    P.Abort: 7,
}
MSG_CLASSES = {v: k for k, v in MSG_TYPES.items()}

KIND_CODES = {"mlp": 0, "attention_head": 1, "conv": 2}
ACT_CODES = {"identity": 0, "relu": 1, "softmax": 2}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_ACT_NAMES = {v: k for k, v in ACT_CODES.items()}

# Abort reason codes
ABORT_ERROR = 1
ABORT_VERSION = 2
ABORT_TOPOLOGY = 3
ABORT_SESSION_REUSED = 4


# ---------------------------------------------------------------- frames


def _setup_words(msg: P.SetupParams):
    words = [msg.version, msg.ring.modulus, msg.ring.scale, KIND_CODES[msg.topology.kind], len(msg.topology)]
    for spec in msg.topology.layers:
        words += [spec.rows, spec.cols, int(spec.split), ACT_CODES[spec.activation]]
    return np.array(words, dtype="<u8")


def encode_frame(msg, session_id: int = 0) -> bytes:
    """Serialize one protocol message; ``decode_frame`` inverts it byte for byte."""
    msg_type = MSG_TYPES.get(type(msg))
    if msg_type is None:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    if isinstance(msg, P.SetupParams):
        payload = _setup_words(msg)
    elif isinstance(msg, P.Abort):
        payload = np.array([msg.reason], dtype="<u8")
    else:
        payload = np.ascontiguousarray(msg.vec.values.reshape(-1), dtype="<u8")
    data = payload.tobytes()
    header = HEADER.pack(MAGIC, msg_type, session_id, msg.inference_id,
                         getattr(msg, "layer_id", 0), int(getattr(msg, "path", 0)), len(data))
    return header + data


def _decode_setup(words, iid):
    try:
        version, modulus, scale, kind, count = (int(w) for w in words[:5])
        if len(words) != 5 + 4 * count:
            raise MalformedFrame("setup payload length does not match its layer count")
        layers = tuple(
            P.LayerSpec(int(r), int(c), bool(s), _ACT_NAMES[int(a)])
            for r, c, s, a in words[5:].reshape(count, 4)
            if s in (0, 1)
        )
        if len(layers) != count:
            raise MalformedFrame("setup split flag must be 0 or 1")
        return P.SetupParams(RingParams(modulus, scale), P.Topology(_KIND_NAMES[kind], layers), version, iid)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, MalformedFrame):
            raise
        raise MalformedFrame(f"bad setup payload: {exc}") from exc


def parse_frame(data, modulus: int | None, max_frame_bytes: int = DEFAULT_MAX_FRAME):
    """Decode the frame at the start of ``data``.

    Returns ``(session_id, message, frame_length)``.  ``modulus`` is needed
    for every frame except ``SetupParams`` and is used to reject residues
    outside ``[0, L)``.
    """
    if len(data) < HEADER_SIZE:
        raise MalformedFrame(f"truncated header ({len(data)} bytes)")
    magic, msg_type, session_id, iid, layer_id, path, plen = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    cls = MSG_CLASSES.get(msg_type)
    if cls is None:
        raise MalformedFrame(f"unknown message type {msg_type}")
    if plen % 8:
        raise MalformedFrame(f"payload length {plen} is not a multiple of 8")
    if HEADER_SIZE + plen > max_frame_bytes:
        raise MalformedFrame(f"frame of {HEADER_SIZE + plen} bytes exceeds the {max_frame_bytes} byte limit")
    end = HEADER_SIZE + plen
    if len(data) < end:
        raise MalformedFrame(f"truncated payload: need {plen} bytes, have {len(data) - HEADER_SIZE}")
    words = np.frombuffer(bytes(data[HEADER_SIZE:end]), dtype="<u8")
    if cls is P.SetupParams:
        if words.size < 5:
            raise MalformedFrame("setup payload too short")
        return session_id, _decode_setup(words, iid), end
    if cls is P.Abort:
        if words.size != 1:
            raise MalformedFrame("abort payload must hold exactly one word")
        return session_id, P.Abort(iid, int(words[0])), end
    if modulus is None:
        raise MalformedFrame("vector frame received before the session ring is known")
    if words.size and int(words.max()) >= modulus:
        raise MalformedFrame(f"residue {int(words.max())} is not below L={modulus}")
    scale = 2 if cls is P.MaskedPartial else 1
    vec = FixedVec(words.astype(np.int64), modulus, scale)
    if cls in (P.MaskedActivation, P.MaskedPartial):
        try:
            p = P.Path(path)
        except ValueError:
            raise MalformedFrame(f"unknown path {path}") from None
        return session_id, cls(iid, layer_id, p, vec), end
    if path:
        raise MalformedFrame(f"path {path} on a frame that has none")
    if cls is P.PlainActivation:
        return session_id, cls(iid, layer_id, vec), end
    return session_id, cls(iid, vec), end


def decode_frame(data, modulus: int | None = None, max_frame_bytes: int = DEFAULT_MAX_FRAME):
    """Decode exactly one frame; trailing bytes are an error."""
    _, msg, end = parse_frame(data, modulus, max_frame_bytes)
    if end != len(data):
        raise MalformedFrame(f"{len(data) - end} trailing bytes after frame")
    return msg


def split_frames(data, modulus, max_frame_bytes=DEFAULT_MAX_FRAME):
    """Decode a concatenation of frames."""
    out, pos = [], 0
    view = memoryview(bytes(data))
    while pos < len(view):
        _, msg, end = parse_frame(view[pos:], modulus, max_frame_bytes)
        out.append(msg)
        pos += end
    return out


def transcript_frames(transcript: P.Transcript, session_id: int = 0):
    """``(direction, frame bytes)`` for every message of an in-memory run."""
    return [(d, encode_frame(m, session_id)) for d, m in transcript.entries]


# ---------------------------------------------------------------- streams


@dataclass
class EndpointConfig:
    role: str = "david"
    address: tuple = ("127.0.0.1", 0)
    max_frame_bytes: int = DEFAULT_MAX_FRAME
    session_timeout: float = 30.0
    session_id: int = 0
    version: int = P.PROTOCOL_VERSION

    def __post_init__(self):
        if self.role not in ("charlie", "david"):
            raise ValueError(f"role must be charlie or david, got {self.role!r}")
        if isinstance(self.address, str):
            host, _, port = self.address.rpartition(":")
            self.address = (host or "127.0.0.1", int(port))

    def check_topology(self, topology: P.Topology):
        widest = max(max(s.rows, s.cols) for s in topology.layers)
        if self.max_frame_bytes < HEADER_SIZE + 8 * widest:
            raise ValueError(f"max_frame_bytes {self.max_frame_bytes} cannot carry a {widest}-wide vector")


class FrameStream:
    """Reads and writes whole frames on a connected socket."""

    def __init__(self, sock, max_frame_bytes=DEFAULT_MAX_FRAME, timeout=None):
        self.sock = sock
        self.max_frame_bytes = max_frame_bytes
        if timeout is not None:
            sock.settimeout(timeout)

    def _recv_exact(self, n):
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except socket.timeout:
                raise Timeout("peer did not answer in time") from None
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def read_frame(self) -> bytes:
        header = self._recv_exact(HEADER_SIZE)
        (plen,) = struct.unpack_from("<I", header, HEADER_SIZE - 4)
        if HEADER_SIZE + plen > self.max_frame_bytes:
            raise MalformedFrame(f"announced frame of {HEADER_SIZE + plen} bytes exceeds the limit")
        return header + self._recv_exact(plen)

    def write_frame(self, frame: bytes):
        try:
            self.sock.sendall(frame)
        except socket.timeout:
            raise Timeout("send timed out") from None
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc


# ---------------------------------------------------------------- Charlie side


class CharlieSession:
    """Frame-level wrapper around a :class:`~slip.protocol.CharlieState`.

    ``feed`` never lets a protocol error escape: a bad frame burns the pads
    of the inference in flight and answers with an ``Abort`` frame.
    """

    def __init__(self, state: P.CharlieState, session_id: int, max_frame_bytes=DEFAULT_MAX_FRAME):
        self.state = state
        self.session_id = session_id
        self.max_frame_bytes = max_frame_bytes
        self.current = None
        self.ready = False
        self.closed = False

    def _abort(self, reason=ABORT_ERROR):
        iid = self.current if self.current is not None else 0
        if self.current is not None:
            self.state.abort(self.current)
            self.current = None
        return [encode_frame(P.Abort(iid, reason), self.session_id)]

    def setup_reply(self, msg: P.SetupParams):
        if msg.version != P.PROTOCOL_VERSION:
            self.closed = True
            return [encode_frame(P.Abort(0, ABORT_VERSION), self.session_id)]
        if msg.ring != self.state.ring or msg.topology != self.state.topology:
            self.closed = True
            return [encode_frame(P.Abort(0, ABORT_TOPOLOGY), self.session_id)]
        self.ready = True
        return [encode_frame(P.SetupParams(self.state.ring, self.state.topology), self.session_id)]

    def feed(self, frame: bytes):
        try:
            modulus = self.state.ring.modulus if self.ready else None
            session_id, msg, end = parse_frame(frame, modulus, self.max_frame_bytes)
            if end != len(frame):
                raise MalformedFrame("trailing bytes after frame")
            if isinstance(msg, P.SetupParams):
                if self.ready:
                    raise ProtocolError("duplicate setup")
                return self.setup_reply(msg)
            if not self.ready:
                raise ProtocolError("frame before setup")
            if session_id != self.session_id:
                raise ProtocolError(f"frame for session {session_id} on session {self.session_id}")
            if isinstance(msg, P.InferenceInput):
                self.current = msg.inference_id
            elif self.current is not None and msg.inference_id != self.current:
                raise ProtocolError("frame for an inference that is not in flight")
            replies = self.state.handle(msg)
            if any(isinstance(r, P.InferenceOutput) for r in replies) or isinstance(msg, P.Abort):
                self.current = None
            return [encode_frame(r, self.session_id) for r in replies]
        except (SlipError, OverflowError) as exc:
            log.info("session %d: aborting after %s: %s", self.session_id, type(exc).__name__, exc)
            return self._abort()

    def connection_lost(self):
        """Burn the pads of an inference cut off by a dropped connection."""
        if self.current is not None:
            self.state.abort(self.current)
            self.current = None
        self.closed = True


class CharlieServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; one :class:`CharlieSession` per connection.

    ``state_factory(session_id)`` builds a fresh Charlie state with its own
    pad stream.  A session id may be served only once so no stream, and
    hence no pad, is ever replayed.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: EndpointConfig, state_factory):
        self.config = config
        self.state_factory = state_factory
        self.sessions = {}
        self._lock = threading.Lock()
        super().__init__(config.address, _CharlieHandler)

    @property
    def address(self):
        return self.server_address[:2]

    def claim_session(self, session_id):
        with self._lock:
            if session_id in self.sessions:
                return None
            session = CharlieSession(self.state_factory(session_id), session_id, self.config.max_frame_bytes)
            self.sessions[session_id] = session
            return session

    def start(self):
        thread = threading.Thread(target=self.serve_forever, name="charlie-server", daemon=True)
        thread.start()
        return thread

    def stop(self):
        self.shutdown()
        self.server_close()


class _CharlieHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: CharlieServer = self.server
        stream = FrameStream(self.request, server.config.max_frame_bytes, server.config.session_timeout)
        session = None
        try:
            first = stream.read_frame()
            try:
                session_id, msg, _ = parse_frame(first, None, server.config.max_frame_bytes)
            except MalformedFrame:
                stream.write_frame(encode_frame(P.Abort(0, ABORT_ERROR)))
                return
            if not isinstance(msg, P.SetupParams):
                stream.write_frame(encode_frame(P.Abort(0, ABORT_ERROR), session_id))
                return
            session = server.claim_session(session_id)
            if session is None:
                stream.write_frame(encode_frame(P.Abort(0, ABORT_SESSION_REUSED), session_id))
                return
            for reply in session.feed(first):
                stream.write_frame(reply)
            while not session.closed:
                for reply in session.feed(stream.read_frame()):
                    stream.write_frame(reply)
        except (ConnectionClosed, Timeout, MalformedFrame) as exc:
            log.info("connection ended: %s", exc)
        finally:
            if session is not None:
                session.connection_lost()


def serve_charlie(config: EndpointConfig, state_factory, background=True) -> CharlieServer:
    """Start Charlie's server.  ``state_factory`` may also be a ready
    :class:`CharlieState`, which then serves a single session."""
    if isinstance(state_factory, P.CharlieState):
        state = state_factory
        state_factory = lambda _sid: state  # noqa: E731
    server = CharlieServer(config, state_factory)
    if background:
        server.start()
    else:
        server.serve_forever()
    return server


# ---------------------------------------------------------------- David side


class DavidClient:
    """David's end of one session; records every frame sent and received."""

    def __init__(self, config: EndpointConfig, david: P.DavidState):
        self.config = config
        self.david = david
        self.session_id = config.session_id
        self.frames = []
        config.check_topology(david.topology)
        sock = socket.create_connection(config.address, timeout=config.session_timeout)
        self.stream = FrameStream(sock, config.max_frame_bytes, config.session_timeout)
        self._handshake()

    def _handshake(self):
        setup = P.SetupParams(self.david.ring, self.david.topology, self.config.version)
        self.stream.write_frame(encode_frame(setup, self.session_id))
        _, reply, _ = parse_frame(self.stream.read_frame(), None, self.config.max_frame_bytes)
        if isinstance(reply, P.Abort):
            self.close()
            if reply.reason == ABORT_VERSION:
                raise VersionMismatch(f"Charlie rejected protocol version {self.config.version}")
            if reply.reason == ABORT_TOPOLOGY:
                raise TopologyMismatch("Charlie holds a different ring or topology")
            if reply.reason == ABORT_SESSION_REUSED:
                raise SessionAborted(f"session id {self.session_id} was already used")
            raise SessionAborted("Charlie refused the session")
        if not isinstance(reply, P.SetupParams):
            raise ProtocolError("expected SetupParams in reply")
        if reply.version != P.PROTOCOL_VERSION:
            raise VersionMismatch(f"Charlie speaks protocol version {reply.version}")
        if reply.ring != self.david.ring or reply.topology != self.david.topology:
            raise TopologyMismatch("Charlie holds a different ring or topology")

    def _send(self, msg):
        frame = encode_frame(msg, self.session_id)
        self.frames.append((P.D2C, frame))
        self.stream.write_frame(frame)

    def _recv(self):
        frame = self.stream.read_frame()
        self.frames.append((P.C2D, frame))
        _, msg, _ = parse_frame(frame, self.david.ring.modulus, self.config.max_frame_bytes)
        return msg

    def infer(self, x, inference_id=None) -> FixedVec:
        """Run one inference over the socket and return the output."""
        outgoing = list(self.david.start(x, inference_id))
        iid = outgoing[0].inference_id
        while True:
            for msg in outgoing:
                self._send(msg)
            if iid in self.david.outputs:
                return self.david.outputs[iid]
            msg = self._recv()
            if isinstance(msg, P.Abort):
                raise SessionAborted(f"Charlie aborted inference {iid}")
            outgoing = self.david.handle(msg)

    def close(self):
        try:
            self.stream.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def david_request_inference(config: EndpointConfig, david: P.DavidState, x, inference_id=None) -> FixedVec:
    """Open a session, run one inference, close the session."""
    with DavidClient(config, david) as client:
        return client.infer(x, inference_id)


# ---------------------------------------------------------------- transcript files
#
#   SetupParams frame | (direction u8 | frame)*     direction 0 = D->C, 1 = C->D


def write_transcript(path, transcript: P.Transcript, params: RingParams, topology: P.Topology, session_id=0):
    with open(path, "wb") as fh:
        fh.write(encode_frame(P.SetupParams(params, topology), session_id))
        for direction, msg in transcript.entries:
            fh.write(bytes([0 if direction == P.D2C else 1]))
            fh.write(encode_frame(msg, session_id))


def read_transcript(path):
    """``(SetupParams, Transcript)`` from a file written by :func:`write_transcript`."""
    with open(path, "rb") as fh:
        data = fh.read()
    _, setup, pos = parse_frame(data, None)
    if not isinstance(setup, P.SetupParams):
        raise MalformedFrame(f"{path}: transcript must start with SetupParams")
    transcript = P.Transcript()
    while pos < len(data):
        if data[pos] not in (0, 1):
            raise MalformedFrame(f"{path}: bad direction byte at offset {pos}")
        direction = P.D2C if data[pos] == 0 else P.C2D
        _, msg, n = parse_frame(memoryview(data)[pos + 1:], setup.ring.modulus)
        transcript.append(direction, msg)
        pos += 1 + n
    if transcript.entries:
        transcript.inference_id = transcript.entries[0][1].inference_id
    return setup, transcript
