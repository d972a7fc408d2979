"""Carriers for wire messages: an in-process loopback and a TCP stream.

Both sides of either carrier encode every message to its exact frame bytes,
count them, and optionally record them in a trace, so a session over
loopback and over sockets produces identical byte streams.
"""
from __future__ import annotations

import logging
import socket
import threading
from collections import deque

from . import protocol
from .protocol import RECEIVED, SENT, ByteCounter, ErrorCode, ErrorFrame, FrameDecoder, ProtocolError

log = logging.getLogger(__name__)


class ConnectionLost(ProtocolError):
    def __init__(self, message: str = ""):
        super().__init__(ErrorCode.CONNECTION_LOST, message)


class Endpoint:
    """One side of a connection. Blocking ``send``/``recv`` of whole messages."""

    def __init__(self, role: str = "client", record: bool = False):
        self.role = role
        self.counter = ByteCounter()
        self.trace: list[tuple[str, bytes]] | None = [] if record else None
        self.closed = False

    def send(self, msg) -> None:
        if self.closed:
            raise ConnectionLost("send on closed endpoint")
        frame = protocol.encode(msg)
        self._write(frame)
        protocol.account(self.counter, msg, SENT, len(frame))
        if self.trace is not None:
            self.trace.append((SENT, frame))

    def recv(self):
        if self.closed:
            raise ConnectionLost("recv on closed endpoint")
        frame = self._read_frame()
        msg = protocol.decode(frame)
        protocol.account(self.counter, msg, RECEIVED, len(frame))
        if self.trace is not None:
            self.trace.append((RECEIVED, frame))
        return msg

    def request(self, msg):
        """Send ``msg`` and wait for the reply; error replies are raised."""
        self.send(msg)
        reply = self.recv()
        if isinstance(reply, ErrorFrame):
            if reply.code == ErrorCode.CONNECTION_LOST:
                raise ConnectionLost(reply.message)
            known = reply.code in ErrorCode._value2member_map_
            raise ProtocolError(ErrorCode(reply.code) if known else ErrorCode.MALFORMED,
                                reply.message if known else f"code {reply.code}: {reply.message}")
        return reply

    def close(self) -> None:
        self.closed = True

    def _write(self, frame: bytes) -> None:
        raise NotImplementedError

    def _read_frame(self) -> bytes:
        raise NotImplementedError


class LoopbackEndpoint(Endpoint):
    def __init__(self, role="client", record=False):
        super().__init__(role, record)
        self.inbox: deque[bytes] = deque()
        self.peer: LoopbackEndpoint | None = None
        self.on_deliver = None

    def _write(self, frame):
        peer = self.peer
        if peer is None or peer.closed:
            raise ConnectionLost("loopback peer closed")
        peer.inbox.append(frame)
        if peer.on_deliver is not None:
            peer.on_deliver(peer)

    def _read_frame(self):
        if not self.inbox:
            raise ConnectionLost("recv on empty loopback inbox (peer sent nothing)")
        return self.inbox.popleft()

    def close(self):
        super().close()
        if self.peer is not None:
            self.peer.closed = True


def loopback_pair(record: bool = False) -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """Two connected in-process endpoints (client side, server side)."""
    a, b = LoopbackEndpoint("client", record), LoopbackEndpoint("server", record)
    a.peer, b.peer = b, a
    return a, b


def serve_one(endpoint: Endpoint, handler) -> None:
    """Receive one message, pass it to ``handler``, send back its reply.

    Protocol errors raised by the handler travel back as an ErrorFrame.
    """
    msg = endpoint.recv()
    try:
        reply = handler(msg)
    except ProtocolError as exc:
        reply = ErrorFrame(int(exc.code), exc.message)
    endpoint.send(reply)


def connect_loopback(handler, record: bool = False) -> LoopbackEndpoint:
    """Client endpoint whose server side answers synchronously through ``handler``."""
    client, server = loopback_pair(record)

    def deliver(ep):
        while ep.inbox:
            serve_one(ep, handler)

    server.on_deliver = deliver
    client.server_endpoint = server
    return client


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, role="client", record=False):
        super().__init__(role, record)
        self.sock = sock
        self._decoder_buf = bytearray()

    @classmethod
    def connect(cls, host: str, port: int, record: bool = False, timeout: float | None = 30.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, "client", record)

    def _write(self, frame):
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc

    def _read_frame(self):
        buf = self._decoder_buf
        while True:
            try:
                total = protocol.peek_frame_length(buf)
                if len(buf) >= total:
                    frame = bytes(buf[:total])
                    del buf[:total]
                    return frame
            except protocol.NeedMore:
                pass
            try:
                chunk = self.sock.recv(1 << 20)
            except OSError as exc:
                raise ConnectionLost(str(exc)) from exc
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            buf += chunk

    def close(self):
        super().close()
        try:
            self.sock.close()
        except OSError:
            pass


class SocketServer:
    """TCP server answering every frame through ``handler``.

    Each connection gets its own thread, but handler calls are serialized by
    a lock: only one client session touches the center at a time.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0, record: bool = False):
        self.handler = handler
        self.record = record
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]
        self.traces: list[list] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._workers: list[threading.Thread] = []

    def start(self) -> "SocketServer":
        self._thread.start()
        return self

    def _locked_handler(self, msg):
        with self._lock:
            return self.handler(msg)

    def _run(self):
        self.listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            ep = SocketEndpoint(conn, "server", self.record)
            if ep.trace is not None:
                self.traces.append(ep.trace)
            worker = threading.Thread(target=self._serve, args=(ep,), daemon=True)
            self._workers.append(worker)
            worker.start()

    def _serve(self, ep):
        try:
            while not self._stop.is_set():
                serve_one(ep, self._locked_handler)
        except ConnectionLost:
            pass
        except Exception:
            log.exception("server connection failed")
        finally:
            ep.close()

    def stop(self) -> None:
        self._stop.set()
        try:
            self.listener.close()
        except OSError:
            pass
        self._thread.join(timeout=5)
        for w in self._workers:
            w.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def decode_stream(data: bytes) -> tuple[list, int]:
    """Decode every complete frame in ``data``; returns (messages, leftover byte count)."""
    dec = FrameDecoder()
    msgs = dec.feed(data)
    return msgs, dec.pending
