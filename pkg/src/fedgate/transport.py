"""Length-prefixed binary protocol for parameter exchange over stream sockets.

Frame: ``b"FDG1"`` + u8 kind + u32 little-endian payload length + payload.

Payloads (all integers little-endian):

    Hello         u64 layout digest, utf-8 client id
    GlobalParams  u64 layout digest, FGT1 blob of the flat parameter vector
    TrainOrder    u32 round, u32 client index, u32 local epochs, u32 batch size,
                  f64 lr_max, f64 lr_min, f64 momentum, f64 clip norm, u64 seed,
                  utf-8 client id
    ClientUpdate  u64 layout digest, u64 n_samples, f64 mean local loss, FGT1 blob
    Metrics       utf-8 ``key=value`` lines
    Shutdown      empty
"""

import enum
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass

from . import fgt
from .errors import FedgateError, FormatError, IncompatibleModelError, ProtocolError, RoundAbortedError
from .federated import ClientUpdate, TrainOrder, fed_train, run_client
from .model import ModelParams

log = logging.getLogger(__name__)

MAGIC = b"FDG1"
HEADER = struct.Struct("<4sBI")
HEADER_SIZE = HEADER.size  # 9
DEFAULT_TIMEOUT = 300.0
DEFAULT_MAX_PAYLOAD = 1 << 28


class Kind(enum.IntEnum):
    HELLO = 1
    GLOBAL_PARAMS = 2
    TRAIN_ORDER = 3
    CLIENT_UPDATE = 4
    METRICS = 5
    SHUTDOWN = 6


@dataclass(frozen=True)
class Message:
    kind: Kind
    payload: bytes = b""


def encode(msg):
    try:
        kind = Kind(msg.kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {msg.kind}") from None
    if len(msg.payload) >= 1 << 32:
        raise ProtocolError("payload too large for a u32 length")
    return HEADER.pack(MAGIC, kind, len(msg.payload)) + bytes(msg.payload)


def _parse_header(header):
    if len(header) < 4 and MAGIC.startswith(bytes(header)):
        raise ProtocolError("truncated frame header", len(header))
    if header[:4] != MAGIC:
        raise ProtocolError(f"bad magic {bytes(header[:4])!r}", 0)
    if len(header) < HEADER_SIZE:
        raise ProtocolError("truncated frame header", len(header))
    _, kind, length = HEADER.unpack(header[:HEADER_SIZE])
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}", 4) from None
    return kind, length


def decode(data):
    """Decode exactly one frame."""
    data = bytes(data)
    kind, length = _parse_header(data)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise ProtocolError(f"truncated payload: header announces {length} bytes, {len(data) - HEADER_SIZE} present",
                            len(data))
    if len(data) > end:
        raise ProtocolError(f"{len(data) - end} trailing bytes after frame", end)
    return Message(kind, data[HEADER_SIZE:end])


# ---------------------------------------------------------------- payloads

def timeout_from_env(default=DEFAULT_TIMEOUT):
    raw = os.environ.get("FEDGATE_TIMEOUT_SECS")
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise FedgateError(f"FEDGATE_TIMEOUT_SECS must be a number, got {raw!r}") from None


def hello(client_id, digest):
    return Message(Kind.HELLO, struct.pack("<Q", digest) + client_id.encode("utf-8"))


def parse_hello(payload):
    if len(payload) < 8:
        raise ProtocolError("Hello payload shorter than its digest", HEADER_SIZE + len(payload))
    return _utf8(payload[8:], HEADER_SIZE + 8), struct.unpack_from("<Q", payload)[0]


def global_params(mp):
    return Message(Kind.GLOBAL_PARAMS, struct.pack("<Q", mp.layout_digest) + fgt.dumps(mp.values))


def parse_params_blob(payload, blob_offset, layout, expected_digest):
    """Digest is the first u64 of the payload; the FGT1 blob starts at ``blob_offset``."""
    digest = struct.unpack_from("<Q", payload, 0)[0]
    if digest != expected_digest:
        raise IncompatibleModelError(f"received digest {digest:016x}, expected {expected_digest:016x}")
    try:
        values, end = fgt.loads(payload, blob_offset)
    except FormatError as exc:
        raise ProtocolError(f"bad parameter blob: {exc}", HEADER_SIZE + blob_offset) from None
    if end != len(payload):
        raise ProtocolError("trailing bytes after parameter blob", HEADER_SIZE + end)
    if values.ndim != 1:
        raise ProtocolError("parameter blob must be a rank-1 tensor", HEADER_SIZE + blob_offset)
    try:
        return ModelParams.from_layout(layout, values)
    except FedgateError as exc:
        raise ProtocolError(f"parameter blob does not fit the layout: {exc}", HEADER_SIZE + blob_offset) from None


def parse_global_params(payload, layout, digest):
    if len(payload) < 8:
        raise ProtocolError("GlobalParams payload too short", HEADER_SIZE)
    return parse_params_blob(payload, 8, layout, digest)


_ORDER = struct.Struct("<IIIIddddQ")


def train_order(order):
    head = _ORDER.pack(order.round, order.client_index, order.local_epochs, order.batch_size,
                       order.lr_max, order.lr_min, order.momentum, order.clip_norm, order.seed)
    return Message(Kind.TRAIN_ORDER, head + order.client_id.encode("utf-8"))


def parse_train_order(payload):
    if len(payload) < _ORDER.size:
        raise ProtocolError("TrainOrder payload too short", HEADER_SIZE + len(payload))
    r, idx, epochs, bs, lr_max, lr_min, mom, clip, seed = _ORDER.unpack_from(payload)
    cid = _utf8(payload[_ORDER.size:], HEADER_SIZE + _ORDER.size)
    return TrainOrder(r, cid, idx, epochs, bs, lr_max, lr_min, mom, seed, clip)


_UPDATE = struct.Struct("<QQd")


def client_update(update):
    mp = update.params
    return Message(Kind.CLIENT_UPDATE,
                   _UPDATE.pack(mp.layout_digest, update.n_samples, update.loss) + fgt.dumps(mp.values))


def parse_client_update(payload, client_id, layout, digest):
    if len(payload) < _UPDATE.size:
        raise ProtocolError("ClientUpdate payload too short", HEADER_SIZE + len(payload))
    _, n, loss = _UPDATE.unpack_from(payload)
    if n < 1:
        raise ProtocolError("ClientUpdate reports zero samples", HEADER_SIZE + 8)
    mp = parse_params_blob(payload, _UPDATE.size, layout, digest)
    return ClientUpdate(client_id, mp, n, loss)


def metrics(mapping):
    return Message(Kind.METRICS, "".join(f"{k}={v}\n" for k, v in mapping.items()).encode("utf-8"))


def _utf8(b, offset):
    try:
        return bytes(b).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"invalid utf-8: {exc.reason}", offset + exc.start) from None


# ---------------------------------------------------------------- streams

class Connection:
    """Framed messages over a connected socket."""

    def __init__(self, sock, timeout=DEFAULT_TIMEOUT, max_payload=DEFAULT_MAX_PAYLOAD):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.max_payload = max_payload

    def _read_exact(self, n, offset):
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise ProtocolError("timed out waiting for data", offset + got) from None
            except OSError as exc:
                raise ProtocolError(f"connection error: {exc}", offset + got) from None
            if not chunk:
                raise ProtocolError("connection closed mid-frame" if got or offset else "connection closed",
                                    offset + got)
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self):
        header = self._read_exact(HEADER_SIZE, 0)
        kind, length = _parse_header(header)
        if length > self.max_payload:
            raise ProtocolError(f"payload of {length} bytes exceeds limit {self.max_payload}", 5)
        return Message(kind, self._read_exact(length, HEADER_SIZE))

    def send(self, msg):
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}") from None

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(addr):
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise FedgateError(f"address must be host:port, got {addr!r}")
    return host, int(port)


# ---------------------------------------------------------------- server

class FedServer:
    """Accepts ``expected_clients`` handshakes, then drives rounds over the sockets.

    Implements the executor interface used by :func:`fedgate.federated.fed_train`.
    """

    def __init__(self, bind_addr, arch, expected_clients, timeout=None):
        from .model import build_layout, layout_digest
        self.arch = arch
        self.layout = build_layout(arch)
        self.digest = layout_digest(self.layout)
        self.expected = expected_clients
        self.timeout = timeout_from_env() if timeout is None else timeout
        self.clients = {}
        self.rejected = []
        self._threads = []
        self._lock = threading.Lock()
        host, port = parse_address(bind_addr) if isinstance(bind_addr, str) else bind_addr
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]

    def _handshake(self, sock, peer):
        conn = Connection(sock, self.timeout)
        try:
            msg = conn.recv()
            if msg.kind != Kind.HELLO:
                raise ProtocolError(f"expected Hello, got {msg.kind.name}")
            client_id, digest = parse_hello(msg.payload)
            if digest != self.digest:
                conn.send(metrics({"error": "layout digest mismatch"}))
                raise IncompatibleModelError(f"client {client_id!r} digest {digest:016x} != {self.digest:016x}")
            with self._lock:
                if client_id in self.clients:
                    raise ProtocolError(f"duplicate client id {client_id!r}")
                self.clients[client_id] = conn
            conn.send(metrics({"accepted": client_id}))
            log.info("client %s connected from %s", client_id, peer)
        except FedgateError as exc:
            log.warning("rejected connection from %s: %s", peer, exc)
            with self._lock:
                self.rejected.append((peer, str(exc)))
            conn.close()
        except Exception as exc:  # a handler must never take the server down
            log.exception("handshake with %s failed", peer)
            with self._lock:
                self.rejected.append((peer, repr(exc)))
            conn.close()

    def wait_for_clients(self):
        """Block until ``expected_clients`` distinct clients completed the handshake.

        Each connection is handshaken on its own thread, so a silent or
        malformed peer only costs its own connection.
        """
        deadline = time.monotonic() + self.timeout
        self.listener.settimeout(0.2)
        while True:
            with self._lock:
                if len(self.clients) >= self.expected:
                    return sorted(self.clients)
            if time.monotonic() > deadline:
                raise ProtocolError(f"timed out with {len(self.clients)}/{self.expected} clients")
            try:
                sock, peer = self.listener.accept()
            except socket.timeout:
                continue
            t = threading.Thread(target=self._handshake, args=(sock, peer), daemon=True)
            t.start()
            self._threads.append(t)

    def run(self, orders, params):
        # broadcast first so clients train concurrently, then gather
        params_msg = global_params(params)
        for order in orders:
            conn = self._conn(order.client_id)
            try:
                conn.send(params_msg)
                conn.send(train_order(order))
            except ProtocolError as exc:
                raise RoundAbortedError(order.client_id, exc) from exc
        updates = []
        for order in orders:
            conn = self._conn(order.client_id)
            try:
                msg = conn.recv()
                if msg.kind != Kind.CLIENT_UPDATE:
                    raise ProtocolError(f"expected ClientUpdate, got {msg.kind.name}")
                updates.append(parse_client_update(msg.payload, order.client_id, self.layout, self.digest))
            except (ProtocolError, IncompatibleModelError) as exc:
                raise RoundAbortedError(order.client_id, exc) from exc
        return updates

    def _conn(self, client_id):
        if client_id not in self.clients:
            raise RoundAbortedError(client_id, "not connected")
        return self.clients[client_id]

    def broadcast_metrics(self, mapping):
        for conn in self.clients.values():
            try:
                conn.send(metrics(mapping))
            except ProtocolError:
                pass

    def shutdown(self):
        for conn in self.clients.values():
            try:
                conn.send(Message(Kind.SHUTDOWN))
            except ProtocolError:
                pass
            conn.close()
        self.clients.clear()
        self.listener.close()


def serve(bind_addr, cfg, arch, shards, val_set, timeout=None, on_round=None, server=None):
    """Run federated training with remote clients; returns ``(reports, final_params)``.

    Shard ``i`` is served by the client whose Hello carried ``shards[i].client_id``.
    """
    server = server or FedServer(bind_addr, arch, len(shards), timeout)
    try:
        connected = server.wait_for_clients()
        missing = {s.client_id for s in shards} - set(connected)
        if missing:
            raise ProtocolError(f"connected clients do not match partition; missing {sorted(missing)}")

        def report(rep):
            server.broadcast_metrics({"round": rep.round, "acc": rep.global_accuracy, "auc": rep.global_auc})
            if on_round:
                on_round(rep)

        return fed_train(cfg, arch, shards, val_set, executor=server, on_round=report)
    finally:
        server.shutdown()


# ---------------------------------------------------------------- client

def connect_client(addr, client_id, arch, data, timeout=None):
    """Serve training orders until Shutdown; returns the number of rounds trained."""
    from .model import build_layout, layout_digest
    layout = build_layout(arch)
    digest = layout_digest(layout)
    timeout = timeout_from_env() if timeout is None else timeout
    host, port = parse_address(addr) if isinstance(addr, str) else addr
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ProtocolError(f"cannot connect to {host}:{port}: {exc}") from None
    conn = Connection(sock, timeout)
    rounds = 0
    try:
        conn.send(hello(client_id, digest))
        pending = None
        while True:
            msg = conn.recv()
            if msg.kind == Kind.SHUTDOWN:
                return rounds
            if msg.kind == Kind.METRICS:
                text = msg.payload.decode("utf-8", "replace")
                if text.startswith("error="):
                    raise IncompatibleModelError(f"server rejected client: {text.strip()}")
                log.info("server: %s", text.strip().replace("\n", " "))
            elif msg.kind == Kind.GLOBAL_PARAMS:
                pending = parse_global_params(msg.payload, layout, digest)
            elif msg.kind == Kind.TRAIN_ORDER:
                if pending is None:
                    raise ProtocolError("TrainOrder before GlobalParams")
                order = parse_train_order(msg.payload)
                update = run_client(arch, data, pending, order)
                conn.send(client_update(update))
                pending = None
                rounds += 1
            else:
                raise ProtocolError(f"unexpected {msg.kind.name} from server")
    finally:
        conn.close()
