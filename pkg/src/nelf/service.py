"""Interactive render service: poses in, frames out, over WebSocket.

One model, one render worker. Each connection feeds a shared queue that
keeps at most one pending request per client: a newer pose replaces an
older one that has not started rendering (latest wins), because an
interactive viewer only cares about the freshest frame. The wire format
is documented in PROTOCOL.md at the repository root.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .dataset import png_bytes
from .network import Model
from .rays import CameraIntrinsics, Pose, nearest_rotation, rotation_defect
from .train import render_view
from .weights import ModelWeights, model_from_weights

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
ROTATION_TOLERANCE = 1e-3

_OP_TEXT = 0x1
_OP_BINARY = 0x2
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA


class ProtocolError(ValueError):
    pass


# frame codec ---------------------------------------------------------------


def encode_frame(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    """One unfragmented WebSocket frame; clients must mask, servers must not."""
    head = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head.append(mask_bit | n)
    elif n < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = np.random.default_rng().bytes(4)
        head += key
        masked = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return bytes(head) + masked
    return bytes(head) + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        part = sock.recv(n)
        if not part:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(part)
        n -= len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Tuple[int, bytes]:
    """Read one complete message, reassembling continuation fragments."""
    opcode = None
    payload = bytearray()
    while True:
        b0, b1 = _read_exact(sock, 2)
        fin = bool(b0 & 0x80)
        op = b0 & 0x0F
        masked = bool(b1 & 0x80)
        n = b1 & 0x7F
        if n == 126:
            (n,) = struct.unpack(">H", _read_exact(sock, 2))
        elif n == 127:
            (n,) = struct.unpack(">Q", _read_exact(sock, 8))
        key = _read_exact(sock, 4) if masked else None
        data = _read_exact(sock, n)
        if key:
            data = bytes(c ^ key[i % 4] for i, c in enumerate(data))
        if op in (_OP_CLOSE, _OP_PING, _OP_PONG):
            return op, bytes(data)  # control frames are never fragmented
        if op != 0:
            opcode = op
        payload += data
        if fin:
            if opcode is None:
                raise ProtocolError("continuation frame without a start")
            return opcode, bytes(payload)


# handshake -----------------------------------------------------------------


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def server_handshake(sock: socket.socket) -> None:
    data = b""
    while b"\r\n\r\n" not in data:
        part = sock.recv(4096)
        if not part:
            raise ConnectionError("client closed during handshake")
        data += part
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, v = line.split(b":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None:
        raise ProtocolError("not a websocket upgrade request")
    resp = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {_accept_key(key.decode())}\r\n\r\n"
    )
    sock.sendall(resp.encode())


def client_handshake(sock: socket.socket, host: str, port: int) -> None:
    key = base64.b64encode(np.random.default_rng().bytes(16)).decode()
    req = (
        f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
        "Upgrade: websocket\r\nConnection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
    )
    sock.sendall(req.encode())
    data = b""
    while b"\r\n\r\n" not in data:
        part = sock.recv(4096)
        if not part:
            raise ConnectionError("server closed during handshake")
        data += part
    if b"101" not in data.split(b"\r\n", 1)[0]:
        raise ProtocolError(f"handshake refused: {data[:100]!r}")


# request parsing -----------------------------------------------------------


@dataclass
class RenderRequest:
    id: object
    pose: Pose
    near: Optional[float]
    far: Optional[float]


def parse_request(text: str) -> RenderRequest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON: {e}") from None
    if not isinstance(raw, dict) or "pose" not in raw:
        raise ProtocolError("request must be an object with a 'pose' field")
    pose_vals = raw["pose"]
    if not isinstance(pose_vals, list) or len(pose_vals) != 12:
        raise ProtocolError("pose must be a list of 12 floats (3x4 row-major)")
    mat = np.asarray(pose_vals, dtype=np.float64).reshape(3, 4)
    if not np.all(np.isfinite(mat)):
        raise ProtocolError("pose contains non-finite values")
    defect = rotation_defect(mat[:, :3])
    if defect > ROTATION_TOLERANCE:
        raise ProtocolError(
            f"rotation is off-orthonormal by {defect:.2e}, beyond {ROTATION_TOLERANCE:g}"
        )
    fixed = np.concatenate([nearest_rotation(mat[:, :3]), mat[:, 3:]], axis=1)
    near = float(raw["near"]) if "near" in raw else None
    far = float(raw["far"]) if "far" in raw else None
    if near is not None and far is not None and not near < far:
        raise ProtocolError(f"need near < far, got {near} >= {far}")
    return RenderRequest(id=raw.get("id"), pose=Pose(fixed), near=near, far=far)


def pack_response(request_id, width: int, height: int, render_us: int, png: bytes) -> bytes:
    header = json.dumps(
        {
            "id": request_id,
            "width": width,
            "height": height,
            "render_us": render_us,
            "bytes": len(png),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return struct.pack(">I", len(header)) + header + png


def unpack_response(blob: bytes) -> Tuple[dict, bytes]:
    if len(blob) < 4:
        raise ProtocolError("response shorter than its length prefix")
    (n,) = struct.unpack(">I", blob[:4])
    if len(blob) < 4 + n:
        raise ProtocolError("response header truncated")
    header = json.loads(blob[4 : 4 + n].decode())
    png = blob[4 + n :]
    if header.get("bytes") != len(png):
        raise ProtocolError("payload length disagrees with header")
    return header, png


# service -------------------------------------------------------------------


class RenderService:
    """Accept loop + per-connection readers + one render worker."""

    def __init__(
        self,
        weights: ModelWeights,
        port: int = 0,
        host: str = "127.0.0.1",
        max_queue: int = 4,
    ):
        if max_queue < 1:
            raise ValueError("max_queue must be positive")
        ray = weights.ray or {}
        missing = {"k", "l", "near", "far", "width", "height", "focal"} - set(ray)
        if missing:
            raise ValueError(f"weights lack serving metadata: {sorted(missing)}")
        self.model: Model = model_from_weights(weights)
        self.intr = CameraIntrinsics(int(ray["width"]), int(ray["height"]), float(ray["focal"]))
        self.k, self.l = int(ray["k"]), int(ray["l"])
        self.near, self.far = float(ray["near"]), float(ray["far"])
        self.max_queue = max_queue

        self._queue: "OrderedDict[int, Tuple[socket.socket, RenderRequest]]" = OrderedDict()
        self._cv = threading.Condition()
        self._send_locks: Dict[int, threading.Lock] = {}
        self._stop = threading.Event()
        self._threads = []

        self._server = socket.create_server((host, port))
        self._server.settimeout(0.2)
        self.port = self._server.getsockname()[1]

    # -- rendering

    def render_frame(self, req: RenderRequest) -> Tuple[bytes, int, Tuple[int, int]]:
        t0 = time.perf_counter()
        near = req.near if req.near is not None else self.near
        far = req.far if req.far is not None else self.far
        img = render_view(self.model, self.intr, req.pose, near, far, self.k, self.l)
        png = png_bytes(img)
        us = int((time.perf_counter() - t0) * 1e6)
        return png, us, (img.shape[2], img.shape[1])  # (width, height)

    # -- queue

    def _enqueue(self, client_id: int, sock: socket.socket, req: RenderRequest) -> None:
        with self._cv:
            if client_id not in self._queue and len(self._queue) >= self.max_queue:
                # bounded queue: drop the oldest unstarted request
                self._queue.popitem(last=False)
            self._queue[client_id] = (sock, req)  # replaces any unstarted one
            self._cv.notify()

    def _worker(self) -> None:
        while not self._stop.is_set():
            with self._cv:
                while not self._queue and not self._stop.is_set():
                    self._cv.wait(timeout=0.2)
                if self._stop.is_set():
                    return
                client_id, (sock, req) = next(iter(self._queue.items()))
                del self._queue[client_id]
            try:
                png, us, (w, h) = self.render_frame(req)
                blob = pack_response(req.id, w, h, us, png)
                self._send(client_id, sock, encode_frame(_OP_BINARY, blob))
            except (ConnectionError, OSError):
                pass  # client went away; nothing to do

    def _send(self, client_id: int, sock: socket.socket, frame: bytes) -> None:
        lock = self._send_locks.setdefault(client_id, threading.Lock())
        with lock:
            sock.sendall(frame)

    # -- connections

    def _error_payload(self, message: str, request_id=None) -> bytes:
        return encode_frame(
            _OP_TEXT, json.dumps({"error": message, "id": request_id}).encode()
        )

    def _reader(self, sock: socket.socket, client_id: int) -> None:
        try:
            server_handshake(sock)
            while not self._stop.is_set():
                opcode, payload = read_frame(sock)
                if opcode == _OP_CLOSE:
                    self._send(client_id, sock, encode_frame(_OP_CLOSE, payload[:2]))
                    break
                if opcode == _OP_PING:
                    self._send(client_id, sock, encode_frame(_OP_PONG, payload))
                    continue
                if opcode != _OP_TEXT:
                    self._send(client_id, sock, self._error_payload("expected a text request"))
                    continue
                try:
                    req = parse_request(payload.decode("utf-8"))
                except (ProtocolError, UnicodeDecodeError) as e:
                    self._send(client_id, sock, self._error_payload(str(e)))
                    continue  # connection stays open
                self._enqueue(client_id, sock, req)
        except (ConnectionError, OSError, ProtocolError):
            pass
        finally:
            with self._cv:
                self._queue.pop(client_id, None)
            self._send_locks.pop(client_id, None)
            try:
                sock.close()
            except OSError:
                pass

    def run_forever(self) -> None:
        worker = threading.Thread(target=self._worker, daemon=True)
        worker.start()
        self._threads.append(worker)
        next_id = 0
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._server.accept()
                except socket.timeout:
                    continue
                t = threading.Thread(
                    target=self._reader, args=(conn, next_id), daemon=True
                )
                next_id += 1
                t.start()
                self._threads.append(t)
        finally:
            self._server.close()

    def start(self) -> threading.Thread:
        """Run the accept loop on a background thread (for tests)."""
        t = threading.Thread(target=self.run_forever, daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()
        with self._cv:
            self._cv.notify_all()


class ServiceClient:
    """Minimal blocking client for tests and scripts."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        client_handshake(self.sock, host, port)

    def send_text(self, text: str) -> None:
        self.sock.sendall(encode_frame(_OP_TEXT, text.encode(), mask=True))

    def request(self, request_id, pose: Pose, near=None, far=None) -> None:
        body = {"id": request_id, "pose": [float(v) for v in pose.matrix.reshape(-1)]}
        if near is not None:
            body["near"] = near
        if far is not None:
            body["far"] = far
        self.send_text(json.dumps(body))

    def recv_message(self) -> Tuple[str, object]:
        """Returns ("frame", (header, png)) or ("error", dict)."""
        opcode, payload = read_frame(self.sock)
        if opcode == _OP_BINARY:
            return "frame", unpack_response(payload)
        if opcode == _OP_TEXT:
            return "error", json.loads(payload.decode())
        if opcode == _OP_CLOSE:
            raise ConnectionError("server closed the connection")
        raise ProtocolError(f"unexpected opcode {opcode}")

    def close(self) -> None:
        try:
            self.sock.sendall(encode_frame(_OP_CLOSE, b"", mask=True))
        except OSError:
            pass
        self.sock.close()
