"""Bit-exact model serialization and the sequential hand-off channel.

Wire layout (little-endian throughout):

    magic            4 bytes  b"FWT1"
    format_version   u16
    arch_hash        u64      hash of the layer-spec sequence
    global_epoch     u32
    origin           u16      institution index of the sender
    opt_flag         u8       0 = no optimizer state, 1 = sgd-momentum, 2 = adam
    payload          per tensor: rows u32, cols u32, then rows*cols f64
    crc              u32      CRC-32 (IEEE) of all preceding bytes

Socket transfers are length-prefixed frames (u64 length, then the packet),
acknowledged with a single status byte before the sender proceeds. The same
byte layout is written to disk as ``.fwt`` checkpoint files.
"""
from __future__ import annotations

import hashlib
import socket
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .nn import HEAD_KINDS, ModelState, fresh_opt_state, validate_specs

MAGIC = b"FWT1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQIHB")
_SHAPE = struct.Struct("<II")
_OPT_FLAGS = {None: 0, "sgd-momentum": 1, "adam": 2}
_OPT_KINDS = {v: k for k, v in _OPT_FLAGS.items()}
_OPT_BUFFERS = {"sgd-momentum": ("v",), "adam": ("m", "v")}


class TransportError(Exception):
    pass


class FormatError(TransportError):
    pass


class CorruptionError(TransportError):
    pass


class ArchitectureMismatchError(TransportError):
    pass


class TruncationError(TransportError):
    pass


class TransferFailedError(TransportError):
    pass


@dataclass(frozen=True)
class PacketMeta:
    format_version: int
    arch_hash: int
    global_epoch: int
    origin: int
    opt_kind: str | None
    payload_tensors: int


def arch_hash(specs) -> int:
    text = ";".join(
        f"{s.kind}:{s.in_dim}:{s.out_dim}:{s.dropout_rate!r}" for s in specs)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _tensor_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8")
    if a.ndim == 1:
        a = a.reshape(1, -1)
    return _SHAPE.pack(a.shape[0], a.shape[1]) + a.tobytes()


def _model_tensors(model: ModelState, carry_opt_state: bool):
    """Canonical tensor order: params, batch-norm running stats, optimizer."""
    for i, name, w in model.param_items():
        yield w
    for spec, run in zip(model.specs, model.bn_running):
        if spec.kind == "batchnorm":
            yield run["mean"]
            yield run["var"]
    if carry_opt_state:
        kind = model.opt_state["kind"]
        yield np.array([[float(model.opt_state["step"])]])
        for i, name, _ in model.param_items():
            bufs = model.opt_state["slots"][i][name]
            for bname in _OPT_BUFFERS[kind]:
                yield bufs[bname]


def serialize(model: ModelState, *, global_epoch: int = 0, origin: int = 0,
              carry_opt_state: bool = True) -> bytes:
    opt_kind = model.opt_state["kind"] if carry_opt_state else None
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, arch_hash(model.specs),
                           global_epoch, origin, _OPT_FLAGS[opt_kind])]
    for tensor in _model_tensors(model, carry_opt_state):
        if not np.all(np.isfinite(tensor)):
            raise ValueError("refusing to serialize non-finite parameters")
        chunks.append(_tensor_bytes(tensor))
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _read_tensor(data: bytes, offset: int):
    if offset + _SHAPE.size > len(data):
        raise TruncationError("packet ends inside a tensor header")
    rows, cols = _SHAPE.unpack_from(data, offset)
    offset += _SHAPE.size
    nbytes = rows * cols * 8
    if offset + nbytes > len(data):
        raise TruncationError("packet ends inside tensor data")
    arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
    return arr.reshape(rows, cols).astype(np.float64), offset + nbytes


def read_meta(data: bytes) -> PacketMeta:
    """Parse and verify the header + CRC without reconstructing a model."""
    if len(data) < _HEADER.size + 4:
        raise TruncationError("packet shorter than header + checksum")
    magic, version, ahash, epoch, origin, opt_flag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if opt_flag not in _OPT_KINDS:
        raise FormatError(f"unknown optimizer flag {opt_flag}")
    # Walk the tensor table before the CRC so a cut-off stream reports as
    # truncation rather than a checksum mismatch.
    offset, count = _HEADER.size, 0
    while offset < len(data) - 4:
        _, offset = _read_tensor(data, offset)
        count += 1
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError("CRC-32 mismatch")
    return PacketMeta(version, ahash, epoch, origin, _OPT_KINDS[opt_flag], count)


def deserialize(data: bytes, specs) -> tuple[ModelState, PacketMeta]:
    """Rebuild a ModelState; the receiver's specs gate architecture."""
    specs = validate_specs(specs)
    meta = read_meta(data)
    if meta.arch_hash != arch_hash(specs):
        raise ArchitectureMismatchError(
            "packet architecture hash does not match receiver layer specs")

    offset = _HEADER.size
    end = len(data) - 4

    def take(shape):
        nonlocal offset
        arr, offset = _read_tensor(data, offset)
        if arr.shape != shape:
            raise FormatError(f"tensor shape {arr.shape} != expected {shape}")
        return arr

    params, bn_running = [], []
    for spec in specs:
        if spec.kind in ("affine",) + HEAD_KINDS:
            params.append({"W": take((spec.in_dim, spec.out_dim)),
                           "b": take((1, spec.out_dim))})
        elif spec.kind == "batchnorm":
            params.append({"gamma": take((1, spec.out_dim)),
                           "beta": take((1, spec.out_dim))})
        else:
            params.append({})
        bn_running.append({})
    for spec, run in zip(specs, bn_running):
        if spec.kind == "batchnorm":
            run["mean"] = take((1, spec.out_dim))
            run["var"] = take((1, spec.out_dim))
            if np.any(run["var"] <= 0):
                raise FormatError("non-positive running variance")

    model = ModelState(specs=specs, params=params, bn_running=bn_running,
                       opt_state={"kind": None, "step": 0, "slots": []}, mode="train")
    if meta.opt_kind is not None:
        step = take((1, 1))
        opt = fresh_opt_state(meta.opt_kind, params)
        opt["step"] = int(step[0, 0])
        for i, name, w in model.param_items():
            for bname in _OPT_BUFFERS[meta.opt_kind]:
                buf = take(w.shape)
                opt["slots"][i][name][bname] = buf
        model.opt_state = opt
    if offset != end:
        raise FormatError("trailing bytes after expected payload")
    for tensor in _model_tensors(model, meta.opt_kind is not None):
        if not np.all(np.isfinite(tensor)):
            raise CorruptionError("non-finite value in payload")
    return model, meta


def write_packet(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def read_packet(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# --- channels -------------------------------------------------------------

_LEN = struct.Struct("<Q")
ACK_OK = b"\x00"


def send_frame(sock: socket.socket, data: bytes) -> None:
    """Length-prefixed send; blocks until the receiver acknowledges."""
    try:
        sock.sendall(_LEN.pack(len(data)) + data)
        status = _recv_exact(sock, 1)
    except (OSError, TruncationError) as exc:
        raise TransferFailedError(f"send failed: {exc}") from exc
    if status != ACK_OK:
        raise TransferFailedError(f"receiver reported status {status!r}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TruncationError(f"connection closed after {len(buf)}/{n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    data = _recv_exact(sock, length)
    sock.sendall(ACK_OK)
    return data


@dataclass(frozen=True)
class TransferRecord:
    index: int
    origin: int
    destination: int
    global_epoch: int
    nbytes: int


class MemoryChannel:
    """In-process hand-off by value."""

    def __init__(self):
        self.log = []

    def handoff(self, data: bytes, *, origin: int, destination: int,
                global_epoch: int) -> bytes:
        self.log.append(TransferRecord(len(self.log), origin, destination,
                                       global_epoch, len(data)))
        return bytes(data)

    def close(self):
        pass


class SocketChannel:
    """Hand-off over a loopback TCP connection.

    A courier thread accepts one connection and returns each frame it
    receives, so every transfer crosses a real socket in both directions.
    """

    def __init__(self):
        self.log = []
        self._server = socket.create_server(("127.0.0.1", 0))
        port = self._server.getsockname()[1]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        self._sock = socket.create_connection(("127.0.0.1", port))

    def _serve(self):
        conn, _ = self._server.accept()
        with conn:
            while True:
                try:
                    data = recv_frame(conn)
                except (TruncationError, OSError):
                    return
                try:
                    send_frame(conn, data)
                except TransferFailedError:
                    return

    def handoff(self, data: bytes, *, origin: int, destination: int,
                global_epoch: int) -> bytes:
        send_frame(self._sock, data)
        back = recv_frame(self._sock)
        if back != data:
            raise CorruptionError("loopback frame mismatch")
        self.log.append(TransferRecord(len(self.log), origin, destination,
                                       global_epoch, len(data)))
        return back

    def close(self):
        try:
            self._sock.close()
        finally:
            self._server.close()
        self._thread.join(timeout=5)


def make_channel(kind: str):
    if kind == "memory":
        return MemoryChannel()
    if kind == "socket":
        return SocketChannel()
    raise ValueError(f"unknown transport {kind!r}")
