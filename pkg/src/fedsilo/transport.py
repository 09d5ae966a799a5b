"""Round messages, their binary wire format, and an in-process synchronous channel.

Wire layout (all integers little-endian)::

    magic    4s   b"FLAM"
    version  u16
    kind     u8    0 = GlobalModel, 1 = LocalUpdate
    epoch    u32
    round    u32
    client   u32   0xFFFFFFFF for GlobalModel
    nblocks  u32
    nblocks x { name_len u16, name utf-8, rows u32, cols u32 }
    data     f64 x sum(rows * cols), manifest order
    crc32    u32   over every preceding byte

The same layout is the checkpoint file format.
"""

from __future__ import annotations

import enum
import queue
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (BadMagicError, ClientFailure, CrcMismatchError, ProtocolError, RejectedInput,
                     SyncTimeoutError, TruncatedMessageError, UnsupportedVersionError, WireFormatError)
from .model import ParamVector

MAGIC = b"FLAM"
VERSION = 1
NO_CLIENT = 0xFFFFFFFF

_HEADER = struct.Struct("<4sHBIIII")
_NAME_LEN = struct.Struct("<H")
_SHAPE = struct.Struct("<II")
_CRC = struct.Struct("<I")

HEADER_SIZE = _HEADER.size
BLOCK_OVERHEAD = _NAME_LEN.size + _SHAPE.size
CRC_SIZE = _CRC.size


class MessageKind(enum.IntEnum):
    GLOBAL_MODEL = 0
    LOCAL_UPDATE = 1


@dataclass(frozen=True)
class RoundMessage:
    """Everything that ever crosses the client/server boundary.

    There is deliberately no field that could carry features or labels.
    """

    kind: MessageKind
    epoch: int
    round: int
    payload: ParamVector
    client_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        if self.kind is MessageKind.GLOBAL_MODEL and self.client_id is not None:
            raise RejectedInput("a GlobalModel message has no client id")
        if self.kind is MessageKind.LOCAL_UPDATE and self.client_id is None:
            raise RejectedInput("a LocalUpdate message needs a client id")
        if not isinstance(self.payload, ParamVector):
            raise RejectedInput("payload must be a ParamVector")
        for value, what in ((self.epoch, "epoch"), (self.round, "round")):
            if not 0 <= value < 2**32:
                raise RejectedInput(f"{what} {value} does not fit in u32")
        if self.client_id is not None and not 0 <= self.client_id < NO_CLIENT:
            raise RejectedInput(f"client id {self.client_id} out of range")

    def __eq__(self, other):
        if not isinstance(other, RoundMessage):
            return NotImplemented
        return (self.kind, self.epoch, self.round, self.client_id) == (
            other.kind, other.epoch, other.round, other.client_id) and self.payload.bit_equal(other.payload)

    __hash__ = None


def message_size(payload: ParamVector) -> int:
    """Closed-form byte length of any message carrying ``payload``."""
    names = sum(len(name.encode("utf-8")) for name, _ in payload.manifest)
    return HEADER_SIZE + BLOCK_OVERHEAD * len(payload.manifest) + names + 8 * payload.size + CRC_SIZE


def serialize(msg: RoundMessage) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.epoch, msg.round,
                          NO_CLIENT if msg.client_id is None else msg.client_id, len(msg.payload.manifest))]
    for name, (rows, cols) in msg.payload.manifest:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise RejectedInput(f"block name too long: {name[:40]}...")
        parts += [_NAME_LEN.pack(len(raw)), raw, _SHAPE.pack(rows, cols)]
    parts.append(msg.payload.data.astype("<f8", copy=False).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _need(buf: bytes, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise TruncatedMessageError(f"input ends inside {what} (need {offset + n} bytes, have {len(buf)})")


def deserialize(buf: bytes) -> RoundMessage:
    buf = bytes(buf)
    _need(buf, 0, len(MAGIC), "magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    _need(buf, 0, HEADER_SIZE, "header")
    _, version, kind, epoch, rnd, client, nblocks = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"wire version {version} is not supported (expected {VERSION})")
    offset = HEADER_SIZE
    manifest = []
    for _ in range(nblocks):
        _need(buf, offset, _NAME_LEN.size, "manifest")
        (name_len,) = _NAME_LEN.unpack_from(buf, offset)
        offset += _NAME_LEN.size
        _need(buf, offset, name_len + _SHAPE.size, "manifest")
        raw_name = buf[offset:offset + name_len]
        offset += name_len
        shape = _SHAPE.unpack_from(buf, offset)
        offset += _SHAPE.size
        manifest.append((raw_name, shape))
    count = sum(r * c for _, (r, c) in manifest)
    _need(buf, offset, 8 * count, "data block")
    data_off = offset
    offset += 8 * count
    _need(buf, offset, CRC_SIZE, "checksum")
    if len(buf) != offset + CRC_SIZE:
        raise WireFormatError(f"{len(buf) - offset - CRC_SIZE} unexpected trailing bytes")
    (crc,) = _CRC.unpack_from(buf, offset)
    if crc != zlib.crc32(buf[:offset]):
        raise CrcMismatchError("checksum mismatch, message is corrupt")
    try:
        manifest = [(raw.decode("utf-8"), shape) for raw, shape in manifest]
        kind = MessageKind(kind)
    except (UnicodeDecodeError, ValueError) as exc:
        raise WireFormatError(f"malformed message: {exc}") from None
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=data_off).astype(np.float64)
    return RoundMessage(kind, epoch, rnd, ParamVector(manifest, data),
                        None if client == NO_CLIENT else client)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ParamVector, transforms=None, *, epoch: int = 0, round: int = 0) -> int:
    """Write a GlobalModel message, with optional ``client{i}.A``/``client{i}.b`` blocks."""
    blocks = dict(params.blocks())
    for cid, F in sorted((transforms or {}).items()):
        blocks[f"client{cid}.A"] = F.A
        blocks[f"client{cid}.b"] = F.b.reshape(1, -1)
    raw = serialize(RoundMessage(MessageKind.GLOBAL_MODEL, epoch, round, ParamVector.from_blocks(blocks)))
    Path(path).write_bytes(raw)
    return len(raw)


def load_checkpoint(path):
    """Return ``(params, transforms, message)`` from a checkpoint file."""
    from .transform import AffineTransform

    msg = deserialize(Path(path).read_bytes())
    blocks = msg.payload.blocks()
    params = ParamVector.from_blocks({k: v for k, v in blocks.items() if not k.startswith("client")})
    transforms = {}
    for name in blocks:
        if name.startswith("client") and name.endswith(".A"):
            cid = int(name[len("client"):-2])
            transforms[cid] = AffineTransform(blocks[name], blocks[f"client{cid}.b"].ravel())
    return params, transforms, msg


# --- synchronous channel -----------------------------------------------------

class InProcessChannel:
    """Broadcast/collect rendezvous between one server and ``L`` clients.

    Every payload crosses the channel as wire bytes. The server may only read
    a round's updates once all registered clients have posted exactly one.
    """

    def __init__(self, client_ids, timeout: float = 60.0):
        ids = sorted(int(c) for c in client_ids)
        if not ids:
            raise RejectedInput("a channel needs at least one client")
        if len(set(ids)) != len(ids):
            raise RejectedInput(f"duplicate client ids: {ids}")
        self.client_ids = tuple(ids)
        self.timeout = timeout
        self._inbox = {c: queue.Queue() for c in ids}
        self._uploads: dict[int, bytes] = {}
        self._current: tuple[int, int] | None = None
        self._cond = threading.Condition()
        self.bytes_up = 0
        self.bytes_down = 0
        self.broadcasts = 0
        self.uploads = 0

    # server side
    def broadcast(self, msg: RoundMessage) -> int:
        if msg.kind is not MessageKind.GLOBAL_MODEL:
            raise ProtocolError("server may only broadcast GlobalModel messages")
        raw = serialize(msg)
        with self._cond:
            self._current = (msg.epoch, msg.round)
            self._uploads = {}
        for c in self.client_ids:
            self._inbox[c].put(raw)
        sent = len(raw) * len(self.client_ids)
        self.bytes_down += sent
        self.broadcasts += len(self.client_ids)
        return sent

    def collect(self) -> tuple[dict[int, RoundMessage], int]:
        """Block until every client has uploaded; return updates keyed by client id and bytes received."""
        with self._cond:
            done = self._cond.wait_for(lambda: len(self._uploads) == len(self.client_ids), self.timeout)
            if not done:
                missing = [c for c in self.client_ids if c not in self._uploads]
                raise SyncTimeoutError(f"round {self._current}: no update from clients {missing}")
            raw = dict(self._uploads)
            self._uploads = {}
        received = sum(len(r) for r in raw.values())
        return {c: deserialize(raw[c]) for c in sorted(raw)}, received

    # client side
    def receive(self, client_id: int) -> RoundMessage:
        try:
            raw = self._inbox[client_id].get(timeout=self.timeout)
        except KeyError:
            raise ProtocolError(f"client {client_id} is not registered") from None
        except queue.Empty:
            raise SyncTimeoutError(f"client {client_id} received no global model") from None
        return deserialize(raw)

    def send(self, msg: RoundMessage) -> int:
        if msg.kind is not MessageKind.LOCAL_UPDATE:
            raise ProtocolError("clients may only send LocalUpdate messages")
        if msg.client_id not in self._inbox:
            raise ProtocolError(f"client {msg.client_id} is not registered")
        raw = serialize(msg)
        with self._cond:
            if self._current != (msg.epoch, msg.round):
                raise ProtocolError(f"update for {(msg.epoch, msg.round)} outside current round {self._current}")
            if msg.client_id in self._uploads:
                raise ProtocolError(f"duplicate update from client {msg.client_id} in round {self._current}")
            self._uploads[msg.client_id] = raw
            self.bytes_up += len(raw)
            self.uploads += 1
            self._cond.notify_all()
        return len(raw)


ClientFn = Callable[[int, RoundMessage], RoundMessage]


def channel_exchange(channel: InProcessChannel, global_msg: RoundMessage, client_fn: ClientFn,
                     max_workers: int = 1):
    """Run one synchronous round: broadcast, let every client respond, collect.

    ``client_fn(client_id, global_msg)`` runs in the client's own context and
    returns its LocalUpdate. Any client failure aborts the round. Returns
    ``(updates, bytes_up, bytes_down)`` with ``updates`` keyed by client id.
    """
    bytes_down = channel.broadcast(global_msg)

    def run(cid):
        try:
            channel.send(client_fn(cid, channel.receive(cid)))
        except ProtocolError:
            raise
        except Exception as exc:
            raise ClientFailure(cid, exc) from exc

    if max_workers > 1 and len(channel.client_ids) > 1:
        with ThreadPoolExecutor(max_workers=min(max_workers, len(channel.client_ids))) as pool:
            for fut in [pool.submit(run, c) for c in channel.client_ids]:
                fut.result()
    else:
        for c in channel.client_ids:
            run(c)
    updates, bytes_up = channel.collect()
    return updates, bytes_up, bytes_down
