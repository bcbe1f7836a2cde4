"""Coordinator <-> agent wire protocol.

Frame::

    u32   body length (big-endian), not counting these four bytes
    u8    protocol version (1)
    u8    message type
    ...   fixed-layout fields, big-endian

Message types and field layouts (struct notation after the type byte):

    1  REGISTER      B role (0 driver, 1 worker), Q declared_footprint, i requested_id (-1: none)
    2  REGISTER_ACK  I process_id, I epoch
    3  CKPT_REQUEST  Q generation
    4  QUIESCE_ACK   I process_id
    5  IMAGE_STAGED  I process_id, Q bytes, 32s sha256, d image_seconds,
                     Q precious_bytes, I precious_count, d precious_seconds
    6  COMMIT_DONE   Q generation
    7  RESUME        (empty)
    8  RESTORE       Q generation
    9  RESTORE_ACK   I process_id, 32s sha256 of the restored image
    10 ABORT         Q generation
    11 FAILED        I process_id, then UTF-8 reason to end of frame

Anything else, a wrong version, or a short body is a ``ProtocolError``.
"""

from __future__ import annotations

import select
import socket
import struct
from dataclasses import dataclass, fields
from typing import ClassVar, Iterator

from .errors import AgentUnreachable, ProtocolError

VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20


@dataclass(frozen=True)
class Register:
    TYPE: ClassVar[int] = 1
    FMT: ClassVar[str] = ">BQi"
    role: int
    declared_footprint: int = 0
    requested_id: int = -1


@dataclass(frozen=True)
class RegisterAck:
    TYPE: ClassVar[int] = 2
    FMT: ClassVar[str] = ">II"
    process_id: int
    epoch: int


@dataclass(frozen=True)
class CkptRequest:
    TYPE: ClassVar[int] = 3
    FMT: ClassVar[str] = ">Q"
    generation: int


@dataclass(frozen=True)
class QuiesceAck:
    TYPE: ClassVar[int] = 4
    FMT: ClassVar[str] = ">I"
    process_id: int


@dataclass(frozen=True)
class ImageStaged:
    TYPE: ClassVar[int] = 5
    FMT: ClassVar[str] = ">IQ32sdQId"
    process_id: int
    byte_size: int
    digest: bytes
    image_seconds: float = 0.0
    precious_bytes: int = 0
    precious_count: int = 0
    precious_seconds: float = 0.0


@dataclass(frozen=True)
class CommitDone:
    TYPE: ClassVar[int] = 6
    FMT: ClassVar[str] = ">Q"
    generation: int


@dataclass(frozen=True)
class Resume:
    TYPE: ClassVar[int] = 7
    FMT: ClassVar[str] = ">"


@dataclass(frozen=True)
class Restore:
    TYPE: ClassVar[int] = 8
    FMT: ClassVar[str] = ">Q"
    generation: int


@dataclass(frozen=True)
class RestoreAck:
    TYPE: ClassVar[int] = 9
    FMT: ClassVar[str] = ">I32s"
    process_id: int
    digest: bytes


@dataclass(frozen=True)
class Abort:
    TYPE: ClassVar[int] = 10
    FMT: ClassVar[str] = ">Q"
    generation: int


@dataclass(frozen=True)
class Failed:
    TYPE: ClassVar[int] = 11
    FMT: ClassVar[str] = ">I"
    process_id: int
    reason: str = ""


MESSAGES = {
    cls.TYPE: cls
    for cls in (
        Register, RegisterAck, CkptRequest, QuiesceAck, ImageStaged, CommitDone,
        Resume, Restore, RestoreAck, Abort, Failed,
    )
}


def encode(msg) -> bytes:
    """Serialize one message into a complete frame."""
    cls = type(msg)
    if MESSAGES.get(getattr(cls, "TYPE", None)) is not cls:
        raise ProtocolError(f"not a protocol message: {msg!r}")
    if cls is Failed:
        payload = struct.pack(cls.FMT, msg.process_id) + msg.reason.encode("utf-8")
    else:
        values = [getattr(msg, fl.name) for fl in fields(msg)]
        payload = struct.pack(cls.FMT, *values)
    body = bytes((VERSION, cls.TYPE)) + payload
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes):
    if len(body) < 2:
        raise ProtocolError("frame shorter than version and type bytes")
    if body[0] != VERSION:
        raise ProtocolError(f"unsupported protocol version {body[0]}")
    cls = MESSAGES.get(body[1])
    if cls is None:
        raise ProtocolError(f"unknown message type {body[1]}")
    payload = body[2:]
    size = struct.calcsize(cls.FMT)
    if cls is Failed:
        if len(payload) < size:
            raise ProtocolError("FAILED frame too short")
        (pid,) = struct.unpack(cls.FMT, payload[:size])
        return Failed(pid, payload[size:].decode("utf-8", "replace"))
    if len(payload) != size:
        raise ProtocolError(f"{cls.__name__} expects {size} field bytes, got {len(payload)}")
    return cls(*struct.unpack(cls.FMT, payload))


def decode(frame: bytes):
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError("truncated frame header")
    (length,) = HEADER.unpack_from(frame)
    if len(frame) != HEADER.size + length:
        raise ProtocolError(f"frame length {length} does not match {len(frame) - HEADER.size} body bytes")
    return decode_body(frame[HEADER.size :])


class FrameReader:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> list:
        self.buf += data
        out = []
        while len(self.buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self.buf)
            if length > MAX_FRAME:
                raise ProtocolError(f"frame of {length} bytes exceeds limit")
            if len(self.buf) < HEADER.size + length:
                break
            body = bytes(self.buf[HEADER.size : HEADER.size + length])
            del self.buf[: HEADER.size + length]
            out.append(decode_body(body))
        return out


# ---------------------------------------------------------------------------
# Links.  ``recv`` returns None on timeout and raises AgentUnreachable when
# the peer is gone.


class DirectLink:
    """Synchronous in-process link to an ``Agent``.

    ``send`` hands the message to the agent's handler; the handler's replies
    are produced lazily, one per ``recv`` call, so the coordinator controls the
    interleaving of agents deterministically.  Every message still goes
    through the wire encoding.
    """

    def __init__(self, agent):
        self.agent = agent
        self.pending: list[Iterator] = []
        self.dead = False

    def send(self, msg) -> None:
        if self.dead:
            raise AgentUnreachable("agent link is closed")
        self.pending.append(self.agent.handle(decode(encode(msg))))

    def recv(self, timeout: float | None = None):
        if self.dead:
            raise AgentUnreachable("agent link is closed")
        while self.pending:
            try:
                reply = next(self.pending[0])
            except StopIteration:
                self.pending.pop(0)
                continue
            except AgentDied as e:
                self.dead = True
                raise AgentUnreachable(str(e)) from e
            return decode(encode(reply))
        return None

    def close(self) -> None:
        self.dead = True


class AgentDied(Exception):
    """Raised inside an in-process agent to model the process disappearing."""


class SocketLink:
    """Framed messages over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = FrameReader()
        self.inbox: list = []
        self.closed = False

    def send(self, msg) -> None:
        try:
            self.sock.sendall(encode(msg))
        except OSError as e:
            self.closed = True
            raise AgentUnreachable(f"send failed: {e}") from e

    def recv(self, timeout: float | None = None):
        while not self.inbox:
            if self.closed:
                raise AgentUnreachable("peer closed the connection")
            ready, _, _ = select.select([self.sock], [], [], timeout)
            if not ready:
                return None
            try:
                data = self.sock.recv(65536)
            except OSError as e:
                self.closed = True
                raise AgentUnreachable(f"recv failed: {e}") from e
            if not data:
                self.closed = True
                raise AgentUnreachable("peer closed the connection")
            self.inbox.extend(self.reader.feed(data))
        return self.inbox.pop(0)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass
