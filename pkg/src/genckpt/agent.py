"""Per-process checkpoint runtime.

A process links an ``Agent``, registers the state sections it wants saved,
and lets the agent answer coordinator commands.  Images are encoded as::

    4s  magic b"GCKI"
    B   format version (1)
    I   section count
    per section, in registration order:
        H   name length      then the UTF-8 name
        B   kind (0 heap_model, 1 metadata)
        Q   byte length      then the bytes
    32s sha256 of every preceding byte

All integers are big-endian.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

from . import protocol as p
from .errors import FdExhaustion, GenckptError, ImageFormatError, SnapshotRace

log = logging.getLogger(__name__)

MAGIC = b"GCKI"
IMAGE_VERSION = 1
_HEAD = struct.Struct(">4sBI")
_NAME_LEN = struct.Struct(">H")
_SECTION = struct.Struct(">BQ")
TRAILER = 32


class SectionKind(enum.IntEnum):
    HEAP_MODEL = 0
    METADATA = 1


class Role(enum.IntEnum):
    DRIVER = 0
    WORKER = 1


@dataclass
class StateSection:
    name: str
    data: bytes | bytearray
    kind: SectionKind = SectionKind.HEAP_MODEL


@dataclass(frozen=True)
class FdRange:
    start: int
    count: int

    def __contains__(self, fd: int) -> bool:
        return self.start <= fd < self.start + self.count


@dataclass(frozen=True)
class OpenFile:
    path: str
    descriptor: int
    mode: str


def choose_internal_fd_range(app_fds: Iterable[int], needed: int, max_fd: int) -> FdRange:
    """Lowest range [start, start+needed) with start >= 3, below max_fd, avoiding app_fds."""
    if needed < 1:
        raise ValueError("needed must be positive")
    used = sorted({fd for fd in app_fds if 0 <= fd < max_fd})
    start = 3
    i = bisect.bisect_left(used, start)
    while start + needed <= max_fd:
        if i == len(used) or used[i] >= start + needed:
            return FdRange(start, needed)
        start = used[i] + 1
        i += 1
    raise FdExhaustion(f"no run of {needed} free descriptors below {max_fd}")


def header_size(sections: Iterable[StateSection]) -> int:
    return _HEAD.size + TRAILER + sum(
        _NAME_LEN.size + len(s.name.encode("utf-8")) + _SECTION.size for s in sections
    )


def snapshot_state(sections: Iterable[StateSection]) -> tuple[bytes, int]:
    """Encode sections into an image; returns (image, footprint in bytes)."""
    sections = list(sections)
    names = [s.name for s in sections]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate section names in {names}")
    before = [hashlib.sha256(s.data).digest() for s in sections]
    parts = [_HEAD.pack(MAGIC, IMAGE_VERSION, len(sections))]
    for s in sections:
        name = s.name.encode("utf-8")
        parts += [_NAME_LEN.pack(len(name)), name, _SECTION.pack(int(s.kind), len(s.data)), bytes(s.data)]
    after = [hashlib.sha256(s.data).digest() for s in sections]
    if before != after:
        changed = [s.name for s, a, b in zip(sections, before, after) if a != b]
        raise SnapshotRace(f"sections mutated during snapshot: {changed}")
    body = b"".join(parts)
    image = body + hashlib.sha256(body).digest()
    return image, len(image)


def restore_state(image: bytes) -> list[StateSection]:
    """Decode an image produced by ``snapshot_state``."""
    if len(image) < _HEAD.size + TRAILER:
        raise ImageFormatError("image shorter than header and trailer")
    body, trailer = image[:-TRAILER], image[-TRAILER:]
    if hashlib.sha256(body).digest() != trailer:
        raise ImageFormatError("image digest trailer mismatch")
    magic, version, count = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise ImageFormatError(f"unsupported image version {version}")
    pos = _HEAD.size
    sections = []
    try:
        for _ in range(count):
            (nlen,) = _NAME_LEN.unpack_from(body, pos)
            pos += _NAME_LEN.size
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            kind, size = _SECTION.unpack_from(body, pos)
            pos += _SECTION.size
            if pos + size > len(body):
                raise ImageFormatError(f"section {name!r} runs past the end of the image")
            sections.append(StateSection(name, body[pos : pos + size], SectionKind(kind)))
            pos += size
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise ImageFormatError(f"malformed section header: {e}") from e
    if pos != len(body):
        raise ImageFormatError(f"{len(body) - pos} trailing bytes after last section")
    return sections


def current_process_fds() -> set[int]:
    try:
        return {int(n) for n in os.listdir("/proc/self/fd")}
    except OSError:
        return {0, 1, 2}


class _TrackedFile:
    """File object proxy that unregisters itself from the agent on close."""

    def __init__(self, agent: "Agent", f):
        self._agent = agent
        self._f = f

    def __getattr__(self, name):
        return getattr(self._f, name)

    def close(self):
        if not self._f.closed:
            self._agent._open_files.pop(self._f.fileno(), None)
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Agent:
    """Cooperative checkpoint agent for one process.

    ``store`` is a ``GenerationStore`` or ``OverwriteStore`` shared with the
    coordinator.  ``tracker`` (a ``precious.PreciousTracker``) is optional;
    when present its precious set is backed up with this process's image.
    ``on_restore`` is called with the agent after sections were repopulated.
    """

    def __init__(
        self,
        store,
        role: Role = Role.WORKER,
        declared_footprint: int = 0,
        tracker=None,
        on_restore: Callable[["Agent"], None] | None = None,
        requested_id: int = -1,
    ):
        self.store = store
        self.role = Role(role)
        self.declared_footprint = declared_footprint
        self.tracker = tracker
        self.on_restore = on_restore
        self.requested_id = requested_id
        self.process_id: int | None = None
        self.epoch: int | None = None
        self.quiesced = False
        self.sections: dict[str, StateSection] = {}
        self._open_files: dict[int, OpenFile] = {}
        self.last_footprint = 0

    @property
    def clock(self):
        return self.store.fs.now

    # -- state sections --------------------------------------------------
    def register_section(self, name: str, data=b"", kind: SectionKind = SectionKind.HEAP_MODEL) -> None:
        if name in self.sections:
            raise ValueError(f"section {name!r} already registered")
        self.sections[name] = StateSection(name, data, SectionKind(kind))

    def set_section(self, name: str, data) -> None:
        self.sections[name].data = data

    def section(self, name: str):
        return self.sections[name].data

    def footprint_estimate(self) -> int:
        return header_size(self.sections.values()) + sum(len(s.data) for s in self.sections.values())

    def snapshot(self) -> tuple[bytes, int]:
        image, footprint = snapshot_state(self.sections.values())
        self.last_footprint = footprint
        return image, footprint

    def restore(self, image: bytes) -> None:
        self.sections = {s.name: s for s in restore_state(image)}

    # -- open-file bookkeeping -------------------------------------------
    def open(self, path: str, mode: str = "r", **kwargs):
        f = open(path, mode, **kwargs)
        self._open_files[f.fileno()] = OpenFile(os.path.abspath(path), f.fileno(), mode)
        return _TrackedFile(self, f)

    def enumerate_open_files(self) -> list[OpenFile]:
        return [self._open_files[fd] for fd in sorted(self._open_files)]

    # -- protocol --------------------------------------------------------
    def register_message(self) -> p.Register:
        return p.Register(int(self.role), self.declared_footprint, self.requested_id)

    def _sink(self, index: int):
        if hasattr(self.store, "attach_staging"):
            return self.store.attach_staging(index)
        return self.store.attach(index)

    def handle(self, msg):
        """Generator of replies to one coordinator message."""
        if isinstance(msg, p.RegisterAck):
            self.process_id, self.epoch = msg.process_id, msg.epoch
        elif isinstance(msg, p.CkptRequest):
            yield from self._checkpoint(msg.generation)
        elif isinstance(msg, (p.Resume, p.Abort, p.CommitDone)):
            if not isinstance(msg, p.CommitDone):
                self.quiesced = False
        elif isinstance(msg, p.Restore):
            yield from self._restore(msg.generation)
        else:
            raise GenckptError(f"agent cannot handle {type(msg).__name__}")

    def _checkpoint(self, index: int):
        self.quiesced = True
        yield p.QuiesceAck(self.process_id)
        try:
            sink = self._sink(index)
            t0 = self.clock()
            image, _ = self.snapshot()
            staged = sink.stage_image(self.process_id, image)
            t1 = self.clock()
            precious_bytes = count = 0
            if self.tracker is not None:
                for record, content in self.tracker.collect():
                    rec = sink.stage_precious(record, content)
                    precious_bytes += rec.byte_size
                    count += 1
            t2 = self.clock()
        except GenckptError as e:
            log.warning("process %s failed to stage generation %d: %s", self.process_id, index, e)
            yield p.Failed(self.process_id, str(e))
            return
        yield p.ImageStaged(
            self.process_id, staged.byte_size, bytes.fromhex(staged.checksum),
            t1 - t0, precious_bytes, count, t2 - t1,
        )

    def _restore(self, index: int):
        try:
            loaded = self.store.load_generation(index, verify=False)
            image = loaded.image_bytes(self.process_id)
            self.restore(image)
            if self.tracker is not None:
                self.tracker.adopt(loaded.manifest.precious)
            if self.on_restore is not None:
                self.on_restore(self)
        except GenckptError as e:
            yield p.Failed(self.process_id, str(e))
            return
        self.quiesced = False
        yield p.RestoreAck(self.process_id, hashlib.sha256(image).digest())


def serve(agent: Agent, link, relocate: bool = True) -> None:
    """Run an agent's command loop over a ``SocketLink`` until the peer hangs up.

    With ``relocate`` the link socket is moved into a descriptor range chosen
    to avoid every descriptor the application currently holds.
    """
    if relocate and hasattr(link, "sock"):
        fd_range = choose_internal_fd_range(current_process_fds(), 1, _max_fd())
        old = link.sock
        new_fd = os.dup2(old.fileno(), fd_range.start)
        link.sock = type(old)(fileno=new_fd)
        os.close(old.detach())
        agent.internal_fds = fd_range
    link.send(agent.register_message())
    while True:
        try:
            msg = link.recv(None)
        except GenckptError:
            return
        if msg is None:
            continue
        for reply in agent.handle(msg):
            link.send(reply)


def _max_fd() -> int:
    try:
        import resource

        soft, _ = resource.getrlimit(resource.RLIMIT_NOFILE)
        return soft if soft > 0 else 1024
    except (ImportError, ValueError):
        return 1024
