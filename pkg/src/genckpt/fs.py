"""Filesystem abstraction under the generation store.

``RealFS`` forwards to the operating system.  ``SimFS`` is an in-memory tree
with an explicit durability model: file bytes survive a crash only once the
file was fsynced, and directory entries only once the parent directory was
fsynced.  It can also throttle writes through a ``BandwidthModel`` on a
virtual clock and emit an event before every mutating operation so the fault
harness can crash between any two of them.
"""

from __future__ import annotations

import functools
import hashlib
import os
import posixpath
import shutil
import threading
import time
from typing import Callable, Iterator

from .bandwidth import BandwidthModel

CHUNK = 1 << 20


def _locked(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        fs = self if isinstance(self, SimFS) else self.fs
        with fs.lock:
            return method(self, *args, **kwargs)

    return wrapper


def _immutable(data) -> bytes | memoryview:
    if isinstance(data, bytes):
        return data
    if isinstance(data, memoryview) and isinstance(data.obj, bytes):
        return data
    return bytes(data)


class RealFS:
    name = "real"

    def now(self) -> float:
        return time.monotonic()

    def exists(self, path: str) -> bool:
        return os.path.exists(path)

    def isdir(self, path: str) -> bool:
        return os.path.isdir(path)

    def mkdir(self, path: str) -> None:
        os.mkdir(path)

    def makedirs(self, path: str) -> None:
        os.makedirs(path, exist_ok=True)

    def listdir(self, path: str) -> list[str]:
        return sorted(os.listdir(path))

    def create(self, path: str, exclusive: bool = False) -> "RealWriter":
        flags = os.O_WRONLY | os.O_CREAT | (os.O_EXCL if exclusive else os.O_TRUNC)
        return RealWriter(os.open(path, flags, 0o644))

    def read_chunks(self, path: str, chunk: int = CHUNK) -> Iterator[bytes]:
        with open(path, "rb") as f:
            while True:
                block = f.read(chunk)
                if not block:
                    return
                yield block

    def read_bytes(self, path: str) -> bytes:
        with open(path, "rb") as f:
            return f.read()

    def size(self, path: str) -> int:
        return os.stat(path).st_size

    def sha256(self, path: str) -> str:
        h = hashlib.sha256()
        for block in self.read_chunks(path):
            h.update(block)
        return h.hexdigest()

    def rename(self, src: str, dst: str) -> None:
        os.rename(src, dst)

    def remove(self, path: str) -> None:
        os.remove(path)

    def rmdir(self, path: str) -> None:
        os.rmdir(path)

    def rmtree(self, path: str) -> None:
        shutil.rmtree(path)

    def fsync_dir(self, path: str) -> None:
        fd = os.open(path, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)


class RealWriter:
    def __init__(self, fd: int):
        self.fd = fd

    def write(self, data) -> None:
        view = memoryview(data)
        while view:
            n = os.write(self.fd, view)
            view = view[n:]

    def fsync(self) -> None:
        os.fsync(self.fd)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _File:
    __slots__ = ("chunks", "size", "synced", "version", "_digest")

    def __init__(self):
        self.chunks: list = []
        self.size = 0
        self.synced: tuple | None = None
        self.version = 0
        self._digest: tuple[int, str] | None = None

    def digest(self) -> str:
        if self._digest is None or self._digest[0] != self.version:
            h = hashlib.sha256()
            for c in self.chunks:
                h.update(c)
            self._digest = (self.version, h.hexdigest())
        return self._digest[1]


class _Dir:
    __slots__ = ("entries", "synced")

    def __init__(self):
        self.entries: dict[str, object] = {}
        self.synced: dict[str, object] | None = None


class SimFS:
    """In-memory filesystem with crash semantics.

    drop_unflushed: on ``crash()`` discard data and entries not yet fsynced.
    atomic_rename: when False, a directory rename is carried out entry by
        entry (each step immediately durable), so a crash can expose a
        half-moved directory.
    """

    name = "sim"

    def __init__(
        self,
        bandwidth: BandwidthModel | None = None,
        drop_unflushed: bool = True,
        atomic_rename: bool = True,
    ):
        self.root = _Dir()
        self.root.synced = {}
        self.bandwidth = bandwidth
        self.drop_unflushed = drop_unflushed
        self.atomic_rename = atomic_rename
        self.clock = 0.0
        self.on_event: Callable[[str, str], None] | None = None
        self.events = 0
        self.lock = threading.RLock()

    # -- internals -------------------------------------------------------
    def _event(self, op: str, path: str) -> None:
        # every mutating operation passes through here first
        self.events += 1
        if self.on_event is not None:
            self.on_event(op, path)

    @staticmethod
    def _split(path: str) -> list[str]:
        return [p for p in posixpath.normpath(path).split("/") if p and p != "."]

    def _lookup(self, path: str):
        node = self.root
        for part in self._split(path):
            if not isinstance(node, _Dir) or part not in node.entries:
                raise FileNotFoundError(path)
            node = node.entries[part]
        return node

    def _parent(self, path: str) -> tuple[_Dir, str]:
        parts = self._split(path)
        if not parts:
            raise PermissionError("cannot modify the root")
        parent = self._lookup("/".join(parts[:-1]))
        if not isinstance(parent, _Dir):
            raise NotADirectoryError(path)
        return parent, parts[-1]

    def _file(self, path: str) -> _File:
        node = self._lookup(path)
        if not isinstance(node, _File):
            raise IsADirectoryError(path)
        return node

    # -- clock -----------------------------------------------------------
    def now(self) -> float:
        return self.clock

    def advance(self, seconds: float) -> None:
        self.clock += seconds

    # -- queries ---------------------------------------------------------
    def exists(self, path: str) -> bool:
        try:
            self._lookup(path)
            return True
        except (FileNotFoundError, NotADirectoryError):
            return False

    def isdir(self, path: str) -> bool:
        try:
            return isinstance(self._lookup(path), _Dir)
        except (FileNotFoundError, NotADirectoryError):
            return False

    def listdir(self, path: str) -> list[str]:
        node = self._lookup(path)
        if not isinstance(node, _Dir):
            raise NotADirectoryError(path)
        return sorted(node.entries)

    def size(self, path: str) -> int:
        return self._file(path).size

    def sha256(self, path: str) -> str:
        return self._file(path).digest()

    def read_chunks(self, path: str, chunk: int = CHUNK) -> Iterator[bytes]:
        for c in list(self._file(path).chunks):
            yield bytes(c)

    def read_bytes(self, path: str) -> bytes:
        return b"".join(self._file(path).chunks)

    # -- mutations -------------------------------------------------------
    @_locked
    def mkdir(self, path: str) -> None:
        self._event("mkdir", path)
        parent, name = self._parent(path)
        if name in parent.entries:
            raise FileExistsError(path)
        parent.entries[name] = _Dir()

    def makedirs(self, path: str) -> None:
        cur = ""
        for part in self._split(path):
            cur = posixpath.join(cur, part) if cur else "/" + part
            if not self.exists(cur):
                self.mkdir(cur)

    @_locked
    def create(self, path: str, exclusive: bool = False) -> "SimWriter":
        self._event("create", path)
        parent, name = self._parent(path)
        existing = parent.entries.get(name)
        if existing is not None:
            if exclusive:
                raise FileExistsError(path)
            if isinstance(existing, _Dir):
                raise IsADirectoryError(path)
            existing.chunks = []
            existing.size = 0
            existing.version += 1
            return SimWriter(self, path, existing)
        node = _File()
        parent.entries[name] = node
        return SimWriter(self, path, node)

    @_locked
    def rename(self, src: str, dst: str) -> None:
        self._event("rename", src)
        sparent, sname = self._parent(src)
        if sname not in sparent.entries:
            raise FileNotFoundError(src)
        dparent, dname = self._parent(dst)
        node = sparent.entries[sname]
        target = dparent.entries.get(dname)
        if isinstance(target, _Dir):
            if not isinstance(node, _Dir) or target.entries:
                raise OSError(39, "Directory not empty", dst)
        if isinstance(node, _Dir) and not self.atomic_rename:
            self._rename_stepwise(sparent, sname, dparent, dname, node, src)
            return
        del sparent.entries[sname]
        dparent.entries[dname] = node

    def _rename_stepwise(self, sparent, sname, dparent, dname, node: _Dir, src: str) -> None:
        # Non-atomic model: build the target one durable entry at a time.
        new = _Dir()
        new.synced = {}
        dparent.entries[dname] = new
        dparent.synced = dict(dparent.entries)
        for name in sorted(node.entries):
            self._event("rename-step", posixpath.join(src, name))
            new.entries[name] = node.entries.pop(name)
            new.synced = dict(new.entries)
            node.synced = dict(node.entries)
        del sparent.entries[sname]
        sparent.synced = dict(sparent.entries)

    @_locked
    def remove(self, path: str) -> None:
        self._event("remove", path)
        parent, name = self._parent(path)
        node = parent.entries.get(name)
        if node is None:
            raise FileNotFoundError(path)
        if isinstance(node, _Dir):
            raise IsADirectoryError(path)
        del parent.entries[name]

    @_locked
    def rmdir(self, path: str) -> None:
        self._event("rmdir", path)
        parent, name = self._parent(path)
        node = parent.entries.get(name)
        if node is None:
            raise FileNotFoundError(path)
        if not isinstance(node, _Dir):
            raise NotADirectoryError(path)
        if node.entries:
            raise OSError(39, "Directory not empty", path)
        del parent.entries[name]

    @_locked
    def rmtree(self, path: str) -> None:
        self._event("rmtree", path)
        parent, name = self._parent(path)
        if name not in parent.entries:
            raise FileNotFoundError(path)
        del parent.entries[name]

    @_locked
    def fsync_dir(self, path: str) -> None:
        self._event("fsync_dir", path)
        node = self._lookup(path)
        if not isinstance(node, _Dir):
            raise NotADirectoryError(path)
        node.synced = dict(node.entries)

    # -- crash / clone ---------------------------------------------------
    def _copy(self, durable: bool) -> "SimFS":
        memo: dict[int, object] = {}

        def copy_node(node):
            key = id(node)
            if key in memo:
                return memo[key]
            if isinstance(node, _File):
                new = _File()
                if durable:
                    new.chunks = list(node.synced or ())
                    new.synced = node.synced
                else:
                    new.chunks = list(node.chunks)
                    new.synced = node.synced
                new.size = sum(len(c) for c in new.chunks)
                same = len(new.chunks) == len(node.chunks) and all(
                    a is b for a, b in zip(new.chunks, node.chunks)
                )
                if same:
                    new.version = node.version
                    new._digest = node._digest
                memo[key] = new
                return new
            new = _Dir()
            memo[key] = new
            source = (node.synced or {}) if durable else node.entries
            new.entries = {name: copy_node(child) for name, child in source.items()}
            if node.synced is not None:
                new.synced = {n: copy_node(c) for n, c in node.synced.items()}
            if durable:
                new.synced = dict(new.entries)
            return new

        out = SimFS(self.bandwidth, self.drop_unflushed, self.atomic_rename)
        out.root = copy_node(self.root)
        out.clock = self.clock
        return out

    def clone(self) -> "SimFS":
        """Independent copy of the live state (chunk payloads are shared)."""
        return self._copy(durable=False)

    def crash(self) -> "SimFS":
        """State a fresh mount would observe after an abrupt stop."""
        return self._copy(durable=self.drop_unflushed)


class SimWriter:
    def __init__(self, fs: SimFS, path: str, node: _File):
        self.fs = fs
        self.path = path
        self.node = node

    @_locked
    def write(self, data) -> None:
        self.fs._event("write", self.path)
        data = _immutable(data)
        n = len(data)
        if n == 0:
            return
        if self.fs.bandwidth is not None:
            self.fs.clock += self.fs.bandwidth.transfer_time(self.fs.clock, n)
        self.node.chunks.append(data)
        self.node.size += n
        self.node.version += 1

    @_locked
    def fsync(self) -> None:
        self.fs._event("fsync", self.path)
        self.node.synced = tuple(self.node.chunks)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
