"""Precious files: temporary files a restarted run still needs.

Files are identified by policy (basename patterns, a dedicated directory, or
everything the application writes) and/or by explicit declaration.  With
``ckpt_enabled`` an unlink of a precious file is intercepted: the file moves
into a hidden shadow directory ``.retained/`` and the application sees it as
deleted, while checkpoints keep backing it up.
"""

from __future__ import annotations

import enum
import fnmatch
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator
from urllib.parse import quote

from .errors import CollectError, CorruptImage, DeleteError, PolicyError
from .manifest import Lifecycle, PreciousFileRecord

log = logging.getLogger(__name__)

SHADOW = ".retained"


class Classification(str, enum.Enum):
    PRECIOUS = "precious"
    OUTPUT = "output"
    OTHER = "other"


class PreciousMode(str, enum.Enum):
    PREFIX_SUFFIX = "prefix_suffix"
    DIRECTORY = "directory"
    INTERCEPT_ALL_TEMP = "intercept_all_temp"


class UnlinkOutcome(str, enum.Enum):
    DELETED = "deleted"
    RETAINED = "retained"


@dataclass(frozen=True)
class PreciousPolicy:
    """``patterns`` are globs on the basename; an entry without ``*`` is a prefix."""

    mode: PreciousMode = PreciousMode.PREFIX_SUFFIX
    patterns: tuple[str, ...] = ()
    precious_dir: str | None = None
    ckpt_enabled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", PreciousMode(self.mode))
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if self.mode is PreciousMode.PREFIX_SUFFIX and not self.patterns:
            raise PolicyError("prefix_suffix mode needs at least one pattern")
        if self.mode is PreciousMode.DIRECTORY and not self.precious_dir:
            raise PolicyError("directory mode needs precious_dir")

    @classmethod
    def from_flags(cls, prefixes=(), suffixes=(), precious_dir=None, ckpt_enable=False, intercept_all=False):
        if intercept_all:
            return cls(PreciousMode.INTERCEPT_ALL_TEMP, ckpt_enabled=ckpt_enable)
        if precious_dir:
            return cls(PreciousMode.DIRECTORY, precious_dir=precious_dir, ckpt_enabled=ckpt_enable)
        patterns = tuple(f"{p}*" for p in prefixes) + tuple(f"*{s}" for s in suffixes)
        return cls(PreciousMode.PREFIX_SUFFIX, patterns, ckpt_enabled=ckpt_enable)


def _norm(path: str) -> list[str]:
    return [p for p in os.path.normpath(path).split(os.sep) if p not in ("", ".")]


def classify(path: str, policy: PreciousPolicy) -> Classification:
    if not path:
        raise ValueError("empty path")
    parts = _norm(path)
    if not parts or SHADOW in parts:
        return Classification.OTHER
    if policy.mode is PreciousMode.INTERCEPT_ALL_TEMP:
        return Classification.PRECIOUS
    if policy.mode is PreciousMode.DIRECTORY:
        pdir = policy.precious_dir
        if os.path.isabs(pdir) != os.path.isabs(path):
            pdir, path = os.path.abspath(pdir), os.path.abspath(path)
            parts = _norm(path)
        base = _norm(pdir)
        if len(parts) > len(base) and parts[: len(base)] == base:
            return Classification.PRECIOUS
        return Classification.OUTPUT
    name = parts[-1]
    for pat in policy.patterns:
        glob = pat if "*" in pat or "?" in pat else pat + "*"
        if fnmatch.fnmatchcase(name, glob):
            return Classification.PRECIOUS
    return Classification.OUTPUT


@dataclass
class TrackerState:
    live: set[str] = field(default_factory=set)
    # original path -> location of the retained copy in the shadow directory
    deletion_pending: dict[str, str] = field(default_factory=dict)


def _sha256_file(path: str) -> tuple[bytes, str]:
    with open(path, "rb") as f:
        data = f.read()
    return data, hashlib.sha256(data).hexdigest()


class PreciousTracker:
    """Application-facing file API with precious-file bookkeeping.

    The application creates, writes, appends, unlinks and lists files through
    this object (the cooperative stand-in for syscall interposition).  Paths
    may be given relative to ``root``.
    """

    def __init__(self, root: str, policy: PreciousPolicy):
        self.root = os.path.abspath(root)
        self.policy = policy
        self.state = TrackerState()
        os.makedirs(self.root, exist_ok=True)

    # -- paths -----------------------------------------------------------
    def abspath(self, path: str) -> str:
        return os.path.normpath(os.path.join(self.root, path))

    @property
    def shadow_dir(self) -> str:
        base = self.root
        if self.policy.mode is PreciousMode.DIRECTORY:
            base = os.path.join(self.root, self.policy.precious_dir)
        return os.path.join(base, SHADOW)

    def shadow_path(self, original: str) -> str:
        rel = os.path.relpath(original, self.root)
        return os.path.join(self.shadow_dir, quote(rel, safe=""))

    def classify(self, path: str) -> Classification:
        return classify(self.abspath(path), self._abs_policy)

    @property
    def _abs_policy(self) -> PreciousPolicy:
        if self.policy.mode is PreciousMode.DIRECTORY and not os.path.isabs(self.policy.precious_dir):
            return PreciousPolicy(
                PreciousMode.DIRECTORY,
                precious_dir=os.path.join(self.root, self.policy.precious_dir),
                ckpt_enabled=self.policy.ckpt_enabled,
            )
        return self.policy

    # -- application file API --------------------------------------------
    def declare(self, path: str) -> None:
        """Mark a file precious regardless of policy."""
        self.state.live.add(self.abspath(path))

    def write(self, path: str, data: bytes) -> None:
        full = self.abspath(path)
        self._drop_pending(full)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        with open(full, "wb") as f:
            f.write(data)
        if self.classify(full) is Classification.PRECIOUS:
            self.state.live.add(full)

    create = write

    def append(self, path: str, data: bytes) -> None:
        full = self.abspath(path)
        if full in self.state.deletion_pending:
            raise FileNotFoundError(full)
        with open(full, "ab") as f:
            f.write(data)

    def read(self, path: str) -> bytes:
        full = self.abspath(path)
        if full in self.state.deletion_pending:
            raise FileNotFoundError(full)
        with open(full, "rb") as f:
            return f.read()

    def exists(self, path: str) -> bool:
        full = self.abspath(path)
        return full not in self.state.deletion_pending and os.path.exists(full)

    def listdir(self, path: str = ".") -> list[str]:
        return sorted(n for n in os.listdir(self.abspath(path)) if n != SHADOW)

    def walk_visible(self) -> list[str]:
        """Every file the application can see, as paths relative to root."""
        out = []
        for dirpath, dirnames, filenames in os.walk(self.root):
            dirnames[:] = sorted(d for d in dirnames if d != SHADOW)
            for name in filenames:
                out.append(os.path.relpath(os.path.join(dirpath, name), self.root))
        return sorted(out)

    def unlink(self, path: str) -> UnlinkOutcome:
        return intercept_unlink(self.abspath(path), self, self.policy)

    def _drop_pending(self, full: str) -> None:
        shadow = self.state.deletion_pending.pop(full, None)
        if shadow is not None and os.path.exists(shadow):
            os.remove(shadow)

    # -- checkpoint side -------------------------------------------------
    def precious_bytes(self) -> int:
        """Bytes held by the tracked precious set, deletion-pending files included."""
        total = 0
        for original in self.state.live | set(self.state.deletion_pending):
            try:
                total += os.path.getsize(self.physical_path(original))
            except OSError:
                pass
        return total

    def physical_path(self, original: str) -> str:
        return self.state.deletion_pending.get(original, original)

    def collect(self) -> Iterator[tuple[PreciousFileRecord, bytes]]:
        """Yield (record, bytes) for the current precious set, sorted by path."""
        live = set(self.state.live)
        for dirpath, dirnames, filenames in os.walk(self.root):
            dirnames[:] = [d for d in dirnames if d != SHADOW]
            for name in filenames:
                full = os.path.join(dirpath, name)
                if classify(full, self._abs_policy) is Classification.PRECIOUS:
                    live.add(full)
        entries = [(p, Lifecycle.LIVE) for p in live if p not in self.state.deletion_pending]
        entries += [(p, Lifecycle.DELETION_PENDING) for p in self.state.deletion_pending]
        for original, lifecycle in sorted(entries):
            physical = self.physical_path(original)
            try:
                data, digest = _sha256_file(physical)
            except OSError as e:
                if lifecycle is Lifecycle.LIVE and not os.path.exists(physical):
                    # declared but never created, or removed by a real delete
                    continue
                raise CollectError(original, str(e)) from e
            yield PreciousFileRecord(original, len(data), digest, lifecycle), data

    def adopt(self, records: list[PreciousFileRecord], prune_strays: bool = True) -> None:
        """Rebuild tracker state after ``restore_precious`` put files back.

        Deletion-pending files are moved back into the shadow directory so the
        application still sees them as deleted.  Precious files under root that
        the checkpoint does not know about are removed, as is any stale
        retained copy.
        """
        mine = [r for r in records if os.path.commonpath([self.root, r.original_path]) == self.root]
        self.state = TrackerState()
        if os.path.isdir(self.shadow_dir):
            for name in os.listdir(self.shadow_dir):
                os.remove(os.path.join(self.shadow_dir, name))
        known = {r.original_path for r in mine}
        if prune_strays:
            for dirpath, dirnames, filenames in os.walk(self.root):
                dirnames[:] = [d for d in dirnames if d != SHADOW]
                for name in filenames:
                    full = os.path.join(dirpath, name)
                    if full not in known and classify(full, self._abs_policy) is Classification.PRECIOUS:
                        os.remove(full)
        for r in mine:
            if r.lifecycle is Lifecycle.DELETION_PENDING:
                self._retain(r.original_path)
            else:
                self.state.live.add(r.original_path)

    def _retain(self, full: str) -> None:
        shadow = self.shadow_path(full)
        os.makedirs(os.path.dirname(shadow), exist_ok=True)
        os.replace(full, shadow)
        self.state.live.discard(full)
        self.state.deletion_pending[full] = shadow


def intercept_unlink(path: str, tracker: PreciousTracker, policy: PreciousPolicy) -> UnlinkOutcome:
    """Delete ``path``, unless checkpointing needs it kept (then hide it instead)."""
    full = tracker.abspath(path)
    if full in tracker.state.deletion_pending:
        raise FileNotFoundError(full)
    precious = full in tracker.state.live or tracker.classify(full) is Classification.PRECIOUS
    if policy.ckpt_enabled and precious:
        tracker._retain(full)
        return UnlinkOutcome.RETAINED
    try:
        os.remove(full)
    except OSError as e:
        raise DeleteError(f"cannot delete {full}: {e}") from e
    tracker.state.live.discard(full)
    return UnlinkOutcome.DELETED


def collect_precious_set(tracker: PreciousTracker, policy: PreciousPolicy | None = None, scan_root=None):
    """Records for every precious file: scan matches, declarations and retained files."""
    if policy is not None and policy != tracker.policy:
        tracker = _rebound(tracker, policy, scan_root)
    elif scan_root is not None and os.path.abspath(scan_root) != tracker.root:
        tracker = _rebound(tracker, tracker.policy, scan_root)
    return [rec for rec, _ in tracker.collect()]


def _rebound(tracker: PreciousTracker, policy: PreciousPolicy, scan_root) -> PreciousTracker:
    other = PreciousTracker.__new__(PreciousTracker)
    other.root = os.path.abspath(scan_root or tracker.root)
    other.policy = policy
    other.state = tracker.state
    return other


@dataclass
class RestoreResult:
    restored: list[str]
    overwritten: list[str]


def restore_precious(
    records: list[PreciousFileRecord],
    read_backup: Callable[[PreciousFileRecord], bytes],
    ckpt_enabled: bool = True,
) -> RestoreResult:
    """Re-create every record byte-identical at its original path.

    All backups are read and checked before the first file is touched, so a
    digest mismatch aborts the whole restore.  Deletion-pending files are
    re-created too; the owning tracker hides them again in ``adopt``.
    ``ckpt_enabled`` is accepted for symmetry with the policy and does not
    change what is restored.
    """
    payloads = []
    for rec in records:
        data = read_backup(rec)
        if hashlib.sha256(data).hexdigest() != rec.checksum or len(data) != rec.byte_size:
            raise CorruptImage(f"precious backup of {rec.original_path} does not match its record")
        payloads.append((rec, data))
    restored, overwritten = [], []
    for rec, data in payloads:
        target = rec.original_path
        if os.path.exists(target):
            _, digest = _sha256_file(target)
            if digest != rec.checksum:
                overwritten.append(target)
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        tmp = target + ".genckpt-restore"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, target)
        restored.append(target)
    return RestoreResult(restored, overwritten)
