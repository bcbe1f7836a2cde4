"""Generation store with an atomic directory-rename commit.

Layout under ``root``::

    NEXT_INDEX                      next generation index to hand out
    staging/<i>/EXPECT              index, created_at, process_count
    staging/<i>/images/<pid>.img    process image bytes
    staging/<i>/images/<pid>.rec    one manifest line describing the image
    staging/<i>/precious/<key>.bin  precious backup (key = sha256(original path)[:20])
    staging/<i>/precious/<key>.rec
    staging/<i>/MANIFEST            written at commit, just before the rename
    generations/<i>/...             the same tree after the commit rename

A generation becomes visible exactly when ``staging/<i>`` is renamed to
``generations/<i>``.  Every payload, record and the manifest are fsynced
before that rename, so recovery never has to look inside ``staging/``.

``OverwriteStore`` is the unsafe baseline: each process rewrites its own image
in place, with no staging and no barrier.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterator
from urllib.parse import quote

from . import manifest as mf
from .errors import (
    CorruptImage,
    DuplicateImage,
    DuplicatePrecious,
    DuplicateStaging,
    IncompleteGeneration,
    ManifestFormatError,
    NotFound,
    StaleGeneration,
    StorageError,
    ValidationWarning,
)
from .fs import CHUNK, RealFS
from .hooks import NO_FAULTS, FaultHooks, SimulatedCrash
from .manifest import (
    CheckpointManifest,
    GenerationId,
    Lifecycle,
    PreciousFileRecord,
    ProcessImage,
)

log = logging.getLogger(__name__)

STAGING = "staging"
GENERATIONS = "generations"
COUNTER = "NEXT_INDEX"
MANIFEST = "MANIFEST"
EXPECT = "EXPECT"
DEFAULT_KEEP = 2


def iter_chunks(content) -> Iterator:
    """Normalize a byte string or an iterable of byte chunks into chunks."""
    if isinstance(content, bytearray):
        content = bytes(content)
    if isinstance(content, (bytes, memoryview)):
        view = memoryview(content)
        for i in range(0, len(view), CHUNK):
            yield view[i : i + CHUNK]
        return
    for chunk in content:
        if len(chunk) > CHUNK:
            yield from iter_chunks(chunk)
        elif len(chunk):
            yield chunk


def precious_key(original_path: str) -> str:
    return hashlib.sha256(original_path.encode("utf-8")).hexdigest()[:20]


def write_stream(
    fs, path: str, content, tag: tuple, hooks: FaultHooks, exclusive: bool, digest: str | None = None
) -> tuple[int, str]:
    """Write ``content`` to ``path``, fsync it, and return (size, sha256 hex).

    When the caller already knows the digest it is passed in and not recomputed.
    """
    h = hashlib.sha256() if digest is None else None
    offset = 0
    with fs.create(path, exclusive=exclusive) as w:
        for chunk in iter_chunks(content):
            budget = hooks.write_budget(tag, offset, len(chunk))
            if budget is not None:
                w.write(chunk[:budget])
                raise SimulatedCrash(f"{tag} at byte {offset + budget}")
            w.write(chunk)
            if h is not None:
                h.update(chunk)
            offset += len(chunk)
        w.fsync()
    return offset, (h.hexdigest() if h is not None else digest)


def _write_small(fs, path: str, data: bytes, exclusive: bool = False) -> None:
    with fs.create(path, exclusive=exclusive) as w:
        w.write(data)
        w.fsync()


@dataclass
class GenerationInfo:
    index: int
    valid: bool
    manifest: CheckpointManifest | None = None
    problem: str = ""


class StagingHandle:
    """An open, uncommitted generation.

    Safe to share between threads staging distinct process ids; the
    exclusive-create of each payload file is what rejects duplicates.  A
    writer in another process can obtain an equivalent handle through
    ``GenerationStore.attach_staging``.
    """

    def __init__(self, store: "GenerationStore", generation: GenerationId, process_count: int):
        self.store = store
        self.generation = generation
        self.process_count = process_count
        self.path = store.staging_path(generation.index)
        self.closed = False

    @property
    def index(self) -> int:
        return self.generation.index

    def _check_open(self):
        if self.closed:
            raise StorageError(f"staging {self.index} is closed")

    def stage_image(self, process_id: int, content) -> ProcessImage:
        self._check_open()
        fs = self.store.fs
        rel = f"images/{process_id}.img"
        path = os.path.join(self.path, rel)
        try:
            size, digest = write_stream(fs, path, content, ("image", process_id), self.store.hooks, True)
        except FileExistsError as e:
            raise DuplicateImage(f"process {process_id} already staged in generation {self.index}") from e
        except OSError as e:
            raise StorageError(f"writing image for process {process_id}: {e}") from e
        image = ProcessImage(process_id, size, digest, rel)
        self._write_record(path[: -len(".img")] + ".rec", mf.image_line(image))
        return image

    def stage_precious(
        self,
        original_path: str | PreciousFileRecord,
        content,
        lifecycle: Lifecycle | str = Lifecycle.LIVE,
    ) -> PreciousFileRecord:
        self._check_open()
        if isinstance(original_path, PreciousFileRecord):
            lifecycle = original_path.lifecycle
            original_path = original_path.original_path
        lifecycle = Lifecycle(lifecycle)
        fs = self.store.fs
        rel = f"precious/{precious_key(original_path)}.bin"
        path = os.path.join(self.path, rel)
        try:
            size, digest = write_stream(fs, path, content, ("precious", original_path), self.store.hooks, True)
        except FileExistsError as e:
            raise DuplicatePrecious(f"{original_path!r} already staged in generation {self.index}") from e
        except OSError as e:
            raise StorageError(f"writing precious backup of {original_path!r}: {e}") from e
        record = PreciousFileRecord(original_path, size, digest, lifecycle, rel)
        self._write_record(path[: -len(".bin")] + ".rec", mf.precious_line(record))
        return record

    def _write_record(self, path: str, line: str) -> None:
        try:
            _write_small(self.store.fs, path, (line + "\n").encode("utf-8"), exclusive=True)
        except OSError as e:
            raise StorageError(f"writing record {path}: {e}") from e

    def staged(self) -> tuple[dict[int, ProcessImage], list[PreciousFileRecord]]:
        """Read back every staged record from disk (covers out-of-process writers)."""
        fs = self.store.fs
        images: dict[int, ProcessImage] = {}
        precious: list[PreciousFileRecord] = []
        for sub in ("images", "precious"):
            d = os.path.join(self.path, sub)
            for name in fs.listdir(d):
                if not name.endswith(".rec"):
                    continue
                item = mf.parse_item(fs.read_bytes(os.path.join(d, name)).decode("utf-8"))
                if isinstance(item, ProcessImage):
                    images[item.process_id] = item
                else:
                    precious.append(item)
        return images, precious


class GenerationStore:
    def __init__(
        self,
        root: str,
        fs=None,
        hooks: FaultHooks = NO_FAULTS,
        keep: int = DEFAULT_KEEP,
        wallclock=time.time,
    ):
        self.root = os.path.abspath(root) if fs is None or isinstance(fs, RealFS) else root
        self.fs = fs if fs is not None else RealFS()
        self.hooks = hooks
        self.keep = keep
        self.wallclock = wallclock
        self._lock = threading.RLock()
        try:
            self.fs.makedirs(os.path.join(self.root, STAGING))
            self.fs.makedirs(os.path.join(self.root, GENERATIONS))
            # make the layout itself durable, or a crash could lose the whole store
            self.fs.fsync_dir(os.path.dirname(self.root.rstrip("/")) or "/")
            self.fs.fsync_dir(self.root)
        except OSError as e:
            raise StorageError(f"cannot initialize store at {self.root}: {e}") from e

    # -- paths -----------------------------------------------------------
    def staging_path(self, index: int) -> str:
        return os.path.join(self.root, STAGING, str(index))

    def generation_path(self, index: int) -> str:
        return os.path.join(self.root, GENERATIONS, str(index))

    def _indices(self, sub: str) -> list[int]:
        try:
            names = self.fs.listdir(os.path.join(self.root, sub))
        except OSError as e:
            raise StorageError(f"cannot read {sub}/ in {self.root}: {e}") from e
        return sorted(int(n) for n in names if n.isdigit())

    # -- index allocation ------------------------------------------------
    def _read_counter(self) -> int:
        path = os.path.join(self.root, COUNTER)
        if not self.fs.exists(path):
            return 0
        try:
            return int(self.fs.read_bytes(path).decode().strip() or 0)
        except ValueError:
            return 0

    def allocate_generation(self) -> GenerationId:
        """Hand out the next generation index and persist the counter past it."""
        with self._lock:
            used = self._indices(GENERATIONS) + self._indices(STAGING)
            index = max([self._read_counter()] + [i + 1 for i in used])
            tmp = os.path.join(self.root, COUNTER + ".tmp")
            try:
                _write_small(self.fs, tmp, f"{index + 1}\n".encode())
                self.fs.rename(tmp, os.path.join(self.root, COUNTER))
                self.fs.fsync_dir(self.root)
            except OSError as e:
                raise StorageError(f"cannot persist generation counter: {e}") from e
            return GenerationId(index, self.wallclock())

    # -- staging and commit ---------------------------------------------
    def begin_generation(self, gen: GenerationId | int, process_count: int) -> StagingHandle:
        if isinstance(gen, int):
            gen = GenerationId(gen, self.wallclock())
        if process_count < 1:
            raise ValueError("process_count must be at least 1")
        with self._lock:
            latest = self.latest_committed()
            if latest is not None and gen.index <= latest.index:
                raise StaleGeneration(f"generation {gen.index} <= latest committed {latest.index}")
            if self.fs.exists(self.generation_path(gen.index)):
                raise StaleGeneration(f"generations/{gen.index} already exists")
            path = self.staging_path(gen.index)
            if self.fs.exists(path):
                raise DuplicateStaging(f"staging/{gen.index} already exists")
            try:
                self.fs.mkdir(path)
                self.fs.mkdir(os.path.join(path, "images"))
                self.fs.mkdir(os.path.join(path, "precious"))
                expect = f"index\t{gen.index}\ncreated_at\t{gen.created_at!r}\nprocess_count\t{process_count}\n"
                _write_small(self.fs, os.path.join(path, EXPECT), expect.encode())
            except OSError as e:
                raise StorageError(f"cannot create staging/{gen.index}: {e}") from e
            return StagingHandle(self, gen, process_count)

    def attach_staging(self, index: int) -> StagingHandle:
        path = self.staging_path(index)
        try:
            fields = dict(
                line.split("\t", 1)
                for line in self.fs.read_bytes(os.path.join(path, EXPECT)).decode().splitlines()
            )
        except (OSError, ValueError) as e:
            raise NotFound(f"no open staging for generation {index}") from e
        gen = GenerationId(int(fields["index"]), float(fields["created_at"]))
        return StagingHandle(self, gen, int(fields["process_count"]))

    def commit_generation(self, staging: StagingHandle, phase_timings: dict | None = None) -> CheckpointManifest:
        """Publish a fully staged generation with a single directory rename."""
        fs = self.fs
        with self._lock:
            staging._check_open()
            images, precious = staging.staged()
            if len(images) != staging.process_count:
                raise IncompleteGeneration(
                    f"generation {staging.index}: {len(images)} of {staging.process_count} images staged"
                )
            for item in list(images.values()) + precious:
                rel = item.relative_path if isinstance(item, ProcessImage) else item.store_path
                if fs.size(os.path.join(staging.path, rel)) != item.byte_size:
                    raise IncompleteGeneration(f"{rel} size differs from its staged record")
            manifest = CheckpointManifest(
                generation=staging.generation,
                process_count=staging.process_count,
                images=list(images.values()),
                precious=precious,
                phase_timings=dict(phase_timings or {}),
            )
            try:
                fs.fsync_dir(os.path.join(staging.path, "images"))
                fs.fsync_dir(os.path.join(staging.path, "precious"))
                _write_small(fs, os.path.join(staging.path, MANIFEST), mf.encode(manifest))
                fs.fsync_dir(staging.path)
            except OSError as e:
                raise StorageError(f"writing manifest for generation {staging.index}: {e}") from e

            self.hooks.hit("before_commit_rename", index=staging.index)
            try:
                fs.rename(staging.path, self.generation_path(staging.index))
            except OSError as e:
                raise StorageError(f"commit rename of generation {staging.index} failed: {e}") from e
            staging.closed = True
            try:
                fs.fsync_dir(os.path.join(self.root, GENERATIONS))
                fs.fsync_dir(os.path.join(self.root, STAGING))
            except OSError as e:
                raise StorageError(f"fsync after commit of generation {staging.index}: {e}") from e
            self.hooks.hit("after_commit_rename", index=staging.index)
            log.info("committed generation %d (%d bytes)", staging.index, manifest.total_bytes)
            return manifest

    def abort_generation(self, staging: StagingHandle | int) -> bool:
        """Remove a staging directory.  Returns False if cleanup failed (harmless to recovery)."""
        index = staging if isinstance(staging, int) else staging.index
        if not isinstance(staging, int):
            staging.closed = True
        path = self.staging_path(index)
        with self._lock:
            try:
                if self.fs.exists(path):
                    self.fs.rmtree(path)
                    self.fs.fsync_dir(os.path.join(self.root, STAGING))
                return True
            except OSError as e:
                log.warning("could not remove staging/%d: %s", index, e)
                return False

    # -- recovery --------------------------------------------------------
    def validate(self, index: int, verify_digests: bool = False) -> GenerationInfo:
        fs = self.fs
        base = self.generation_path(index)
        try:
            m = mf.decode(fs.read_bytes(os.path.join(base, MANIFEST)))
        except FileNotFoundError:
            return GenerationInfo(index, False, None, "manifest missing")
        except (OSError, ManifestFormatError) as e:
            return GenerationInfo(index, False, None, f"manifest unreadable: {e}")
        if m.index != index:
            return GenerationInfo(index, False, m, f"manifest claims index {m.index}")
        items = [(im.relative_path, im.byte_size, im.checksum) for im in m.images]
        items += [(p.store_path, p.byte_size, p.checksum) for p in m.precious]
        for rel, size, digest in items:
            if rel.startswith("/") or ".." in rel.split("/"):
                return GenerationInfo(index, False, m, f"{rel} escapes the generation directory")
            path = os.path.join(base, rel)
            try:
                actual = fs.size(path)
            except OSError:
                return GenerationInfo(index, False, m, f"{rel} missing")
            if actual != size:
                return GenerationInfo(index, False, m, f"{rel} is {actual} bytes, manifest says {size}")
            if verify_digests and fs.sha256(path) != digest:
                return GenerationInfo(index, False, m, f"{rel} digest mismatch")
        return GenerationInfo(index, True, m)

    def scan(self, verify_digests: bool = False) -> list[GenerationInfo]:
        return [self.validate(i, verify_digests) for i in self._indices(GENERATIONS)]

    def latest_committed(self, verify_digests: bool = False) -> GenerationId | None:
        """Highest generation whose manifest validates; staging is never considered."""
        for index in reversed(self._indices(GENERATIONS)):
            info = self.validate(index, verify_digests)
            if info.valid:
                return info.manifest.generation
            warnings.warn(f"generation {index} rejected: {info.problem}", ValidationWarning, stacklevel=2)
        return None

    def recover(self, verify_digests: bool = False) -> GenerationId | None:
        """Discard every staging directory and return the latest committed generation."""
        with self._lock:
            for index in self._indices(STAGING):
                self.abort_generation(index)
            tmp = os.path.join(self.root, COUNTER + ".tmp")
            if self.fs.exists(tmp):
                self.fs.remove(tmp)
            return self.latest_committed(verify_digests)

    # -- retention -------------------------------------------------------
    def prune(self, keep_k: int | None = None) -> list[GenerationId]:
        """Delete all but the ``keep_k`` newest valid generations; never the latest."""
        keep_k = self.keep if keep_k is None else keep_k
        if keep_k < 1:
            raise ValueError("keep_k must be at least 1")
        removed = []
        with self._lock:
            infos = self.scan()
            valid = [i for i in infos if i.valid]
            if not valid:
                return removed
            kept = {i.index for i in valid[-keep_k:]}
            latest = valid[-1].index
            for info in infos:
                if info.index in kept or info.index > latest:
                    continue
                try:
                    self._remove_generation(info)
                    removed.append(info.manifest.generation if info.manifest else GenerationId(info.index))
                except OSError as e:
                    log.warning("prune of generation %d failed: %s", info.index, e)
        return removed

    def _remove_generation(self, info: GenerationInfo) -> None:
        fs = self.fs
        base = self.generation_path(info.index)
        for sub in ("images", "precious"):
            d = os.path.join(base, sub)
            if fs.exists(d):
                for name in fs.listdir(d):
                    fs.remove(os.path.join(d, name))
        self.hooks.hit("during_prune", index=info.index)
        if fs.exists(os.path.join(base, MANIFEST)):
            fs.remove(os.path.join(base, MANIFEST))
        fs.rmtree(base)
        fs.fsync_dir(os.path.join(self.root, GENERATIONS))

    # -- restore input ---------------------------------------------------
    def load_generation(self, gen: GenerationId | int, verify: bool = True) -> "LoadedGeneration":
        index = gen.index if isinstance(gen, GenerationId) else gen
        if not self.fs.exists(self.generation_path(index)):
            raise NotFound(f"generation {index} is not committed")
        info = self.validate(index)
        if not info.valid:
            raise NotFound(f"generation {index} does not validate: {info.problem}")
        loaded = LoadedGeneration(self, info.manifest)
        if verify:
            loaded.verify()
        return loaded


@dataclass
class LoadedGeneration:
    store: GenerationStore
    manifest: CheckpointManifest
    base: str = field(init=False)

    def __post_init__(self):
        self.base = self.store.generation_path(self.manifest.index)

    def verify(self) -> None:
        """Check every digest before anything is handed to a restore."""
        for rel, digest in self._items():
            if self.store.fs.sha256(os.path.join(self.base, rel)) != digest:
                raise CorruptImage(f"generation {self.manifest.index}: {rel} digest mismatch")

    def _items(self):
        for im in self.manifest.images:
            yield im.relative_path, im.checksum
        for p in self.manifest.precious:
            yield p.store_path, p.checksum

    def _read(self, rel: str, digest: str) -> bytes:
        data = self.store.fs.read_bytes(os.path.join(self.base, rel))
        if hashlib.sha256(data).hexdigest() != digest:
            raise CorruptImage(f"generation {self.manifest.index}: {rel} digest mismatch")
        return data

    def image_bytes(self, process_id: int) -> bytes:
        im = self.manifest.image(process_id)
        return self._read(im.relative_path, im.checksum)

    def precious_bytes(self, record: PreciousFileRecord) -> bytes:
        return self._read(record.store_path, record.checksum)


# ---------------------------------------------------------------------------
# Overwrite-in-place baseline
#
# current/LAYOUT                  process_count
# current/images/<pid>.meta       GCKO <index> <bytes> <sha256> <pid>
# current/images/<pid>.img        raw image bytes
# current/precious/<key>.meta     GCKO <index> <bytes> <sha256> <lifecycle> <original path>
# current/precious/<key>.bin
#
# Each file pair is rewritten in place (meta first, then body).  A body whose
# size or digest disagrees with its meta line is torn.


OVERWRITE_MAGIC = "GCKO"


@dataclass
class OverwriteRecovery:
    generation: int | None
    mixed: bool
    files: dict[str, int | None]
    problem: str = ""

    @property
    def recoverable(self) -> bool:
        return self.generation is not None


class OverwriteHandle:
    """Writes straight over the previous images; nothing protects a half-done instance."""

    def __init__(self, store: "OverwriteStore", index: int, process_count: int):
        self.store = store
        self.generation = GenerationId(index, store.wallclock())
        self.process_count = process_count

    @property
    def index(self) -> int:
        return self.generation.index

    def _overwrite(self, rel: str, content, tag: tuple, extra: str) -> tuple[int, str]:
        chunks = list(iter_chunks(content))
        h = hashlib.sha256()
        for c in chunks:
            h.update(c)
        size, digest = sum(len(c) for c in chunks), h.hexdigest()
        fs = self.store.fs
        path = os.path.join(self.store.root, "current", rel)
        meta = f"{OVERWRITE_MAGIC}\t{self.index}\t{size}\t{digest}\t{extra}\n".encode()
        try:
            _write_small(fs, os.path.splitext(path)[0] + ".meta", meta)
            write_stream(fs, path, chunks, tag, self.store.hooks, exclusive=False, digest=digest)
            fs.fsync_dir(os.path.dirname(path))
        except OSError as e:
            raise StorageError(f"overwriting {rel}: {e}") from e
        return size, digest

    def stage_image(self, process_id: int, content) -> ProcessImage:
        rel = f"images/{process_id}.img"
        size, digest = self._overwrite(rel, content, ("image", process_id), str(process_id))
        return ProcessImage(process_id, size, digest, rel)

    def stage_precious(self, original_path, content, lifecycle=Lifecycle.LIVE) -> PreciousFileRecord:
        if isinstance(original_path, PreciousFileRecord):
            lifecycle = original_path.lifecycle
            original_path = original_path.original_path
        lifecycle = Lifecycle(lifecycle)
        rel = f"precious/{precious_key(original_path)}.bin"
        extra = f"{lifecycle.value}\t{quote(original_path, safe='/')}"
        size, digest = self._overwrite(rel, content, ("precious", original_path), extra)
        return PreciousFileRecord(original_path, size, digest, lifecycle, rel)


class OverwriteStore:
    def __init__(self, root: str, fs=None, hooks: FaultHooks = NO_FAULTS, wallclock=time.time):
        self.root = root
        self.fs = fs if fs is not None else RealFS()
        self.hooks = hooks
        self.wallclock = wallclock
        for sub in ("current/images", "current/precious"):
            self.fs.makedirs(os.path.join(root, sub))
        for d in (os.path.dirname(root.rstrip("/")) or "/", root, os.path.join(root, "current")):
            self.fs.fsync_dir(d)

    def allocate_generation(self) -> GenerationId:
        """One past the highest instance index found in any meta file."""
        highest = -1
        base = os.path.join(self.root, "current")
        for sub in ("images", "precious"):
            d = os.path.join(base, sub)
            for name in self.fs.listdir(d) if self.fs.exists(d) else ():
                if name.endswith(".meta"):
                    parts = self.fs.read_bytes(os.path.join(d, name)).decode("utf-8", "replace").split("\t")
                    if len(parts) > 1 and parts[0] == OVERWRITE_MAGIC and parts[1].isdigit():
                        highest = max(highest, int(parts[1]))
        return GenerationId(highest + 1, self.wallclock())

    def begin(self, index: int, process_count: int) -> OverwriteHandle:
        layout = os.path.join(self.root, "current", "LAYOUT")
        _write_small(self.fs, layout, f"process_count\t{process_count}\n".encode())
        self.fs.fsync_dir(os.path.dirname(layout))
        return OverwriteHandle(self, index, process_count)

    def attach(self, index: int) -> OverwriteHandle:
        return OverwriteHandle(self, index, 0)

    def recover(self) -> OverwriteRecovery:
        """A set is restorable only if every file is complete and from one instance."""
        fs = self.fs
        base = os.path.join(self.root, "current")
        try:
            m = int(fs.read_bytes(os.path.join(base, "LAYOUT")).decode().split("\t")[1])
        except (OSError, ValueError, IndexError):
            return OverwriteRecovery(None, False, {}, "no layout")
        rels = [f"images/{pid}.img" for pid in range(m)]
        rels += [f"precious/{n}" for n in fs.listdir(os.path.join(base, "precious")) if n.endswith(".bin")]
        files: dict[str, int | None] = {}
        problems = []
        for rel in rels:
            files[rel] = self._complete_generation(os.path.join(base, rel))
            if files[rel] is None:
                problems.append(f"{rel} missing or torn")
        gens = {g for g in files.values() if g is not None}
        if not problems and len(gens) == 1:
            return OverwriteRecovery(gens.pop(), False, files)
        mixed = len(gens) > 1 or (bool(problems) and bool(gens))
        return OverwriteRecovery(None, mixed, files, "; ".join(problems) or f"instances {sorted(gens)}")

    def _complete_generation(self, path: str) -> int | None:
        fs = self.fs
        meta = os.path.splitext(path)[0] + ".meta"
        if not (fs.exists(path) and fs.exists(meta)):
            return None
        parts = fs.read_bytes(meta).decode("utf-8", "replace").rstrip("\n").split("\t")
        if len(parts) < 4 or parts[0] != OVERWRITE_MAGIC:
            return None
        try:
            index, size = int(parts[1]), int(parts[2])
        except ValueError:
            return None
        if fs.size(path) != size or fs.sha256(path) != parts[3]:
            return None
        return index
