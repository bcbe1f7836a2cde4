"""Domain records of a checkpoint generation and their line-oriented text form.

A manifest is UTF-8, one record per line, fields separated by TAB::

    format          genckpt-manifest/1
    index           <generation index>
    created_at      <unix seconds, repr float>
    process_count   <m>
    total_bytes     <sum of image and precious sizes>
    phase           <name>  <milliseconds>            (zero or more)
    image           <pid>  <bytes>  <sha256>  <relative path>
    precious        <lifecycle>  <bytes>  <sha256>  <store path>  <original path, %-quoted>
    digest          <sha256 of every preceding byte>

Images are sorted by process id, precious records by original path.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from urllib.parse import quote, unquote

from .errors import ManifestFormatError

FORMAT = "genckpt-manifest/1"
EMPTY_SHA256 = hashlib.sha256(b"").hexdigest()


class Lifecycle(str, enum.Enum):
    LIVE = "live"
    DELETION_PENDING = "deletion_pending"


@dataclass(frozen=True, order=True)
class GenerationId:
    index: int
    created_at: float = 0.0

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("generation index must be non-negative")


@dataclass(frozen=True)
class ProcessImage:
    process_id: int
    byte_size: int
    checksum: str
    relative_path: str


@dataclass(frozen=True)
class PreciousFileRecord:
    original_path: str
    byte_size: int
    checksum: str
    lifecycle: Lifecycle = Lifecycle.LIVE
    store_path: str = ""


@dataclass
class CheckpointManifest:
    generation: GenerationId
    process_count: int
    images: list[ProcessImage]
    precious: list[PreciousFileRecord] = field(default_factory=list)
    phase_timings: dict[str, float] = field(default_factory=dict)
    total_bytes: int = -1

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda im: im.process_id)
        self.precious = sorted(self.precious, key=lambda r: r.original_path)
        computed = sum(i.byte_size for i in self.images) + sum(p.byte_size for p in self.precious)
        if self.total_bytes < 0:
            self.total_bytes = computed
        elif self.total_bytes != computed:
            raise ManifestFormatError(f"total_bytes {self.total_bytes} != computed {computed}")
        pids = [im.process_id for im in self.images]
        if len(pids) != self.process_count or len(set(pids)) != len(pids):
            raise ManifestFormatError(
                f"manifest lists images for {pids}, expected {self.process_count} distinct processes"
            )

    @property
    def index(self) -> int:
        return self.generation.index

    def image(self, process_id: int) -> ProcessImage:
        for im in self.images:
            if im.process_id == process_id:
                return im
        raise KeyError(process_id)


def image_line(im: ProcessImage) -> str:
    return f"image\t{im.process_id}\t{im.byte_size}\t{im.checksum}\t{im.relative_path}"


def precious_line(rec: PreciousFileRecord) -> str:
    return (
        f"precious\t{rec.lifecycle.value}\t{rec.byte_size}\t{rec.checksum}\t"
        f"{rec.store_path}\t{quote(rec.original_path, safe='/')}"
    )


def parse_item(line: str) -> ProcessImage | PreciousFileRecord:
    parts = line.rstrip("\n").split("\t")
    try:
        if parts[0] == "image" and len(parts) == 5:
            return ProcessImage(int(parts[1]), int(parts[2]), _hex(parts[3]), parts[4])
        if parts[0] == "precious" and len(parts) == 6:
            return PreciousFileRecord(
                original_path=unquote(parts[5]),
                byte_size=int(parts[2]),
                checksum=_hex(parts[3]),
                lifecycle=Lifecycle(parts[1]),
                store_path=parts[4],
            )
    except ValueError as e:
        raise ManifestFormatError(f"bad record {line!r}: {e}") from e
    raise ManifestFormatError(f"bad record {line!r}")


def _hex(s: str) -> str:
    if len(s) != 64 or any(c not in "0123456789abcdef" for c in s):
        raise ValueError(f"not a sha256 hex digest: {s!r}")
    return s


def encode(m: CheckpointManifest) -> bytes:
    lines = [
        f"format\t{FORMAT}",
        f"index\t{m.generation.index}",
        f"created_at\t{m.generation.created_at!r}",
        f"process_count\t{m.process_count}",
        f"total_bytes\t{m.total_bytes}",
    ]
    lines += [f"phase\t{name}\t{ms!r}" for name, ms in m.phase_timings.items()]
    lines += [image_line(im) for im in m.images]
    lines += [precious_line(p) for p in m.precious]
    body = "".join(line + "\n" for line in lines).encode("utf-8")
    return body + f"digest\t{hashlib.sha256(body).hexdigest()}\n".encode()


def decode(data: bytes) -> CheckpointManifest:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ManifestFormatError("manifest is not UTF-8") from e
    if not text.endswith("\n"):
        raise ManifestFormatError("manifest truncated")
    lines = text.split("\n")[:-1]
    if not lines or not lines[-1].startswith("digest\t"):
        raise ManifestFormatError("manifest has no digest trailer")
    body = "".join(line + "\n" for line in lines[:-1]).encode("utf-8")
    if hashlib.sha256(body).hexdigest() != lines[-1].split("\t", 1)[1]:
        raise ManifestFormatError("manifest digest mismatch")

    header: dict[str, str] = {}
    phases: dict[str, float] = {}
    items = []
    for line in lines[:-1]:
        key, _, rest = line.partition("\t")
        if key in ("image", "precious"):
            items.append(parse_item(line))
        elif key == "phase":
            name, _, ms = rest.partition("\t")
            phases[name] = float(ms)
        else:
            header[key] = rest
    if header.get("format") != FORMAT:
        raise ManifestFormatError(f"unknown manifest format {header.get('format')!r}")
    try:
        return CheckpointManifest(
            generation=GenerationId(int(header["index"]), float(header["created_at"])),
            process_count=int(header["process_count"]),
            images=[i for i in items if isinstance(i, ProcessImage)],
            precious=[i for i in items if isinstance(i, PreciousFileRecord)],
            phase_timings=phases,
            total_bytes=int(header["total_bytes"]),
        )
    except (KeyError, ValueError) as e:
        raise ManifestFormatError(f"bad manifest header: {e}") from e
