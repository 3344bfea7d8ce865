"""
Storage module for the Wav2DF toolkit
Owns every on-disk format: waveform files, manifests, checkpoints, score files,
metric reports and delimited tables
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from errors import StorageError
from services.labels import Label, Split

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

WAVEFORM_MAGIC = b"W2DF"
CHECKPOINT_MAGIC = b"W2DFCKPT"
CHECKPOINT_VERSION = 1

# Checkpoint entry kinds
KIND_PARAMETER = 0
KIND_BUFFER = 1
KIND_STATE = 2

DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int64"): 3,
    np.dtype("int32"): 4,
    np.dtype("bool"): 5,
    np.dtype("uint8"): 6,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


# Waveforms

def write_waveform(path: PathLike, samples: np.ndarray, sample_rate: int) -> None:
    """Write float32 little-endian samples behind an 8-byte header (magic, u32 sample rate)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(samples, dtype="<f4").tobytes()
    path.write_bytes(WAVEFORM_MAGIC + struct.pack("<I", sample_rate) + data)


def read_waveform(path: PathLike) -> Tuple[np.ndarray, int]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"{path}: cannot read waveform ({e.strerror})") from None
    if len(raw) < 8:
        raise StorageError(f"{path}: truncated waveform header", offset=len(raw))
    if raw[:4] != WAVEFORM_MAGIC:
        raise StorageError(f"{path}: not a waveform file", offset=0)
    if (len(raw) - 8) % 4 != 0:
        raise StorageError(f"{path}: sample data is not a whole number of float32 values", offset=8)
    (sample_rate,) = struct.unpack("<I", raw[4:8])
    return np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float32), sample_rate


# Manifests

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    source: str
    label: Label
    split: Split


def write_manifest(path: PathLike, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{r.id}\t{r.source}\t{r.label.value}\t{r.split.value}\n" for r in records]
    path.write_text("".join(lines), encoding="utf-8")


def read_manifest(path: PathLike) -> List[ManifestRecord]:
    """
    Read a tab-separated manifest: id, recipe-or-path, label, split.

    Returns:
        list: records in file order; an empty file gives an empty list
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"{path}: cannot read manifest ({e.strerror})") from None

    records = []
    seen = set()
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise StorageError(f"{path}: expected 4 tab-separated fields, got {len(fields)}", line=number)
        utt_id, source, label, split = fields
        if not utt_id or not source:
            raise StorageError(f"{path}: empty id or source", line=number)
        if utt_id in seen:
            raise StorageError(f"{path}: duplicate id '{utt_id}'", line=number)
        try:
            record = ManifestRecord(utt_id, source, Label(label), Split(split))
        except ValueError:
            raise StorageError(f"{path}: unknown label '{label}' or split '{split}'", line=number) from None
        seen.add(utt_id)
        records.append(record)
    return records


# Checkpoints

@dataclass
class TensorEntry:
    name: str
    kind: int
    frozen: bool
    array: np.ndarray


class _Reader:

    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise StorageError(f"{self.path}: truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def write_checkpoint(path: PathLike, meta: Dict, entries: Sequence[TensorEntry]) -> None:
    """
    Write a versioned little-endian checkpoint.

    Layout: magic, u16 version, u32 meta length, sorted compact JSON meta, u32 entry count,
    then per entry: u16 name length, name, u8 kind, u8 frozen, u8 dtype code, u8 ndim,
    u64 dims, u64 byte count, raw data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(entries)))
    for entry in entries:
        array = np.asarray(entry.array, order="C")
        if array.dtype not in DTYPE_CODES:
            raise StorageError(f"{path}: unsupported dtype {array.dtype} for '{entry.name}'")
        name = entry.name.encode("utf-8")
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BBBB", entry.kind, int(entry.frozen), DTYPE_CODES[array.dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    path.write_bytes(b"".join(parts))


def read_checkpoint(path: PathLike) -> Tuple[Dict, List[TensorEntry]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"{path}: cannot read checkpoint ({e.strerror})") from None

    reader = _Reader(raw, path)
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise StorageError(f"{path}: not a checkpoint file", offset=0)
    version, meta_len = reader.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}", offset=len(CHECKPOINT_MAGIC))
    meta_offset = reader.pos
    try:
        meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise StorageError(f"{path}: corrupt checkpoint metadata", offset=meta_offset) from None

    (count,) = reader.unpack("<I", "entry count")
    entries = []
    for _ in range(count):
        start = reader.pos
        (name_len,) = reader.unpack("<H", "entry name length")
        name = reader.take(name_len, "entry name").decode("utf-8", errors="replace")
        kind, frozen, code, ndim = reader.unpack("<BBBB", f"entry '{name}'")
        if code not in CODE_DTYPES or kind not in (KIND_PARAMETER, KIND_BUFFER, KIND_STATE):
            raise StorageError(f"{path}: corrupt entry '{name}'", offset=start)
        shape = reader.unpack(f"<{ndim}Q", f"shape of '{name}'")
        (nbytes,) = reader.unpack("<Q", f"size of '{name}'")
        dtype = CODE_DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise StorageError(f"{path}: size of '{name}' does not match its shape", offset=start)
        data = reader.take(nbytes, f"data of '{name}'")
        array = np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        entries.append(TensorEntry(name, kind, bool(frozen), array))
    if reader.pos != len(raw):
        raise StorageError(f"{path}: trailing bytes after the last entry", offset=reader.pos)
    return meta, entries


# Score files

def write_scores(path: PathLike, scores: Sequence[Tuple[str, float]]) -> None:
    """One 'utt_id score' line per record; repr keeps every float exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{utt_id} {float(value)!r}\n" for utt_id, value in scores), encoding="utf-8")


def read_scores(path: PathLike) -> List[Tuple[str, float]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"{path}: cannot read score file ({e.strerror})") from None
    scores = []
    seen = set()
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise StorageError(f"{path}: expected 'utt_id score'", line=number)
        utt_id, value = fields
        try:
            value = float(value)
        except ValueError:
            raise StorageError(f"{path}: score '{value}' is not a number", line=number) from None
        if utt_id in seen:
            raise StorageError(f"{path}: duplicate id '{utt_id}'", line=number)
        seen.add(utt_id)
        scores.append((utt_id, value))
    return scores


# Reports, tables and logs

def format_value(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_report(path: PathLike, items: Dict[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{key}={format_value(value)}\n" for key, value in items.items()), encoding="utf-8")


def read_report(path: PathLike) -> Dict[str, str]:
    path = Path(path)
    items = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StorageError(f"{path}: expected key=value", line=number)
        items[key] = value
    return items


def write_table(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    lines.extend("\t".join(format_value(value) for value in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def append_log_line(path: PathLike, line: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(line.rstrip("\n") + "\n")
