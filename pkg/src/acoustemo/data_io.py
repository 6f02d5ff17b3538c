"""File formats: named-tensor container, JSONL transcripts and the corpus manifest.

Tensor container layout (all integers little-endian)::

    b"ACEM"  u32 version  u32 n_entries
    repeated n_entries times:
        u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f32 payload[prod(dims)]
"""

from __future__ import annotations

import functools
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .segmentation import (
    EmptySegment,
    FrameFeatureSequence,
    InvalidSpan,
    UtteranceSpan,
    as_fraction,
    map_span,
)

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "TensorFileError",
    "BadMagic",
    "VersionUnsupported",
    "Truncated",
    "DuplicateName",
    "MissingDialogue",
    "InvariantViolation",
    "write_tensor_file",
    "read_tensor_file",
    "text_to_tensor",
    "tensor_to_text",
    "TranscriptRecord",
    "write_transcript",
    "read_transcript",
    "Dialogue",
    "load_dialogue",
    "ManifestEntry",
    "Manifest",
]

MAGIC = b"ACEM"
FORMAT_VERSION = 1


class TensorFileError(ValueError):
    pass


class BadMagic(TensorFileError):
    pass


class VersionUnsupported(TensorFileError):
    pass


class Truncated(TensorFileError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class DuplicateName(TensorFileError):
    pass


class MissingDialogue(KeyError):
    pass


class InvariantViolation(ValueError):
    pass


# --------------------------------------------------------------------------
# Tensor container
# --------------------------------------------------------------------------


def write_tensor_file(path, tensors) -> None:
    """Write ``tensors`` (mapping or iterable of (name, array)) in insertion order."""
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateName(f"duplicate tensor names: {dup}")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, value in items:
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensor_file(path) -> dict[str, np.ndarray]:
    """Read a container into an ordered ``{name: float64 array}``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise Truncated(f"truncated {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagic(f"{path}: not an ACEM tensor file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: format version {version} (supported: {FORMAT_VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in out:
            raise DuplicateName(f"{path}: duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise TensorFileError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return out


def text_to_tensor(text: str) -> np.ndarray:
    """UTF-8 bytes as a float vector (exact in float32) for config records."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")


# --------------------------------------------------------------------------
# Transcripts
# --------------------------------------------------------------------------


@dataclass
class TranscriptRecord:
    dialogue_id: str
    index: int
    t_start: float
    t_end: float
    text: str
    gt_labels: list[str] | None = None

    def to_json(self) -> str:
        rec = {"dialogue_id": self.dialogue_id, "index": self.index,
               "t_start": self.t_start, "t_end": self.t_end, "text": self.text}
        if self.gt_labels is not None:
            rec["gt_labels"] = list(self.gt_labels)
        return json.dumps(rec, ensure_ascii=False)


def write_transcript(path, records: Iterable[TranscriptRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_transcript(path) -> dict[str, list[tuple[int, TranscriptRecord]]]:
    """Parse a transcript; returns ``{dialogue_id: [(line_no, record), ...]}``."""
    p = Path(path)
    return _read_transcript_cached(str(p.resolve()), p.stat().st_mtime_ns)


@functools.lru_cache(maxsize=8)
def _read_transcript_cached(path: str, _mtime: int):
    out: dict[str, list[tuple[int, TranscriptRecord]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = TranscriptRecord(
                    dialogue_id=str(obj["dialogue_id"]), index=int(obj["index"]),
                    t_start=float(obj["t_start"]), t_end=float(obj["t_end"]),
                    text=str(obj.get("text", "")), gt_labels=obj.get("gt_labels"))
            except (KeyError, TypeError, ValueError) as exc:
                raise InvariantViolation(f"{path}:{line_no}: malformed record ({exc})") from exc
            out.setdefault(rec.dialogue_id, []).append((line_no, rec))
    return out


@functools.lru_cache(maxsize=4)
def _read_features_cached(path: str, _mtime: int):
    return read_tensor_file(path)


def _features(path) -> dict[str, np.ndarray]:
    p = Path(path)
    return _read_features_cached(str(p.resolve()), p.stat().st_mtime_ns)


@dataclass
class Dialogue:
    dialogue_id: str
    sequence: FrameFeatureSequence
    utterances: list[UtteranceSpan]
    labels: frozenset[str]
    clamped: list[bool] = field(default_factory=list)


def feature_key(dialogue_id: str) -> str:
    return f"features/{dialogue_id}"


def rate_key(dialogue_id: str) -> str:
    return f"f_s/{dialogue_id}"


def load_dialogue(transcript_path, feature_path, dialogue_id: str) -> Dialogue:
    """Assemble and validate one dialogue's features, utterances and labels."""
    feats = _features(feature_path)
    key = feature_key(dialogue_id)
    if key not in feats:
        raise MissingDialogue(dialogue_id)
    f_s = as_fraction(float(feats[rate_key(dialogue_id)].reshape(-1)[0])) \
        if rate_key(dialogue_id) in feats else None
    if f_s is None:
        raise InvariantViolation(f"{feature_path}: no frame rate for {dialogue_id}")
    seq = FrameFeatureSequence(feats[key], f_s, source_id=dialogue_id)
    records = read_transcript(transcript_path).get(dialogue_id, [])
    utterances: list[UtteranceSpan] = []
    clamped: list[bool] = []
    labels: set[str] = set()
    for expected, (line_no, rec) in enumerate(records, start=1):
        where = f"{transcript_path}:{line_no}"
        if rec.index != expected:
            raise InvariantViolation(
                f"{where}: utterance index {rec.index}, expected {expected} (indices must be contiguous from 1)")
        try:
            span = UtteranceSpan(rec.index, rec.t_start, rec.t_end, rec.text)
            fr = map_span(span, seq.f_s, seq.length)
        except (InvalidSpan, EmptySegment) as exc:
            raise InvariantViolation(f"{where}: {exc}") from exc
        utterances.append(span)
        clamped.append(fr.clamped)
        labels.update(lab.strip().lower() for lab in (rec.gt_labels or []))
    return Dialogue(dialogue_id, seq, utterances, frozenset(labels), clamped)


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    dialogue_id: str
    split: str
    features: str
    transcript: str
    labels: list[str] = field(default_factory=list)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        entries = [ManifestEntry(**e) for e in obj["dialogues"]]
        return cls(entries, path.parent, obj.get("meta", {}))

    def save(self, path) -> None:
        obj = {"meta": self.meta, "dialogues": [e.__dict__ for e in self.entries]}
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n", encoding="utf-8")

    def ids(self, split: str | None = None) -> list[str]:
        return [e.dialogue_id for e in self.entries if split is None or e.split == split]

    def entry(self, dialogue_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.dialogue_id == dialogue_id:
                return e
        raise MissingDialogue(dialogue_id)

    def load_dialogue(self, dialogue_id: str) -> Dialogue:
        e = self.entry(dialogue_id)
        dlg = load_dialogue(self._resolve(e.transcript), self._resolve(e.features), dialogue_id)
        if not dlg.labels and e.labels:
            dlg.labels = frozenset(lab.strip().lower() for lab in e.labels)
        return dlg

    def _resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else str(self.root / p)
