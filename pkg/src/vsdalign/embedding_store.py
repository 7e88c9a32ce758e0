"""EMB1 on-disk embedding format, pairing manifest, and row normalization.

File layout: magic ``EMB1`` (4 bytes), u32-LE row count n, u32-LE dimension d,
u8 modality tag, then n*d float32-LE values row-major. Row identifiers live in
a sibling ``<stem>.ids.json`` file keyed by row index. In-memory arithmetic is
float64; float32 is the storage type only.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    EmptySequence,
    FormatError,
    ManifestMismatch,
    NonFiniteValue,
    TruncatedFile,
)
from .numerics import l2_normalize_rows

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sIIB")  # magic, n, d, modality tag
HEADER_SIZE = _HEADER.size  # 13 bytes

MODALITY_TAGS = {"image": 0, "text": 1, "vsd": 2}
TAG_MODALITIES = {v: k for k, v in MODALITY_TAGS.items()}


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory plus rename.

    A killed process never leaves a partially written file under `path`.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ids_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".ids.json")


@dataclass(frozen=True)
class EmbeddingSet:
    """An n x d block of one modality's embeddings plus row identifiers.

    Immutable after construction; the data buffer is marked read-only so the
    set can be shared across threads.
    """

    data: np.ndarray
    modality: str
    ids: tuple[str, ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise FormatError(f"embedding data must be 2-D, got shape {data.shape}")
        if self.modality not in MODALITY_TAGS:
            raise FormatError(f"unknown modality {self.modality!r}")
        if not np.isfinite(data).all():
            i, j = np.argwhere(~np.isfinite(data))[0]
            raise NonFiniteValue(f"embedding row {i}, column {j}")
        if len(self.ids) != data.shape[0]:
            raise FormatError(
                f"{len(self.ids)} ids for {data.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("duplicate ids in embedding set")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def row_index(self) -> dict[str, int]:
        return {rid: i for i, rid in enumerate(self.ids)}

    def normalize(self) -> "EmbeddingSet":
        """Return a copy with unit-L2 rows; rejects all-zero rows."""
        return EmbeddingSet(l2_normalize_rows(self.data), self.modality, self.ids)


def default_ids(n: int) -> tuple[str, ...]:
    return tuple(f"row{i}" for i in range(n))


def save_embeddings(es: EmbeddingSet, path: str | Path) -> None:
    """Write EMB1 file plus the ids sidecar, both atomically."""
    header = _HEADER.pack(MAGIC, es.n, es.d, MODALITY_TAGS[es.modality])
    body = np.ascontiguousarray(es.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + body)
    sidecar = json.dumps({"ids": list(es.ids)}, indent=0).encode()
    atomic_write_bytes(ids_path(path), sidecar)


def load_embeddings(path: str | Path) -> EmbeddingSet:
    """Parse an EMB1 file; errors carry the byte offset of the defect."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        if raw[: min(4, len(raw))] != MAGIC[: min(4, len(raw))]:
            raise BadMagic(path, raw[:4])
        raise TruncatedFile(path, len(raw), HEADER_SIZE)
    magic, n, d, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(path, magic)
    if tag not in TAG_MODALITIES:
        raise FormatError(f"{path}: unknown modality tag {tag} at byte offset 12")
    expected = HEADER_SIZE + 4 * n * d
    if len(raw) < expected:
        raise TruncatedFile(path, len(raw), expected)
    if len(raw) > expected:
        raise FormatError(
            f"{path}: {len(raw)} bytes but header (n={n}, d={d}) implies {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER_SIZE)
    finite = np.isfinite(values)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise NonFiniteValue(str(path), offset=HEADER_SIZE + 4 * idx)
    sidecar = ids_path(path)
    if sidecar.exists():
        ids = tuple(json.loads(sidecar.read_text())["ids"])
    else:
        ids = default_ids(n)
    return EmbeddingSet(values.astype(np.float64).reshape(n, d), TAG_MODALITIES[tag], ids)


def mean_pool(sequence: np.ndarray) -> np.ndarray:
    """Average an L x d token sequence into a single d-vector (float64)."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise EmptySequence(f"need an L x d sequence with L >= 1, got shape {seq.shape}")
    return seq.mean(axis=0)


@dataclass(frozen=True)
class PairManifest:
    """Image ids, (caption id, parent image id) pairs, and image -> vsd id map."""

    images: tuple[str, ...]
    captions: tuple[tuple[str, str], ...]
    vsd_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(
            self, "captions", tuple((str(c), str(i)) for c, i in self.captions)
        )

    def validate(self, require_five: bool = False, require_vsd: bool = False) -> None:
        image_set = set(self.images)
        if len(image_set) != len(self.images):
            raise ManifestMismatch("duplicate image ids in manifest")
        counts: dict[str, int] = {iid: 0 for iid in self.images}
        seen_caps = set()
        for cid, iid in self.captions:
            if cid in seen_caps:
                raise ManifestMismatch(f"duplicate caption id {cid!r}")
            seen_caps.add(cid)
            if iid not in image_set:
                raise ManifestMismatch(f"caption {cid!r} references unknown image {iid!r}")
            counts[iid] += 1
        for iid, c in counts.items():
            if c < 1:
                raise ManifestMismatch(f"image {iid!r} has no captions")
            if require_five and c != 5:
                raise ManifestMismatch(f"image {iid!r} has {c} captions, expected 5")
        if require_vsd:
            missing = image_set - set(self.vsd_map)
            if missing:
                raise ManifestMismatch(
                    f"vsd_map missing entries for {len(missing)} images, e.g. {sorted(missing)[0]!r}"
                )

    def captions_per_image(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {iid: [] for iid in self.images}
        for cid, iid in self.captions:
            out[iid].append(cid)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "images": list(self.images),
                "captions": [[c, i] for c, i in self.captions],
                "vsd_map": dict(self.vsd_map),
            },
            indent=1,
        )

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, self.to_json().encode())

    @classmethod
    def load(cls, path: str | Path) -> "PairManifest":
        try:
            obj = json.loads(Path(path).read_text())
            return cls(
                images=tuple(obj["images"]),
                captions=tuple((c, i) for c, i in obj["captions"]),
                vsd_map=dict(obj.get("vsd_map", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestMismatch(f"{path}: malformed manifest ({exc})") from exc
