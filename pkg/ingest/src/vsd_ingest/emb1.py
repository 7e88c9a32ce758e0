"""Writer for the EMB1 + manifest wire format consumed by the alignment
toolkit.

Layout: magic ``EMB1``, u32-LE row count, u32-LE dimension, u8 modality tag
(0 image, 1 text, 2 vsd), then n*d float32-LE values row-major; row ids go in
a sibling ``<stem>.ids.json``. Writes are temp-file-plus-rename atomic.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
MODALITY_TAGS = {"image": 0, "text": 1, "vsd": 2}


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
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


def write_emb1(path: str | Path, data: np.ndarray, modality: str, ids: list[str]) -> None:
    data = np.ascontiguousarray(data, dtype=np.float64)
    n, d = data.shape
    if len(ids) != n:
        raise ValueError(f"{len(ids)} ids for {n} rows")
    header = struct.pack("<4sIIB", MAGIC, n, d, MODALITY_TAGS[modality])
    atomic_write_bytes(path, header + data.astype("<f4").tobytes())
    sidecar = Path(path).with_suffix(".ids.json")
    atomic_write_bytes(sidecar, json.dumps({"ids": list(ids)}, indent=0).encode())


def write_manifest(
    path: str | Path,
    images: list[str],
    captions: list[tuple[str, str]],
    vsd_map: dict[str, str],
) -> None:
    payload = json.dumps(
        {
            "images": list(images),
            "captions": [[c, i] for c, i in captions],
            "vsd_map": dict(vsd_map),
        },
        indent=1,
    ).encode()
    atomic_write_bytes(path, payload)
