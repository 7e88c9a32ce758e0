"""Two-stage description generation, encoding, and dataset export.

Stage 1 asks the backend for candidate captions when none are supplied (so
training and test-time inputs share one distribution); stage 2 conditions on
the image, the captions, and the description prompt. Records carry full
provenance and a hash that makes reruns skip finished work.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backends import MllmBackend
from .emb1 import atomic_write_bytes, write_emb1, write_manifest
from .encoders import TokenEncoder
from .errors import (
    BackendUnavailable,
    DatasetError,
    DimensionDrift,
    EmptyGeneration,
)

log = logging.getLogger("vsd_ingest")

DESCRIPTION_PROMPT = (
    "Given an image {image} and associated captions {captions}, generate a "
    "comprehensive visual semantic description (15-30 words) by integrating "
    "visual elements and textual annotations to capture the main scene, key "
    "objects, primary action, and significant visual details."
)
CAPTION_PROMPT = (
    "List five short captions describing the main scene, objects, and actions "
    "in the image, one per line."
)
WORD_TARGET = (15, 30)
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.5  # seconds, doubled per attempt


@dataclass(frozen=True)
class VsdRecord:
    image_id: str
    vsd_text: str
    generated_captions: tuple[str, ...]
    stage1_skipped: bool
    backend_name: str
    prompt_hash: str
    word_count: int

    def to_json(self) -> str:
        payload = asdict(self)
        payload["generated_captions"] = list(self.generated_captions)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "VsdRecord":
        obj = json.loads(line)
        obj["generated_captions"] = tuple(obj["generated_captions"])
        return cls(**obj)


def provenance_hash(image_id: str, captions: tuple[str, ...] | None,
                    backend_name: str) -> str:
    blob = json.dumps(
        {
            "image": image_id,
            "captions": list(captions) if captions is not None else None,
            "backend": backend_name,
            "caption_prompt": CAPTION_PROMPT,
            "description_prompt": DESCRIPTION_PROMPT,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _call_with_retry(backend: MllmBackend, prompt: str, image_ref: str,
                     sleep=time.sleep) -> str:
    last: Exception | None = None
    for attempt in range(RETRY_ATTEMPTS):
        if attempt:
            sleep(RETRY_BASE_DELAY * 2 ** (attempt - 1))
        try:
            text = backend.generate(prompt, image_ref).strip()
        except BackendUnavailable as exc:
            last = exc
            continue
        if text:
            return text
        last = EmptyGeneration(f"backend returned empty text for {image_ref!r}")
    assert last is not None
    raise last


def generate_vsd(
    image_ref: str,
    captions: tuple[str, ...] | None,
    backend: MllmBackend,
    image_id: str | None = None,
    sleep=time.sleep,
) -> VsdRecord:
    """Produce one description record, running stage 1 only when captions are
    missing. Transient backend failures retry with exponential backoff
    (0.5 s, 1 s) before the final error propagates."""
    image_id = image_id if image_id is not None else image_ref
    if captions is None:
        raw = _call_with_retry(backend, CAPTION_PROMPT, image_ref, sleep=sleep)
        generated = tuple(line.strip() for line in raw.splitlines() if line.strip())
        if not generated:
            raise EmptyGeneration(f"stage 1 produced no captions for {image_ref!r}")
        used, skipped = generated, False
    else:
        used, skipped = tuple(captions), True
        generated = ()
    prompt = DESCRIPTION_PROMPT.format(image=image_ref, captions="; ".join(used))
    vsd_text = _call_with_retry(backend, prompt, image_ref, sleep=sleep)
    words = len(vsd_text.split())
    if not WORD_TARGET[0] <= words <= WORD_TARGET[1]:
        log.warning(
            "description for %s has %d words, outside the %d-%d target",
            image_id, words, *WORD_TARGET,
        )
    return VsdRecord(
        image_id=image_id,
        vsd_text=vsd_text,
        generated_captions=generated,
        stage1_skipped=skipped,
        backend_name=backend.name,
        prompt_hash=hashlib.sha256(prompt.encode()).hexdigest(),
        word_count=words,
    )


def mean_pooled_unit(tokens: np.ndarray) -> np.ndarray:
    """Average an L x d token sequence and scale to unit norm."""
    seq = np.asarray(tokens, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise EmptyGeneration(f"encoder returned shape {seq.shape}")
    pooled = seq.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise EmptyGeneration("mean-pooled vector has zero norm")
    return pooled / norm


def _encode_rows(texts: list[str], encoder: TokenEncoder, where: str) -> np.ndarray:
    rows = []
    for i, text in enumerate(texts):
        tokens = np.asarray(encoder.encode(text), dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != encoder.dim:
            raise DimensionDrift(encoder.dim, tokens.shape[-1], f"{where}[{i}]")
        rows.append(mean_pooled_unit(tokens))
    return np.vstack(rows)


def encode_and_export(
    records: list[VsdRecord],
    captions: list[tuple[str, str, str]],
    encoder: TokenEncoder,
    out_dir: str | Path,
) -> dict[str, Path]:
    """Encode descriptions plus original captions and write the dataset.

    `captions` holds (caption_id, image_id, caption_text) triples; captions
    and descriptions go through the same encoder. Outputs `vsd.emb1`,
    `texts.emb1`, and `manifest.json` under `out_dir`, all loadable by the
    alignment toolkit without validation errors.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_ids = [r.image_id for r in records]
    vsd_ids = [f"vsd_{iid}" for iid in image_ids]
    vsd_rows = _encode_rows([r.vsd_text for r in records], encoder, "descriptions")
    cap_rows = _encode_rows([c[2] for c in captions], encoder, "captions")
    paths = {
        "vsd": out / "vsd.emb1",
        "texts": out / "texts.emb1",
        "manifest": out / "manifest.json",
    }
    write_emb1(paths["vsd"], vsd_rows, "vsd", vsd_ids)
    write_emb1(paths["texts"], cap_rows, "text", [c[0] for c in captions])
    write_manifest(
        paths["manifest"],
        images=image_ids,
        captions=[(c[0], c[1]) for c in captions],
        vsd_map=dict(zip(image_ids, vsd_ids)),
    )
    return paths


def load_dataset_description(path: str | Path) -> list[dict]:
    """Read the input listing: {"images": [{"id", "path", "captions"?}, ...]}."""
    try:
        obj = json.loads(Path(path).read_text())
        entries = obj["images"]
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"{path}: unreadable dataset description ({exc})") from exc
    seen = set()
    for e in entries:
        if "id" not in e or "path" not in e:
            raise DatasetError(f"{path}: every image entry needs id and path")
        if e["id"] in seen:
            raise DatasetError(f"{path}: duplicate image id {e['id']!r}")
        seen.add(e["id"])
    return entries


def run_pipeline(
    entries: list[dict],
    backend: MllmBackend,
    encoder: TokenEncoder,
    out_dir: str | Path,
    max_workers: int = 4,
    sleep=time.sleep,
) -> list[VsdRecord]:
    """Generate records for every entry (resumable), then encode and export.

    Finished records live in `records.jsonl` keyed by provenance hash; reruns
    regenerate only what is missing. Generation uses a bounded worker pool;
    results are ordered by the input listing, so output bytes do not depend
    on completion order.
    """
    if not entries:
        raise DatasetError("dataset listing holds no images")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = out / "records.jsonl"
    done: dict[str, VsdRecord] = {}
    if store.exists():
        for line in store.read_text().splitlines():
            obj = json.loads(line)
            done[obj["provenance"]] = VsdRecord.from_json(
                json.dumps(obj["record"])
            )

    keys = []
    todo = []
    for e in entries:
        caps = tuple(e["captions"]) if e.get("captions") else None
        key = provenance_hash(e["id"], caps, backend.name)
        keys.append(key)
        if key not in done:
            todo.append((key, e, caps))

    if todo:
        def work(item):
            key, e, caps = item
            return key, generate_vsd(
                e["path"], caps, backend, image_id=e["id"], sleep=sleep
            )

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            fresh = list(pool.map(work, todo))
        done.update(fresh)
        lines = "".join(
            json.dumps(
                {"provenance": k, "record": json.loads(done[k].to_json())},
                sort_keys=True,
            ) + "\n"
            for k in keys
        )
        atomic_write_bytes(store, lines.encode())

    records = [done[k] for k in keys]
    captions = []
    for i, e in enumerate(entries):
        source = e.get("captions") or records[i].generated_captions
        for j, text in enumerate(source):
            captions.append((f"cap_{e['id']}_{j}", e["id"], text))
    encode_and_export(records, captions, encoder, out)
    return records
