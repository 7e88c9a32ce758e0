import json
import math

import numpy as np
import pytest

from vsd_ingest.backends import MockMllmBackend
from vsd_ingest.encoders import MockTokenEncoder
from vsd_ingest.errors import (
    BackendUnavailable,
    DatasetError,
    DimensionDrift,
    EmptyGeneration,
)
from vsd_ingest.pipeline import (
    CAPTION_PROMPT,
    DESCRIPTION_PROMPT,
    VsdRecord,
    encode_and_export,
    generate_vsd,
    load_dataset_description,
    mean_pooled_unit,
    provenance_hash,
    run_pipeline,
)


class FlakyBackend:
    """Fails a configurable number of times before succeeding."""

    name = "flaky"

    def __init__(self, failures, text="word " * 20):
        self.failures = failures
        self.text = text
        self.calls = 0

    def generate(self, prompt, image_ref):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendUnavailable("down")
        return self.text


class TestGenerateVsd:
    def test_with_captions_skips_stage_one(self):
        backend = MockMllmBackend()
        rec = generate_vsd("img.jpg", ("a dog", "a park"), backend, image_id="i0")
        assert rec.stage1_skipped
        assert rec.generated_captions == ()
        assert len(backend.calls) == 1
        prompt = backend.calls[0][0]
        assert prompt == DESCRIPTION_PROMPT.format(
            image="img.jpg", captions="a dog; a park"
        )
        assert rec.vsd_text
        assert rec.word_count == len(rec.vsd_text.split())

    def test_without_captions_runs_two_ordered_calls(self):
        backend = MockMllmBackend()
        rec = generate_vsd("img.jpg", None, backend, image_id="i0")
        assert not rec.stage1_skipped
        assert len(backend.calls) == 2
        assert backend.calls[0][0] == CAPTION_PROMPT
        assert backend.calls[1][0].startswith("Given an image")
        assert len(rec.generated_captions) == 5

    def test_retry_then_success_with_backoff(self):
        sleeps = []
        backend = FlakyBackend(failures=2)
        rec = generate_vsd("x", ("cap",), backend, sleep=sleeps.append)
        assert rec.vsd_text.startswith("word")
        assert sleeps == [0.5, 1.0]

    def test_backend_down_after_retries(self):
        backend = FlakyBackend(failures=99)
        with pytest.raises(BackendUnavailable):
            generate_vsd("x", ("cap",), backend, sleep=lambda _: None)
        assert backend.calls == 3

    def test_empty_generation_after_retries(self):
        backend = FlakyBackend(failures=0, text="  ")
        with pytest.raises(EmptyGeneration):
            generate_vsd("x", ("cap",), backend, sleep=lambda _: None)

    def test_word_count_outside_target_warns_but_keeps_record(self, caplog):
        backend = FlakyBackend(failures=0, text="too short")
        with caplog.at_level("WARNING", logger="vsd_ingest"):
            rec = generate_vsd("x", ("cap",), backend, sleep=lambda _: None)
        assert rec.word_count == 2
        assert any("outside" in m for m in caplog.messages)

    def test_record_json_round_trip(self):
        rec = generate_vsd("img.jpg", None, MockMllmBackend(), image_id="i9")
        assert VsdRecord.from_json(rec.to_json()) == rec


class TestMeanPool:
    def test_single_token_is_normalized_copy(self):
        out = mean_pooled_unit(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [0.6, 0.8])

    def test_two_token_basis_gives_diagonal_unit(self):
        out = mean_pooled_unit(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert np.allclose(out, [math.sqrt(2) / 2, math.sqrt(2) / 2])

    def test_empty_rejected(self):
        with pytest.raises(EmptyGeneration):
            mean_pooled_unit(np.empty((0, 4)))


class DriftingEncoder:
    name = "drift"
    dim = 4

    def encode(self, text):
        width = 4 if len(text) % 2 == 0 else 3
        return np.ones((2, width))


class TestEncodeExport:
    def test_dimension_drift_detected(self, tmp_path):
        rec = generate_vsd("a", ("c",), MockMllmBackend(), image_id="i0")
        with pytest.raises(DimensionDrift):
            encode_and_export(
                [rec], [("c0", "i0", "odd"), ("c1", "i0", "even")],
                DriftingEncoder(), tmp_path,
            )

    def test_export_shapes_and_unit_rows(self, tmp_path):
        backend = MockMllmBackend()
        recs = [
            generate_vsd(f"img{i}", ("one cap", "two cap"), backend, image_id=f"i{i}")
            for i in range(3)
        ]
        caps = [(f"c{i}{j}", f"i{i}", f"caption {i} {j}") for i in range(3) for j in range(2)]
        paths = encode_and_export(recs, caps, MockTokenEncoder(dim=16), tmp_path)
        raw = paths["vsd"].read_bytes()
        assert raw[:4] == b"EMB1"
        n = int.from_bytes(raw[4:8], "little")
        d = int.from_bytes(raw[8:12], "little")
        assert (n, d) == (3, 16)
        vals = np.frombuffer(raw, dtype="<f4", offset=13).reshape(3, 16)
        assert np.abs(np.linalg.norm(vals, axis=1) - 1).max() < 1e-6


def dataset_entries(n=4, with_captions=True):
    out = []
    for i in range(n):
        entry = {"id": f"i{i}", "path": f"images/{i}.jpg"}
        if with_captions:
            entry["captions"] = [f"caption {i} alpha", f"caption {i} beta"]
        out.append(entry)
    return out


class TestRunPipeline:
    def test_resume_skips_finished_records(self, tmp_path):
        entries = dataset_entries()
        first = MockMllmBackend()
        run_pipeline(entries, first, MockTokenEncoder(dim=8), tmp_path,
                     max_workers=1)
        assert len(first.calls) == len(entries)
        snapshot = {p.name: p.read_bytes() for p in tmp_path.iterdir()}

        second = MockMllmBackend()
        run_pipeline(entries, second, MockTokenEncoder(dim=8), tmp_path,
                     max_workers=1)
        assert second.calls == []  # everything keyed by provenance hash
        assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == snapshot

    def test_generated_captions_feed_text_export(self, tmp_path):
        entries = dataset_entries(n=2, with_captions=False)
        run_pipeline(entries, MockMllmBackend(), MockTokenEncoder(dim=8),
                     tmp_path, max_workers=1)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        # five stage-1 captions per image
        assert len(manifest["captions"]) == 10
        assert set(manifest["vsd_map"]) == {"i0", "i1"}

    def test_provenance_hash_depends_on_inputs(self):
        a = provenance_hash("i0", ("x",), "mock")
        assert a != provenance_hash("i1", ("x",), "mock")
        assert a != provenance_hash("i0", ("y",), "mock")
        assert a != provenance_hash("i0", None, "mock")
        assert a == provenance_hash("i0", ("x",), "mock")

    def test_dataset_description_validation(self, tmp_path):
        bad = tmp_path / "ds.json"
        bad.write_text(json.dumps({"images": [{"id": "a"}]}))
        with pytest.raises(DatasetError):
            load_dataset_description(bad)
        bad.write_text(json.dumps({"images": [
            {"id": "a", "path": "p"}, {"id": "a", "path": "q"},
        ]}))
        with pytest.raises(DatasetError):
            load_dataset_description(bad)
