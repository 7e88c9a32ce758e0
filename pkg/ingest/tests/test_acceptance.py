"""Acceptance: mock-backend byte determinism, and every exported artifact
passing the alignment toolkit's own load/inspect validation."""
import json
import subprocess
import sys

from vsd_ingest.cli import main as ingest_main


def write_listing(path, n=6):
    entries = [
        {
            "id": f"i{i}",
            "path": f"images/{i:03d}.jpg",
            "captions": [f"view {i} one", f"view {i} two", f"view {i} three"],
        }
        for i in range(n)
    ]
    path.write_text(json.dumps({"images": entries}))
    return path


def run_ingest(listing, out):
    rc = ingest_main([
        "run", "--dataset", str(listing), "--out", str(out),
        "--backend", "mock", "--encoder", "mock", "--dim", "24",
        "--max-workers", "3",
    ])
    assert rc == 0


def test_mock_backend_output_is_byte_identical(tmp_path, capsys):
    listing = write_listing(tmp_path / "ds.json")
    a, b = tmp_path / "a", tmp_path / "b"
    run_ingest(listing, a)
    run_ingest(listing, b)
    files_a = {p.name: p.read_bytes() for p in sorted(a.iterdir())}
    files_b = {p.name: p.read_bytes() for p in sorted(b.iterdir())}
    assert set(files_a) == {
        "vsd.emb1", "vsd.ids.json", "texts.emb1", "texts.ids.json",
        "manifest.json", "records.jsonl",
    }
    assert files_a == files_b
    print("PASS ingest-determinism: two mock runs byte-identical across "
          f"{len(files_a)} artifacts")


def test_artifacts_pass_primary_validation(tmp_path):
    listing = write_listing(tmp_path / "ds.json")
    out = tmp_path / "out"
    run_ingest(listing, out)

    # load through the alignment toolkit's public API: zero validation errors
    from vsdalign.embedding_store import PairManifest, load_embeddings

    vsd = load_embeddings(out / "vsd.emb1")
    texts = load_embeddings(out / "texts.emb1")
    assert vsd.modality == "vsd" and texts.modality == "text"
    assert vsd.n == 6 and texts.n == 18 and vsd.d == texts.d == 24
    manifest = PairManifest.load(out / "manifest.json")
    manifest.validate(require_vsd=True)
    assert set(manifest.vsd_map.values()) == set(vsd.ids)

    # and through its CLI inspect entry point
    proc = subprocess.run(
        [sys.executable, "-m", "vsdalign.cli", "inspect",
         str(out / "vsd.emb1"), str(out / "texts.emb1"),
         str(out / "manifest.json")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("ok") == 3
    print("PASS ingest-validation: EMB1 + manifest load and inspect cleanly "
          "through the alignment toolkit")
