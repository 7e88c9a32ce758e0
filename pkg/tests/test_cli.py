import json

import numpy as np
import pytest

from vsdalign.cli import main
from vsdalign.embedding_store import HEADER_SIZE, load_embeddings


def run(args):
    return main([str(a) for a in args])


def synth_args(out, n=16, d=8, fidelity=0.9, sigma=0.1, seed=0, cpi=5):
    return [
        "synth", "--out", out, "--n-images", n, "--captions-per-image", cpi,
        "--d", d, "--vsd-fidelity", fidelity, "--noise-sigma", sigma,
        "--seed", seed,
    ]


def read_all(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


class TestSynth:
    def test_same_spec_twice_is_bit_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(synth_args(a)) == 0
        assert run(synth_args(b)) == 0
        assert read_all(a) == read_all(b)

    def test_full_fidelity_no_noise_equals_image_values(self, tmp_path):
        out = tmp_path / "x"
        assert run(synth_args(out, fidelity=1.0, sigma=0.0)) == 0
        img = (out / "images.emb1").read_bytes()
        vsd = (out / "vsd.emb1").read_bytes()
        # headers differ in the modality tag; the value payload must be identical
        assert img[HEADER_SIZE:] == vsd[HEADER_SIZE:]

    def test_descriptions_correlate_with_matched_image(self, tmp_path):
        out = tmp_path / "x"
        assert run(synth_args(out, n=64, d=32, fidelity=0.9, sigma=0.1, seed=5)) == 0
        img = load_embeddings(out / "images.emb1").data
        vsd = load_embeddings(out / "vsd.emb1").data
        matched = (img * vsd).sum(axis=1).mean()
        cross = (img @ vsd.T)[~np.eye(64, dtype=bool)].mean()
        assert matched > cross

    def test_usage_error_exit_code(self, tmp_path):
        assert run(synth_args(tmp_path / "x", fidelity=1.5)) == 2


class TestTrainEval:
    def test_zero_lr_train_then_eval_matches_init(self, tmp_path, capsys):
        data = tmp_path / "data"
        runs = tmp_path / "runs"
        assert run(synth_args(data, n=12, d=8, sigma=0.3)) == 0
        assert run([
            "train", "--data", data, "--out", runs, "--lr", 0, "--epochs", 1,
            "--batch-size", 8, "--k", 4, "--seed", 2,
        ]) == 0
        capsys.readouterr()
        assert run(["eval", "--data", data, "--checkpoint", runs / "final.ckpt",
                    "--json"]) == 0
        final_report = json.loads(capsys.readouterr().out)
        assert run(["eval", "--data", data, "--checkpoint", runs / "init.ckpt",
                    "--json"]) == 0
        init_report = json.loads(capsys.readouterr().out)
        assert final_report == init_report

    def test_eval_identity_set_prints_perfect_recall(self, tmp_path, capsys):
        data = tmp_path / "data"
        runs = tmp_path / "runs"
        assert run(synth_args(data, n=12, d=8, fidelity=1.0, sigma=0.0)) == 0
        assert run(["train", "--data", data, "--out", runs, "--epochs", 1,
                    "--batch-size", 8, "--k", 4]) == 0
        capsys.readouterr()
        assert run(["eval", "--data", data, "--checkpoint", runs / "init.ckpt"]) == 0
        out = capsys.readouterr().out
        assert "100.0" in out and "600.0" in out

    def test_train_writes_jsonl_log(self, tmp_path):
        data = tmp_path / "data"
        runs = tmp_path / "runs"
        assert run(synth_args(data, n=12, d=8)) == 0
        assert run(["train", "--data", data, "--out", runs, "--epochs", 2,
                    "--batch-size", 8, "--k", 4]) == 0
        lines = (runs / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2 * (60 // 8)
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "batch", "isa", "psa", "total"}

    def test_text_aux_flag_round_trip(self, tmp_path, capsys):
        import numpy as np

        from vsdalign.embedding_store import EmbeddingSet, save_embeddings

        data = tmp_path / "data"
        runs = tmp_path / "runs"
        assert run(synth_args(data, n=12, d=8, sigma=0.4, seed=6)) == 0
        texts = load_embeddings(data / "texts.emb1")
        rng = np.random.Generator(np.random.PCG64(8))
        aux = EmbeddingSet(
            texts.data + 0.2 * rng.standard_normal(texts.data.shape),
            "text", texts.ids,
        )
        aux_path = tmp_path / "aux.emb1"
        save_embeddings(aux, aux_path)
        assert run(["train", "--data", data, "--out", runs, "--epochs", 2,
                    "--batch-size", 8, "--k", 4, "--text-aux", aux_path]) == 0
        capsys.readouterr()
        assert run(["eval", "--data", data, "--checkpoint", runs / "final.ckpt",
                    "--text-aux", aux_path, "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert 0 <= report["rsum"] <= 600


class TestCluster:
    def test_cluster_writes_bank_and_metadata(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run(synth_args(data, n=20, d=8)) == 0
        prefix = tmp_path / "protos"
        assert run(["cluster", "--embeddings", data / "vsd.emb1", "--k", 4,
                    "--seed", 9, "--out", prefix]) == 0
        bank = load_embeddings(tmp_path / "protos.emb1")
        assert bank.n == 4 and bank.d == 8 and bank.modality == "vsd"
        assert np.abs(np.linalg.norm(bank.data, axis=1) - 1).max() < 1e-6
        meta = json.loads((tmp_path / "protos.meta.json").read_text())
        assert meta["k"] == 4 and meta["seed"] == 9
        assert meta["iterations"] >= 1 and meta["inertia"] >= 0


class TestPresets:
    def test_paper_presets_map_to_published_values(self):
        from vsdalign.cli import _build_parser, _train_config

        parser = _build_parser()
        for flag, batch, k in (("--paper-flickr", 128, 896), ("--paper-coco", 256, 2560)):
            args = parser.parse_args(
                ["train", "--data", "d", "--out", "o", flag, "--lr", "5e-7"]
            )
            cfg = _train_config(args)
            assert (cfg.batch_size, cfg.k) == (batch, k)
            assert cfg.temperature == 0.1 and cfg.epochs == 25
            assert cfg.learning_rate == 5e-7  # untouched by the preset


class TestGradcheckCommand:
    def test_exit_zero_and_reports_error(self, capsys):
        assert run(["gradcheck", "--seed", 7, "--trials", 5]) == 0
        out = capsys.readouterr().out
        assert "overall" in out and "pass" in out


class TestInspect:
    def test_dataset_dir_and_files(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run(synth_args(data, n=6, d=4)) == 0
        assert run(["inspect", data]) == 0
        assert run(["inspect", data / "images.emb1", data / "manifest.json"]) == 0
        out = capsys.readouterr().out
        assert "EMB1 ok" in out and "manifest ok" in out

    def test_corrupt_file_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.emb1"
        bad.write_bytes(b"JUNKJUNKJUNKJUNK")
        assert run(["inspect", bad]) == 1
        err = capsys.readouterr().err
        diag = json.loads(err)
        assert diag["error"] == "BadMagic"

    def test_usage_error_is_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            run(["inspect"])  # missing required paths
        assert exc.value.code == 2
