import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vsdalign import embedding_store as store
from vsdalign.embedding_store import (
    EmbeddingSet,
    PairManifest,
    load_embeddings,
    mean_pool,
    save_embeddings,
)
from vsdalign.errors import (
    BadMagic,
    EmptySequence,
    FormatError,
    ManifestMismatch,
    NonFiniteValue,
    TruncatedFile,
    ZeroRow,
)


def make_set(data, modality="image"):
    data = np.asarray(data, dtype=np.float64)
    return EmbeddingSet(data, modality, tuple(f"id{i}" for i in range(data.shape[0])))


class TestFileFormat:
    def test_round_trip_values_bit_identical(self, tmp_path):
        values = np.array([[1.5, -2.25, 3.0], [0.1, 0.2, 0.3]], dtype=np.float32)
        es = make_set(values)
        path = tmp_path / "x.emb1"
        save_embeddings(es, path)
        loaded = load_embeddings(path)
        assert loaded.n == 2 and loaded.d == 3
        assert loaded.modality == "image"
        assert loaded.ids == es.ids
        # float32 storage: loaded values must carry the exact written bits
        assert np.array_equal(loaded.data.astype(np.float32), values)

    def test_truncation_after_five_of_six_values(self, tmp_path):
        es = make_set(np.arange(6, dtype=float).reshape(2, 3))
        path = tmp_path / "x.emb1"
        save_embeddings(es, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # drop the final float32
        with pytest.raises(TruncatedFile) as exc:
            load_embeddings(path)
        assert exc.value.offset == len(raw) - 4

    def test_write_load_write_round_trip_bytes(self, tmp_path):
        # round-trip oracle: write(load(write(X))) == write(X) byte-for-byte
        rng = np.random.Generator(np.random.PCG64(7))
        es = EmbeddingSet(
            rng.standard_normal((7, 5)), "vsd", tuple(f"v{i}" for i in range(7))
        )
        p1 = tmp_path / "a.emb1"
        p2 = tmp_path / "b.emb1"
        save_embeddings(es, p1)
        save_embeddings(load_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert store.ids_path(p1).read_bytes() == store.ids_path(p2).read_bytes()

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = tmp_path / "x.emb1"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(BadMagic) as exc:
            load_embeddings(path)
        assert exc.value.offset == 0

    def test_nonfinite_value_names_byte_offset(self, tmp_path):
        header = struct.pack("<4sIIB", b"EMB1", 2, 2, 0)
        vals = np.array([1.0, 2.0, np.inf, 4.0], dtype="<f4")
        path = tmp_path / "x.emb1"
        path.write_bytes(header + vals.tobytes())
        with pytest.raises(NonFiniteValue) as exc:
            load_embeddings(path)
        assert exc.value.offset == 13 + 4 * 2

    def test_rejects_length_inconsistent_with_header(self, tmp_path):
        es = make_set(np.ones((2, 3)))
        path = tmp_path / "x.emb1"
        save_embeddings(es, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_missing_sidecar_generates_default_ids(self, tmp_path):
        es = make_set(np.ones((2, 3)) * [1.0, 2.0, 3.0])
        path = tmp_path / "x.emb1"
        save_embeddings(es, path)
        store.ids_path(path).unlink()
        with pytest.raises(FormatError):
            # duplicate rows are fine, duplicate ids are not; defaults are unique
            EmbeddingSet(np.ones((2, 2)), "image", ("a", "a"))
        loaded = load_embeddings(path)
        assert loaded.ids == ("row0", "row1")


class TestNormalize:
    def test_three_four_five_triangle(self):
        es = make_set([[3.0, 4.0]])
        out = es.normalize()
        assert np.allclose(out.data, [[0.6, 0.8]], atol=0, rtol=0)

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0, 0.0]])
        out = make_set(row).normalize()
        assert np.abs(out.data - row).max() < 1e-7

    def test_random_matrix_row_norms(self):
        rng = np.random.Generator(np.random.PCG64(3))
        out = make_set(rng.standard_normal((10, 8))).normalize()
        norms = np.sqrt((out.data**2).sum(axis=1))  # direct norm computation
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_direction_preserved(self):
        rng = np.random.Generator(np.random.PCG64(4))
        data = rng.standard_normal((6, 5)) * 10
        out = make_set(data).normalize()
        cos = (out.data * data).sum(axis=1) / np.linalg.norm(data, axis=1)
        assert np.abs(cos - 1.0).max() < 1e-6

    def test_zero_row_rejected(self):
        es = make_set([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ZeroRow) as exc:
            es.normalize()
        assert exc.value.index == 1

    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(2, 5)),
            elements=st.floats(-1e3, 1e3, allow_nan=False).filter(lambda x: abs(x) > 1e-3),
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_normalize_idempotent(self, data):
        once = make_set(data).normalize()
        twice = once.normalize()
        assert np.abs(twice.data - once.data).max() < 1e-7


class TestMeanPool:
    def test_single_row_identity(self):
        row = np.array([[2.0, -1.0, 0.5]])
        assert np.array_equal(mean_pool(row), row[0])

    def test_symmetry(self):
        out = mean_pool(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert np.array_equal(out, [0.5, 0.5])

    def test_random_matches_direct_summation(self):
        rng = np.random.Generator(np.random.PCG64(5))
        seq = rng.standard_normal((6, 4))
        expected = np.array(
            [sum(float(seq[i, j]) for i in range(6)) / 6.0 for j in range(4)]
        )
        assert np.abs(mean_pool(seq) - expected).max() < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(EmptySequence):
            mean_pool(np.empty((0, 3)))


class TestPairManifest:
    def base(self):
        return PairManifest(
            images=("i0", "i1"),
            captions=(("c0", "i0"), ("c1", "i0"), ("c2", "i1")),
            vsd_map={"i0": "v0", "i1": "v1"},
        )

    def test_valid(self):
        self.base().validate(require_vsd=True)

    def test_caption_with_unknown_parent(self):
        m = PairManifest(images=("i0",), captions=(("c0", "ghost"),))
        with pytest.raises(ManifestMismatch):
            m.validate()

    def test_image_without_captions(self):
        m = PairManifest(images=("i0", "i1"), captions=(("c0", "i0"),))
        with pytest.raises(ManifestMismatch):
            m.validate()

    def test_five_captions_flag(self):
        with pytest.raises(ManifestMismatch):
            self.base().validate(require_five=True)

    def test_vsd_map_must_cover_images(self):
        m = PairManifest(
            images=("i0", "i1"),
            captions=(("c0", "i0"), ("c1", "i1")),
            vsd_map={"i0": "v0"},
        )
        with pytest.raises(ManifestMismatch):
            m.validate(require_vsd=True)

    def test_json_round_trip(self, tmp_path):
        m = self.base()
        path = tmp_path / "manifest.json"
        m.save(path)
        loaded = PairManifest.load(path)
        assert loaded == m
