"""Embedding container, EMB1 round-trips, and the synthetic generators."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owlab.data import (ClassifierHead, EmbeddingSet, FormatError,
                        SyntheticSpec, TruncationError, gen_esn_samples,
                        gen_sphere_mixture, gen_unit_contributions,
                        read_embeddings, read_head, write_embeddings,
                        write_head)
from owlab.theory import EsnParams, esn_pdf


def roundtrip(es):
    buf = io.BytesIO()
    write_embeddings(es, buf)
    return read_embeddings(buf.getvalue())


class TestEmbeddingSet:
    def test_labels_length_enforced(self):
        with pytest.raises(ValueError):
            EmbeddingSet(np.zeros((3, 2)), np.array([0, 1]), False)

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError):
            EmbeddingSet(np.array([[1.0, 1.0]]), None, True)

    def test_unit_rows_accepted(self):
        es = EmbeddingSet(np.array([[0.6, 0.8]]), None, True)
        assert es.n == 1 and es.d == 2

    def test_vectors_held_as_float64(self):
        es = EmbeddingSet(np.zeros((2, 2), dtype=np.float32), None, False)
        assert es.vectors.dtype == np.float64


class TestWriteRead:
    def test_2x3_roundtrip(self):
        es = EmbeddingSet(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), None, False)
        back = roundtrip(es)
        np.testing.assert_array_equal(back.vectors, es.vectors)
        assert back.labels is None

    def test_empty_set_roundtrip(self):
        back = roundtrip(EmbeddingSet(np.zeros((0, 4)), None, False))
        assert back.n == 0 and back.d == 4

    def test_labels_roundtrip_exactly(self):
        es = EmbeddingSet(np.zeros((2, 2)), np.array([0, -1], dtype=np.int32), False)
        back = roundtrip(es)
        np.testing.assert_array_equal(back.labels, np.array([0, -1]))

    def test_payload_floats_bit_exact(self):
        # write quantizes to f4; a second pass through the format is the identity
        rng = np.random.default_rng(42)
        es = roundtrip(EmbeddingSet(rng.standard_normal((5, 3)), None, False))
        buf = io.BytesIO()
        write_embeddings(es, buf)
        first = buf.getvalue()
        buf2 = io.BytesIO()
        write_embeddings(read_embeddings(first), buf2)
        assert buf2.getvalue() == first

    def test_bad_magic_is_format_error(self):
        with pytest.raises(FormatError):
            read_embeddings(b"XXXX" + b"\x00" * 32)

    def test_truncated_payload(self):
        buf = io.BytesIO()
        write_embeddings(EmbeddingSet(np.zeros((4, 4)), None, False), buf)
        with pytest.raises(TruncationError):
            read_embeddings(buf.getvalue()[:-8])

    def test_csv_fallback(self):
        es = read_embeddings(b"1.0,2.0\n3.0,4.0")
        np.testing.assert_array_equal(es.vectors, [[1.0, 2.0], [3.0, 4.0]])

    def test_csv_labeled_fallback(self):
        es = read_embeddings(b"#labeled\n1.0,0.0,1\n0.0,1.0,0")
        np.testing.assert_array_equal(es.labels, [1, 0])
        assert es.d == 2

    @given(st.integers(0, 6), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, n, d, seed):
        rng = np.random.default_rng(seed)
        vectors = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
        labels = None if seed % 2 else rng.integers(-1, 5, n).astype(np.int32)
        back = roundtrip(EmbeddingSet(vectors, labels, False))
        np.testing.assert_array_equal(back.vectors, vectors)
        if labels is None:
            assert back.labels is None
        else:
            np.testing.assert_array_equal(back.labels, labels)


class TestClassifierHeadIO:
    def test_roundtrip(self, tmp_path):
        head = ClassifierHead(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5]))
        path = tmp_path / "head.json"
        write_head(head, path)
        back = read_head(path)
        np.testing.assert_array_equal(back.W, head.W)
        np.testing.assert_array_equal(back.b, head.b)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            ClassifierHead(np.ones((3, 1)), np.zeros(1))


class TestSphereMixture:
    def spec(self, sigma, seed=0):
        return SyntheticSpec(kind="sphere-mixture", seed=seed,
                             centers=np.eye(2, 4), sigma_gen=sigma,
                             class_counts=[3, 5])

    def test_zero_noise_rows_equal_centers(self):
        es = gen_sphere_mixture(self.spec(0.0))
        np.testing.assert_array_equal(es.vectors[:3], np.tile(np.eye(1, 4), (3, 1)))
        np.testing.assert_array_equal(es.labels, [0, 0, 0, 1, 1, 1, 1, 1])

    def test_unit_norm_output(self):
        es = gen_sphere_mixture(self.spec(0.3))
        norms = np.linalg.norm(es.vectors, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)
        assert es.normalized

    def test_seed_determinism(self):
        a = gen_sphere_mixture(self.spec(0.3, seed=7))
        b = gen_sphere_mixture(self.spec(0.3, seed=7))
        np.testing.assert_array_equal(a.vectors, b.vectors)


class TestEsnSamples:
    def test_symmetric_case_mean(self):
        spec = SyntheticSpec(kind="esn-samples", seed=1, mu=0.7, sigma=1.3,
                             eps=0.0, count=10 ** 6)
        x = gen_esn_samples(spec)
        se = 1.3 / np.sqrt(x.size)
        assert abs(x.mean() - 0.7) < 3 * se

    def test_eps_one_keeps_all_mass_left(self):
        spec = SyntheticSpec(kind="esn-samples", seed=2, mu=0.5, sigma=1.0,
                             eps=1.0, count=20000)
        assert np.all(gen_esn_samples(spec) <= 0.5)

    def test_histogram_matches_pdf(self):
        """50-bin histogram against the analytic density, 4-sigma bin-count bands."""
        params = EsnParams(0.2, 1.0, -0.3)
        spec = SyntheticSpec(kind="esn-samples", seed=3, mu=0.2, sigma=1.0,
                             eps=-0.3, count=10 ** 6)
        x = gen_esn_samples(spec)
        edges = np.linspace(0.2 - 5.0, 0.2 + 5.0, 51)
        counts, _ = np.histogram(x, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        expected = esn_pdf(centers, params) * x.size * (edges[1] - edges[0])
        slack = 4.0 * np.sqrt(np.maximum(expected, 1.0))
        assert np.all(np.abs(counts - expected) <= slack + 1.0)


class TestUnitContributions:
    def make(self, seed=4, count=200000):
        spec = SyntheticSpec(kind="unit-contributions", seed=seed,
                             unit_means=[0.5, -1.0, 2.0],
                             unit_sigmas=[0.5, 1.0, 0.25], count=count)
        return gen_unit_contributions(spec)

    def test_column_means(self):
        X = self.make()
        for i, (mu, sigma) in enumerate(zip([0.5, -1.0, 2.0], [0.5, 1.0, 0.25])):
            assert abs(X[:, i].mean() - mu) < 3 * sigma / np.sqrt(X.shape[0])

    def test_off_diagonal_covariance_small(self):
        X = self.make()
        cov = np.cov(X, rowvar=False)
        off = cov[~np.eye(3, dtype=bool)]
        assert np.max(np.abs(off)) < 4.0 / np.sqrt(X.shape[0])

    def test_seed_determinism(self):
        np.testing.assert_array_equal(self.make(count=50), self.make(count=50))
