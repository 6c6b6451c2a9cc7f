import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotvae.errors import FormatError, InvalidDimensionError, ShapeError
from rotvae.prior_geometry import (
    base_mean_rng,
    build_prior_spec,
    load_prior_spec,
    orthogonality_residuals,
    pairwise_mean_distances,
    prior_spec_bytes,
    prior_spec_from_bytes,
    prior_spec_hash,
    rotate_latent,
    sample_base_mean,
    sample_rotation,
    save_prior_spec,
    translation_matrix,
)

# min pairwise class-mean distance for (dim_l=64, C=10, seed=1234), recorded from the first verified build
MIN_DIST_64_10_SEED1234 = 5.641042436843243


def det3(m):
    """Cofactor expansion, independent of LAPACK."""
    return (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


@pytest.fixture(scope="module")
def spec():
    return build_prior_spec(16, 5, seed=3)


class TestBaseMean:
    def test_range_and_length(self):
        v = sample_base_mean(4, base_mean_rng(11))
        assert v.shape == (4,)
        assert np.all((v >= 0) & (v < 1))

    def test_deterministic(self):
        a = sample_base_mean(4, base_mean_rng(11))
        b = sample_base_mean(4, base_mean_rng(11))
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        v = sample_base_mean(512, base_mean_rng(11))
        assert 0.45 <= v.mean() <= 0.55

    def test_zero_dim(self):
        with pytest.raises(InvalidDimensionError):
            sample_base_mean(0, base_mean_rng(0))


class TestRotation:
    def test_one_by_one(self):
        for seed in range(5):
            assert np.array_equal(sample_rotation(1, np.random.default_rng(seed)), [[1.0]])

    @pytest.mark.parametrize("seed", range(10))
    def test_orthogonal_dim8(self, seed):
        q = sample_rotation(8, np.random.default_rng(seed))
        assert np.abs(q.T @ q - np.eye(8)).max() <= 1e-10

    def test_det_plus_one_dim3(self):
        q = sample_rotation(3, np.random.default_rng(7))
        assert det3(q) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("dim", [2, 3, 4, 5, 9])
    def test_always_proper(self, dim):
        for seed in range(20):
            assert np.linalg.det(sample_rotation(dim, np.random.default_rng(seed))) == pytest.approx(1.0, abs=1e-10)

    def test_is_sign_normalized_qr_of_uniform_draw(self):
        rng = np.random.default_rng(5)
        q = sample_rotation(6, np.random.default_rng(5))
        a = rng.random((6, 6))
        # R = Q^T A must be upper triangular with positive diagonal, except the
        # last column of Q may have been flipped for properness
        r = q.T @ a
        assert np.allclose(np.tril(r, -1), 0, atol=1e-12)
        assert np.all(np.diag(r)[:-1] > 0)

    def test_zero_dim(self):
        with pytest.raises(InvalidDimensionError):
            sample_rotation(0, np.random.default_rng(0))


class TestPriorSpec:
    def test_definitional_means(self):
        s = build_prior_spec(2, 3, seed=9)
        for c in range(3):
            np.testing.assert_allclose(s.class_means[c], s.rotations[c] @ s.base_mean, rtol=0, atol=1e-10)

    def test_means_on_common_sphere(self, spec):
        radius = np.linalg.norm(spec.base_mean)
        np.testing.assert_allclose(np.linalg.norm(spec.class_means, axis=1), radius, atol=1e-8)

    def test_min_pairwise_distance_recorded(self):
        s = build_prior_spec(64, 10, seed=1234)
        d = pairwise_mean_distances(s)
        off = d[np.triu_indices(10, 1)]
        assert off.min() > 0
        assert off.min() == pytest.approx(MIN_DIST_64_10_SEED1234, rel=1e-12)

    def test_bit_identical_rebuild(self):
        a, b = build_prior_spec(32, 4, seed=99), build_prior_spec(32, 4, seed=99)
        assert prior_spec_bytes(a) == prior_spec_bytes(b)
        assert a == b

    def test_adding_class_keeps_earlier_classes(self):
        a, b = build_prior_spec(8, 3, seed=4), build_prior_spec(8, 5, seed=4)
        assert np.array_equal(a.rotations, b.rotations[:3])
        assert np.array_equal(a.base_mean, b.base_mean)

    def test_no_identity_rotation(self, spec):
        for r in spec.rotations:
            assert np.abs(r - np.eye(spec.dim_l)).max() > 1e-3

    def test_invalid(self):
        with pytest.raises(InvalidDimensionError):
            build_prior_spec(0, 3, 0)
        with pytest.raises(InvalidDimensionError):
            build_prior_spec(4, 1, 0)

    def test_arrays_are_read_only(self, spec):
        with pytest.raises(ValueError):
            spec.class_means[0, 0] = 1.0


class TestTranslationMatrix:
    def test_identity_when_same_class(self, spec):
        np.testing.assert_allclose(translation_matrix(spec, 2, 2), np.eye(spec.dim_l), atol=1e-10)

    def test_inverse_pair(self, spec):
        m = translation_matrix(spec, 1, 3) @ translation_matrix(spec, 3, 1)
        np.testing.assert_allclose(m, np.eye(spec.dim_l), atol=1e-8)

    def test_transports_means(self, spec):
        for c, t in itertools.permutations(range(spec.num_classes), 2):
            np.testing.assert_allclose(
                translation_matrix(spec, c, t) @ spec.class_means[c], spec.class_means[t], atol=1e-8
            )

    def test_is_proper_rotation(self, spec):
        m = translation_matrix(spec, 0, 4)
        assert np.abs(m.T @ m - np.eye(spec.dim_l)).max() < 1e-10
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-10)

    def test_out_of_range(self, spec):
        with pytest.raises(IndexError):
            translation_matrix(spec, 0, 5)
        with pytest.raises(IndexError):
            translation_matrix(spec, -1, 0)


class TestRotateLatent:
    def test_same_class_unchanged(self, spec):
        z = np.random.default_rng(0).normal(size=spec.dim_l)
        assert np.array_equal(rotate_latent(spec, z, 2, 2), z)

    def test_round_trip(self, spec):
        z = np.random.default_rng(1).normal(size=spec.dim_l)
        back = rotate_latent(spec, rotate_latent(spec, z, 0, 3), 3, 0)
        np.testing.assert_allclose(back, z, atol=1e-8)

    def test_mean_transport(self, spec):
        np.testing.assert_allclose(rotate_latent(spec, spec.class_means[1], 1, 4), spec.class_means[4], atol=1e-8)

    def test_matches_translation_matrix_on_batches(self, spec):
        z = np.random.default_rng(2).normal(size=(7, spec.dim_l))
        expected = z @ translation_matrix(spec, 1, 2).T
        np.testing.assert_allclose(rotate_latent(spec, z, 1, 2), expected, atol=1e-12)

    def test_shape_error(self, spec):
        with pytest.raises(ShapeError):
            rotate_latent(spec, np.zeros(spec.dim_l + 1), 0, 1)

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        dim=st.integers(1, 64),
        classes=st.integers(2, 10),
        data=st.data(),
    )
    def test_norm_preserved_and_round_trip(self, seed, dim, classes, data):
        s = build_prior_spec(dim, classes, seed)
        c = data.draw(st.integers(0, classes - 1))
        t = data.draw(st.integers(0, classes - 1))
        z = np.random.default_rng(seed).normal(size=dim) * 3
        out = rotate_latent(s, z, c, t)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(z), abs=1e-8)
        np.testing.assert_allclose(rotate_latent(s, out, t, c), z, atol=1e-8)


@pytest.mark.parametrize("classes", [3, 10])
@pytest.mark.parametrize("dim", [2, 8, 64])
def test_exhaustive_pairs(dim, classes):
    s = build_prior_spec(dim, classes, seed=dim * 100 + classes)
    z = np.random.default_rng(0).normal(size=dim)
    assert orthogonality_residuals(s).max() <= 1e-10
    for c, t in itertools.product(range(classes), repeat=2):
        out = rotate_latent(s, z, c, t)
        np.testing.assert_allclose(rotate_latent(s, out, t, c), z, atol=1e-8)
        np.testing.assert_allclose(rotate_latent(s, s.class_means[c], c, t), s.class_means[t], atol=1e-8)


class TestSerialization:
    def test_round_trip_bit_exact(self, spec, tmp_path):
        path = save_prior_spec(spec, tmp_path / "prior.bin")
        loaded = load_prior_spec(path)
        assert prior_spec_bytes(loaded) == prior_spec_bytes(spec)
        assert np.array_equal(loaded.rotations, spec.rotations)
        assert loaded.seed == spec.seed and loaded.qr_retries == spec.qr_retries
        assert prior_spec_hash(loaded) == prior_spec_hash(spec)

    def test_hash_changes_with_seed(self):
        assert prior_spec_hash(build_prior_spec(4, 3, 0)) != prior_spec_hash(build_prior_spec(4, 3, 1))

    def test_bad_magic(self, spec):
        data = bytearray(prior_spec_bytes(spec))
        data[0] ^= 0xFF
        with pytest.raises(FormatError) as info:
            prior_spec_from_bytes(bytes(data))
        assert info.value.offset == 0

    def test_truncated(self, spec):
        data = prior_spec_bytes(spec)
        with pytest.raises(FormatError):
            prior_spec_from_bytes(data[:-3])
        with pytest.raises(FormatError):
            prior_spec_from_bytes(data[:10])
