"""Clustering, per-cluster Gaussian sampling, dictionary build, and the
binary dictionary format."""

from __future__ import annotations

import numpy as np
import pytest

from pairmodal.data import MODALITIES, NBI, WLI
from pairmodal.shiftdict import (
    NULL_HASH,
    SVD_MAGIC,
    ShiftDictError,
    ShiftVectorDictionary,
    SvdConfig,
    build_shift_dictionary,
    draw_shift,
    extract_features,
    kmeans,
    kmeans_objective,
    load_svd,
    sample_shift_vectors,
    save_svd,
    shrunk_covariance,
    svd_bytes,
)


def _blobs(rng, centers, per_cluster=20, spread=0.05):
    centers = np.asarray(centers, dtype=np.float64)
    points = []
    for center in centers:
        points.append(center + rng.normal(scale=spread, size=(per_cluster, centers.shape[1])))
    return np.concatenate(points)


class TestKMeans:
    def test_recovers_separated_blobs(self, rng):
        centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]
        points = _blobs(rng, centers)
        prototypes, assignment = kmeans(points, 3, seed=0)
        # Each blob maps to exactly one cluster, and prototypes sit on
        # the blob means.
        for blob in range(3):
            block = assignment[blob * 20 : (blob + 1) * 20]
            assert len(set(block.tolist())) == 1
            blob_mean = points[blob * 20 : (blob + 1) * 20].mean(axis=0)
            np.testing.assert_allclose(prototypes[block[0]], blob_mean, atol=1e-9)
        assert sorted(set(assignment.tolist())) == [0, 1, 2]

    def test_assignment_consistent_with_prototypes(self, rng):
        points = rng.normal(size=(40, 3))
        prototypes, assignment = kmeans(points, 4, seed=1)
        d2 = ((points[:, None, :] - prototypes[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(assignment, d2.argmin(axis=1))

    def test_objective_history_is_monotone(self, rng):
        points = rng.normal(size=(60, 4))
        _, _, history = kmeans(points, 5, seed=2, return_history=True)
        assert len(history) >= 1
        diffs = np.diff(history)
        assert np.all(diffs <= 1e-9)

    def test_deterministic_in_seed(self, rng):
        points = rng.normal(size=(30, 2))
        p1, a1 = kmeans(points, 3, seed=7)
        p2, a2 = kmeans(points, 3, seed=7)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(a1, a2)
        p3, _ = kmeans(points, 3, seed=8)
        assert not np.array_equal(p1, p3)

    def test_ties_go_to_lowest_index(self):
        # Two identical prototypes arise from coincident points; argmin
        # breaks the tie toward index 0.
        points = np.array([[0.0], [0.0], [0.0], [0.0]])
        prototypes, assignment = kmeans(points, 2, seed=0, max_iter=5)
        np.testing.assert_allclose(prototypes, np.zeros((2, 1)))
        assert assignment.tolist() == [0, 0, 0, 0]

    def test_objective_helper(self):
        points = np.array([[0.0, 0.0], [2.0, 0.0]])
        prototypes = np.array([[1.0, 0.0]])
        assignment = np.array([0, 0])
        assert kmeans_objective(points, prototypes, assignment) == 2.0

    def test_validation(self, rng):
        with pytest.raises(ShiftDictError, match="2-D"):
            kmeans(np.zeros(5), 2)
        with pytest.raises(ShiftDictError, match="non-finite"):
            kmeans(np.array([[np.nan, 0.0], [1.0, 0.0]]), 1)
        with pytest.raises(ShiftDictError, match="num_clusters"):
            kmeans(rng.normal(size=(5, 2)), 0)
        with pytest.raises(ShiftDictError, match="cannot form"):
            kmeans(rng.normal(size=(2, 2)), 3)


class TestShrunkCovariance:
    def test_matches_numpy_cov_plus_diagonal(self, rng):
        members = rng.normal(size=(50, 4))
        shrinkage = 0.01
        sigma = shrunk_covariance(members, shrinkage)
        base = np.cov(members, rowvar=False, ddof=1)
        expected = base + shrinkage * (np.trace(base) / 4) * np.eye(4)
        np.testing.assert_allclose(sigma, expected, rtol=1e-12)

    def test_single_member_yields_zero(self):
        sigma = shrunk_covariance(np.array([[1.0, 2.0, 3.0]]), shrinkage=0.5)
        np.testing.assert_array_equal(sigma, np.zeros((3, 3)))

    def test_one_dimensional_features(self, rng):
        members = rng.normal(size=(10, 1))
        sigma = shrunk_covariance(members, shrinkage=0.0)
        assert sigma.shape == (1, 1)
        assert sigma[0, 0] == pytest.approx(np.var(members, ddof=1), rel=1e-12)

    def test_zero_shrinkage_is_plain_covariance(self, rng):
        members = rng.normal(size=(30, 3))
        np.testing.assert_allclose(
            shrunk_covariance(members, 0.0), np.cov(members, rowvar=False, ddof=1), rtol=1e-12
        )


class TestSampleShiftVectors:
    def test_zero_covariance_copies_the_mean(self):
        mu = np.array([3.0, -1.0, 2.0])
        draws = sample_shift_vectors(mu, np.zeros((3, 3)), count=5, seed=0)
        np.testing.assert_array_equal(draws, np.tile(mu, (5, 1)))

    def test_deterministic_in_seed(self):
        mu = np.zeros(2)
        sigma = np.eye(2)
        first = sample_shift_vectors(mu, sigma, count=8, seed=3)
        second = sample_shift_vectors(mu, sigma, count=8, seed=3)
        np.testing.assert_array_equal(first, second)
        assert not np.array_equal(first, sample_shift_vectors(mu, sigma, count=8, seed=4))

    def test_moments_roughly_match(self):
        mu = np.array([1.0, -2.0])
        sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
        draws = sample_shift_vectors(mu, sigma, count=20000, seed=0)
        np.testing.assert_allclose(draws.mean(axis=0), mu, atol=0.05)
        np.testing.assert_allclose(np.cov(draws, rowvar=False), sigma, atol=0.08)

    def test_asymmetric_covariance_rejected(self):
        sigma = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ShiftDictError, match="symmetric"):
            sample_shift_vectors(np.zeros(2), sigma, count=1)

    def test_indefinite_covariance_rejected(self):
        sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ShiftDictError, match="increase shrinkage"):
            sample_shift_vectors(np.zeros(2), sigma, count=1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShiftDictError, match="do not match"):
            sample_shift_vectors(np.zeros(3), np.eye(2), count=1)
        with pytest.raises(ShiftDictError, match="count"):
            sample_shift_vectors(np.zeros(2), np.eye(2), count=0)


class TestExtractFeatures:
    def test_shapes_and_determinism(self, tiny_checkpoint, tiny_splits):
        samples = tiny_splits.train[:10]
        features = extract_features(tiny_checkpoint, samples, WLI)
        assert features.shape == (10, tiny_checkpoint.net_config.embed_dim)
        assert features.dtype == np.float32
        again = extract_features(tiny_checkpoint, samples, WLI)
        np.testing.assert_array_equal(features, again)

    def test_batch_size_does_not_change_values(self, tiny_checkpoint, tiny_splits):
        samples = tiny_splits.train[:7]
        full = extract_features(tiny_checkpoint, samples, NBI, batch_size=64)
        chunked = extract_features(tiny_checkpoint, samples, NBI, batch_size=3)
        np.testing.assert_allclose(full, chunked, rtol=1e-6, atol=1e-7)

    def test_modalities_differ(self, tiny_checkpoint, tiny_splits):
        samples = tiny_splits.train[:5]
        wli = extract_features(tiny_checkpoint, samples, WLI)
        nbi = extract_features(tiny_checkpoint, samples, NBI)
        assert not np.allclose(wli, nbi)

    def test_requires_pretrain_stage(self, tiny_checkpoint, tiny_splits):
        import dataclasses

        finetuned = dataclasses.replace(tiny_checkpoint, stage="finetune")
        with pytest.raises(ShiftDictError, match="unknown modality"):
            extract_features(tiny_checkpoint, tiny_splits.train[:2], "depth")
        from pairmodal.checkpoint import CheckpointError

        with pytest.raises(CheckpointError, match="expected a pretrain checkpoint"):
            extract_features(finetuned, tiny_splits.train[:2], WLI)

    def test_empty_samples_rejected(self, tiny_checkpoint):
        with pytest.raises(ShiftDictError, match="no samples"):
            extract_features(tiny_checkpoint, [], WLI)


@pytest.fixture(scope="module")
def built(tiny_checkpoint, tiny_splits):
    config = SvdConfig(vectors_per_cluster=8)
    return build_shift_dictionary(
        tiny_checkpoint, tiny_splits.train, config, seed=5, checkpoint_hash="ab" * 32
    )


@pytest.fixture(scope="module")
def small_svd():
    rng = np.random.default_rng(0)
    prototypes = {m: rng.normal(size=(3, 4)).astype(np.float32) for m in MODALITIES}
    shifts = {m: rng.normal(size=(3, 5, 4)).astype(np.float32) for m in MODALITIES}
    return ShiftVectorDictionary(prototypes=prototypes, shifts=shifts, build_seed=0)


class TestBuildDictionary:
    def test_shapes_and_dtypes(self, built, tiny_checkpoint):
        c = tiny_checkpoint.net_config.num_classes
        d = tiny_checkpoint.net_config.embed_dim
        assert built.num_clusters == c
        assert built.vectors_per_cluster == 8
        assert built.feature_dim == d
        for modality in MODALITIES:
            assert built.prototypes[modality].shape == (c, d)
            assert built.shifts[modality].shape == (c, 8, d)
            assert built.prototypes[modality].dtype == np.float32
        assert built.build_seed == 5
        assert built.checkpoint_hash == "ab" * 32

    def test_deterministic_in_seed(self, tiny_checkpoint, tiny_splits, built):
        config = SvdConfig(vectors_per_cluster=8)
        again = build_shift_dictionary(
            tiny_checkpoint, tiny_splits.train, config, seed=5, checkpoint_hash="ab" * 32
        )
        for modality in MODALITIES:
            np.testing.assert_array_equal(built.prototypes[modality], again.prototypes[modality])
            np.testing.assert_array_equal(built.shifts[modality], again.shifts[modality])
        other = build_shift_dictionary(tiny_checkpoint, tiny_splits.train, config, seed=6)
        assert any(
            not np.array_equal(built.shifts[m], other.shifts[m]) for m in MODALITIES
        )

    def test_shifts_scatter_around_prototypes(self, built):
        """Sampled vectors spread around the cluster centers: their mean sits
        near the prototype relative to the cluster scale."""
        for modality in MODALITIES:
            shifts = built.shifts[modality].astype(np.float64)
            protos = built.prototypes[modality].astype(np.float64)
            spread = np.abs(shifts - protos[:, None, :]).max()
            assert spread > 0
            mean_err = np.abs(shifts.mean(axis=1) - protos).max()
            assert mean_err < spread


class TestDrawShift:
    def test_single_draw_shapes(self, small_svd):
        s_w, s_n = draw_shift(small_svd, np.random.default_rng(0))
        assert s_w.shape == (4,) and s_n.shape == (4,)
        assert s_w.dtype == np.float32

    def test_batched_draw_shapes(self, small_svd):
        s_w, s_n = draw_shift(small_svd, np.random.default_rng(0), count=7)
        assert s_w.shape == (7, 4) and s_n.shape == (7, 4)

    def test_uncentered_draws_come_from_the_table(self, small_svd):
        s_w, s_n = draw_shift(small_svd, np.random.default_rng(1), count=20)
        flat_w = small_svd.shifts[WLI].reshape(-1, 4)
        flat_n = small_svd.shifts[NBI].reshape(-1, 4)
        for row in s_w:
            assert any(np.array_equal(row, cand) for cand in flat_w)
        for row in s_n:
            assert any(np.array_equal(row, cand) for cand in flat_n)

    def test_centered_draws_subtract_prototypes(self, small_svd):
        s_w, _ = draw_shift(small_svd, np.random.default_rng(2), count=20, centered=True)
        candidates = (
            small_svd.shifts[WLI] - small_svd.prototypes[WLI][:, None, :]
        ).reshape(-1, 4)
        for row in s_w:
            assert any(np.allclose(row, cand, atol=1e-7) for cand in candidates)

    def test_deterministic_in_rng_state(self, small_svd):
        first = draw_shift(small_svd, np.random.default_rng(9), count=4)
        second = draw_shift(small_svd, np.random.default_rng(9), count=4)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])

    def test_count_validated(self, small_svd):
        with pytest.raises(ShiftDictError, match="count"):
            draw_shift(small_svd, np.random.default_rng(0), count=0)


class TestDictionaryFile:
    @pytest.fixture()
    def file_svd(self):
        rng = np.random.default_rng(3)
        prototypes = {m: rng.normal(size=(2, 3)).astype(np.float32) for m in MODALITIES}
        shifts = {m: rng.normal(size=(2, 4, 3)).astype(np.float32) for m in MODALITIES}
        return ShiftVectorDictionary(
            prototypes=prototypes, shifts=shifts, build_seed=11, checkpoint_hash="cd" * 32
        )

    def test_round_trip_is_bit_exact(self, tmp_path, file_svd):
        path = tmp_path / "dict.svd"
        save_svd(path, file_svd)
        loaded = load_svd(path)
        assert loaded.build_seed == 11
        assert loaded.checkpoint_hash == "cd" * 32
        for modality in MODALITIES:
            np.testing.assert_array_equal(loaded.prototypes[modality], file_svd.prototypes[modality])
            np.testing.assert_array_equal(loaded.shifts[modality], file_svd.shifts[modality])
        assert svd_bytes(loaded) == svd_bytes(file_svd)

    def test_header_layout(self, file_svd):
        data = svd_bytes(file_svd)
        assert data[:8] == SVD_MAGIC
        counts = np.frombuffer(data, dtype="<u4", count=4, offset=8)
        assert counts.tolist() == [2, 2, 4, 3]
        seed = np.frombuffer(data, dtype="<i8", count=1, offset=24)[0]
        assert seed == 11
        payload = 2 * (2 * 3 + 2 * 4 * 3) * 4
        assert len(data) == 8 + 16 + 8 + 32 + payload

    def test_bad_magic(self, tmp_path, file_svd):
        path = tmp_path / "bad.svd"
        path.write_bytes(b"NOTMAGIC" + svd_bytes(file_svd)[8:])
        with pytest.raises(ShiftDictError, match="bad magic"):
            load_svd(path)

    def test_trailing_bytes(self, tmp_path, file_svd):
        path = tmp_path / "trail.svd"
        path.write_bytes(svd_bytes(file_svd) + b"\x00\x00")
        with pytest.raises(ShiftDictError, match="trailing bytes"):
            load_svd(path)

    def test_validation_of_container(self):
        good = np.zeros((2, 3), dtype=np.float32)
        good_shifts = np.zeros((2, 4, 3), dtype=np.float32)
        with pytest.raises(ShiftDictError, match="modalities"):
            ShiftVectorDictionary(
                prototypes={WLI: good}, shifts={WLI: good_shifts}, build_seed=0
            )
        with pytest.raises(ShiftDictError, match="float32"):
            ShiftVectorDictionary(
                prototypes={WLI: good.astype(np.float64), NBI: good},
                shifts={WLI: good_shifts, NBI: good_shifts},
                build_seed=0,
            )
        with pytest.raises(ShiftDictError, match="64 hex"):
            ShiftVectorDictionary(
                prototypes={WLI: good, NBI: good},
                shifts={WLI: good_shifts, NBI: good_shifts},
                build_seed=0,
                checkpoint_hash="abc",
            )


class TestSvdConfig:
    def test_defaults(self):
        config = SvdConfig()
        assert config.vectors_per_cluster == 64
        assert config.shrinkage == pytest.approx(1e-4)

    @pytest.mark.parametrize(
        "kwargs",
        [{"vectors_per_cluster": 0}, {"shrinkage": -1.0}, {"kmeans_max_iter": 0}],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ShiftDictError):
            SvdConfig(**kwargs)
