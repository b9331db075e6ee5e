import numpy as np
import pytest

from remem import assocmem, genmodel, linalg
from remem.assocmem import (
    AssocView,
    as_assoc_view,
    build_orthogonal_memory,
    estimate_key_stats,
    fit_memory,
    insert_linear_closed_form,
    key_stats_from_keys,
    load_key_stats,
    recall,
    save_key_stats,
    to_layer,
    update_direction,
)
from remem.genmodel import Generator, LayerSpec

from oracles import constrained_lstsq_kkt


def random_layer(seed=0, out_ch=4, in_ch=6, k=3, nonlinearity="identity"):
    rng = np.random.default_rng(seed)
    return LayerSpec(
        rng.normal(size=(out_ch, in_ch, k, k)),
        rng.normal(size=out_ch),
        nonlinearity,
        1,
    )


class TestAssocView:
    def test_1x1_kernel_is_plain_weight_matrix(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 3, 1, 1)).astype(np.float32)
        layer = LayerSpec(w, np.zeros(4), "identity", 1)
        view = as_assoc_view(layer)
        np.testing.assert_array_equal(view.matrix, w[:, :, 0, 0].astype(np.float64))

    def test_round_trip_bitwise(self):
        layer = random_layer(1)
        view = as_assoc_view(layer)
        np.testing.assert_array_equal(to_layer(view), layer.weights)

    def test_recall_matches_isolated_conv_contribution(self):
        layer = random_layer(2, out_ch=5, in_ch=4, k=3)
        view = as_assoc_view(layer)
        rng = np.random.default_rng(3)
        k_vec = rng.normal(size=4).astype(np.float32)
        # direct oracle: single nonzero location in a larger map, bias off
        x = np.zeros((4, 9, 9), dtype=np.float32)
        loc = (4, 4)
        x[:, loc[0], loc[1]] = k_vec
        out = genmodel.conv2d(x, layer.weights)
        patch = out[:, loc[0] - 1:loc[0] + 2, loc[1] - 1:loc[1] + 2]
        v = recall(view, k_vec)
        assert np.allclose(v, patch.ravel(), atol=1e-5)

    def test_shape_metadata_validated(self):
        with pytest.raises(ValueError, match="rows"):
            AssocView(np.zeros((5, 3)), out_channels=2, kernel=(3, 3))


class TestBuildOrthogonalMemory:
    def test_standard_basis_keys(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(7, 3))
        pairs = [(np.eye(3)[:, i], values[:, i]) for i in range(3)]
        view = build_orthogonal_memory(pairs)
        np.testing.assert_allclose(view.matrix, values, atol=1e-12)

    def test_single_pair_outer_product(self):
        k = np.array([0.6, 0.8])
        v = np.array([1.0, -2.0, 3.0])
        view = build_orthogonal_memory([(k, v)])
        np.testing.assert_allclose(view.matrix, np.outer(v, k), atol=1e-12)

    def test_orthonormalized_keys_exact_recall(self):
        rng = np.random.default_rng(5)
        n = 8
        K, _ = np.linalg.qr(rng.normal(size=(n, n)))  # Gram-Schmidt oracle
        values = rng.normal(size=(5, n))
        pairs = [(K[:, i], values[:, i]) for i in range(n)]
        view = build_orthogonal_memory(pairs)
        for i in range(n):
            assert np.linalg.norm(recall(view, K[:, i]) - values[:, i]) < 1e-5

    def test_non_orthogonal_rejected_with_pair(self):
        k0 = np.array([1.0, 0.0])
        k1 = np.array([0.8, 0.6])
        with pytest.raises(ValueError, match="0 and 1"):
            build_orthogonal_memory([(k0, np.ones(2)), (k1, np.ones(2))])

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError, match="unit-norm"):
            build_orthogonal_memory([(np.array([2.0, 0.0]), np.ones(2))])


class TestKeyStats:
    def _constant_key_generator(self):
        # zero weights + bias makes layer-1 output, hence layer-2 keys,
        # constant across space and latents
        l1 = LayerSpec(np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), "identity", 1)
        l2 = LayerSpec(np.zeros((3, 3, 3, 3)), np.zeros(3), "tanh", 1)
        return Generator(latent_dim=2, layers=(l1, l2), base_size=4)

    def test_constant_features_give_outer_product(self):
        gen = self._constant_key_generator()
        stats = estimate_key_stats(gen, 2, n_samples=3, seed=0, epsilon=1e-6)
        k0 = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(stats.C, np.outer(k0, k0) + 1e-6 * np.eye(3), atol=1e-6)

    def test_same_seed_identical(self):
        gen = genmodel.build_planted_generator(seed=2, n_rules=1)[0]
        a = estimate_key_stats(gen, 4, n_samples=5, seed=7)
        b = estimate_key_stats(gen, 4, n_samples=5, seed=7)
        np.testing.assert_array_equal(a.C, b.C)

    def test_whitened_keys_near_identity(self):
        # layer 2 keys are generic leaky activations with a healthy
        # spectrum; the memory layer's rare marker channels would sit below
        # the epsilon floor and cannot whiten to unit variance
        gen = genmodel.build_planted_generator(seed=2, n_rules=1)[0]
        L = 2
        stats = estimate_key_stats(gen, L, n_samples=256, seed=11)
        acc = None
        count = 0
        for z in genmodel.sample_latents(11, 256, gen.latent_dim):
            k_map, _ = genmodel.features(gen, z, L)
            cols = stats.Z @ k_map.data.reshape(k_map.channels, -1).astype(np.float64)
            acc = cols @ cols.T if acc is None else acc + cols @ cols.T
            count += cols.shape[1]
        second_moment = acc / count
        off_diag = second_moment - np.diag(np.diag(second_moment))
        assert np.max(np.abs(off_diag)) < 0.05

    def test_cinv_inverts_regularized_c(self):
        rng = np.random.default_rng(8)
        K = rng.normal(size=(6, 40))
        stats = key_stats_from_keys(K, epsilon=None)
        np.testing.assert_allclose(stats.C_inv @ stats.C, np.eye(6), atol=1e-5)

    def test_invalid_sample_count(self):
        gen = self._constant_key_generator()
        with pytest.raises(ValueError, match="n_samples"):
            estimate_key_stats(gen, 2, n_samples=0, seed=0)

    def test_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        K = rng.normal(size=(5, 30))
        stats = key_stats_from_keys(K, epsilon=None)
        path = tmp_path / "stats.gtf"
        save_key_stats(stats, path, {"layer": 4, "seed": 7})
        loaded, meta = load_key_stats(path)
        assert meta["layer"] == 4
        assert loaded.n_samples == stats.n_samples
        assert loaded.epsilon == pytest.approx(stats.epsilon, rel=1e-6)
        np.testing.assert_allclose(loaded.C, stats.C, atol=1e-5)
        np.testing.assert_allclose(loaded.C_inv @ loaded.C, np.eye(5), atol=1e-4)

    def test_cache_bytes_deterministic(self, tmp_path):
        rng = np.random.default_rng(10)
        K = rng.normal(size=(4, 20))
        stats = key_stats_from_keys(K)
        p1, p2 = tmp_path / "a.gtf", tmp_path / "b.gtf"
        save_key_stats(stats, p1)
        save_key_stats(stats, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestUpdateDirection:
    def test_identity_stats(self):
        stats = key_stats_from_keys(np.eye(3), epsilon=0.0)
        k = np.array([0.2, -0.5, 1.0])
        np.testing.assert_allclose(update_direction(stats, k), k, atol=1e-10)

    def test_diagonal_stats(self):
        K = np.diag([1.0, 2.0])  # C = diag(1, 4)
        stats = key_stats_from_keys(K, epsilon=0.0)
        np.testing.assert_allclose(
            update_direction(stats, np.array([1.0, 1.0])), [1.0, 0.25], atol=1e-12
        )

    def test_product_recovers_key(self):
        rng = np.random.default_rng(11)
        K = rng.normal(size=(7, 50))
        stats = key_stats_from_keys(K, epsilon=0.0)
        k = rng.normal(size=7)
        d = update_direction(stats, k)
        np.testing.assert_allclose(stats.C @ d, k, atol=1e-5)

    def test_zero_key_rejected(self):
        stats = key_stats_from_keys(np.eye(3))
        with pytest.raises(ValueError, match="zero"):
            update_direction(stats, np.zeros(3))


class TestInsertClosedForm:
    def _instance(self, seed, n=6, m=4, t=12):
        rng = np.random.default_rng(seed)
        K = rng.normal(size=(n, t))
        V = rng.normal(size=(m, t))
        view = fit_memory(K, V)
        stats = key_stats_from_keys(K, epsilon=0.0)
        k_star = rng.normal(size=n)
        v_star = rng.normal(size=m)
        return view, stats, K, V, k_star, v_star

    def test_already_satisfied_is_noop(self):
        view, stats, *_ , k_star, _ = self._instance(0)
        v_star = view.matrix @ k_star
        w1, lam = insert_linear_closed_form(view, stats, k_star, v_star)
        np.testing.assert_allclose(lam, np.zeros_like(lam), atol=1e-10)
        np.testing.assert_allclose(w1.matrix, view.matrix, atol=1e-10)

    def test_identity_stats_projector_form(self):
        rng = np.random.default_rng(1)
        view = AssocView(rng.normal(size=(4, 5)), 4, (1, 1))
        stats = key_stats_from_keys(np.eye(5), epsilon=0.0)
        k = rng.normal(size=5)
        k /= np.linalg.norm(k)
        v = rng.normal(size=4)
        w1, _ = insert_linear_closed_form(view, stats, k, v)
        expected = view.matrix + np.outer(v - view.matrix @ k, k)
        np.testing.assert_allclose(w1.matrix, expected, atol=1e-10)

    def test_constraint_satisfied(self):
        view, stats, _, _, k_star, v_star = self._instance(2)
        w1, _ = insert_linear_closed_form(view, stats, k_star, v_star)
        err = np.linalg.norm(w1.matrix @ k_star - v_star) / np.linalg.norm(v_star)
        assert err < 1e-6

    def test_matches_kkt_oracle(self):
        view, stats, K, V, k_star, v_star = self._instance(3)
        w1, _ = insert_linear_closed_form(view, stats, k_star, v_star)
        w_oracle = constrained_lstsq_kkt(K, V, k_star, v_star)
        rel = np.linalg.norm(w1.matrix - w_oracle) / np.linalg.norm(w_oracle)
        assert rel < 1e-6

    def test_rank_one_delta(self):
        view, stats, _, _, k_star, v_star = self._instance(4)
        w1, _ = insert_linear_closed_form(view, stats, k_star, v_star)
        s = np.linalg.svd(w1.matrix - view.matrix, compute_uv=False)
        assert s[1] < 1e-8 * s[0]

    def test_rows_parallel_to_direction(self):
        view, stats, _, _, k_star, v_star = self._instance(5)
        d = update_direction(stats, k_star)
        w1, _ = insert_linear_closed_form(view, stats, k_star, v_star)
        delta = w1.matrix - view.matrix
        d_hat = d / np.linalg.norm(d)
        for row in delta:
            norm = np.linalg.norm(row)
            if norm > 1e-12:
                cos = abs(row @ d_hat) / norm
                assert cos > 1.0 - 1e-6

    def test_minimal_disturbance_orthogonal_keys_exact(self):
        rng = np.random.default_rng(6)
        view = AssocView(rng.normal(size=(3, 4)), 3, (1, 1))
        stats = key_stats_from_keys(np.eye(4), epsilon=0.0)
        k_star = 2.0 * np.eye(4)[:, 0]  # d is along e0
        w1, _ = insert_linear_closed_form(view, stats, k_star, rng.normal(size=3))
        k_orth = np.array([0.0, 1.0, -2.0, 0.5])
        np.testing.assert_array_equal(w1.matrix @ k_orth, view.matrix @ k_orth)

    def test_idempotent(self):
        view, stats, _, _, k_star, v_star = self._instance(7)
        w1, lam1 = insert_linear_closed_form(view, stats, k_star, v_star)
        w2, lam2 = insert_linear_closed_form(w1, stats, k_star, v_star)
        assert np.linalg.norm(lam2) < 1e-8 * max(1.0, np.linalg.norm(lam1))
        np.testing.assert_allclose(w2.matrix, w1.matrix, atol=1e-9)

    def test_null_space_key_rejected(self):
        rng = np.random.default_rng(8)
        K = np.zeros((4, 3))
        K[:2] = rng.normal(size=(2, 3))  # keys live in a 2-dim subspace
        stats = key_stats_from_keys(K, epsilon=0.0)
        view = AssocView(rng.normal(size=(3, 4)), 3, (1, 1))
        k_null = np.array([0.0, 0.0, 1.0, 0.0])
        with pytest.raises(ValueError, match="null"):
            insert_linear_closed_form(view, stats, k_null, np.ones(3))

    def test_dimension_mismatch_rejected(self):
        view, stats, _, _, k_star, _ = self._instance(9)
        with pytest.raises(ValueError, match="length"):
            insert_linear_closed_form(view, stats, k_star, np.ones(99))


class TestFitMemory:
    def test_exact_for_consistent_system(self):
        rng = np.random.default_rng(12)
        K = rng.normal(size=(6, 4))
        V = rng.normal(size=(3, 4))
        view = fit_memory(K, V)
        np.testing.assert_allclose(view.matrix @ K, V, atol=1e-8)
