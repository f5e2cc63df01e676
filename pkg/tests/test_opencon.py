"""Prototype-based EM contrastive training and its consistency diagnostics."""

import numpy as np
import pytest

from owlab.data import EmbeddingSet, SyntheticSpec, gen_sphere_mixture
from owlab.opencon import (LossBatches, PrototypeStore, TrainConfig,
                           TrainState, contrastive_loss,
                           em_consistency_checks, em_train, embed,
                           known_scores, label_positive_sets, opencon_loss,
                           prototype_update, pseudo_label, split_ood,
                           view_positive_sets)


def unit(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def benchmark_dataset(seed):
    """Unit-sphere mixture with three centers mutually at 60 degrees."""
    a = np.deg2rad(60.0)
    d = 16
    c0 = np.zeros(d)
    c0[0] = 1.0
    c1 = np.zeros(d)
    c1[0], c1[1] = np.cos(a), np.sin(a)
    beta = (np.cos(a) - np.cos(a) ** 2) / np.sin(a)
    c2 = np.zeros(d)
    c2[0], c2[1] = np.cos(a), beta
    c2[2] = np.sqrt(1 - np.cos(a) ** 2 - beta ** 2)
    spec = SyntheticSpec(kind="sphere-mixture", seed=1000 + seed,
                         centers=np.vstack([c0, c1, c2]), sigma_gen=0.15,
                         class_counts=[200, 200, 200])
    es = gen_sphere_mixture(spec)
    rng = np.random.default_rng(2000 + seed)
    lab = rng.choice(np.flatnonzero(es.labels == 0), 100, replace=False)
    unl = np.setdiff1d(np.arange(600), lab)
    return (EmbeddingSet(es.vectors[lab], es.labels[lab], True),
            EmbeddingSet(es.vectors[unl], es.labels[unl], True))


def benchmark_config(seed, **overrides):
    base = dict(d_in=16, d_out=16, n_classes=3, n_known=1, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


class TestEmbed:
    def test_identity_encoder_fixes_unit_rows(self):
        x = unit([[3.0, 4.0], [1.0, 0.0]])
        out = embed(np.eye(2), x)
        np.testing.assert_allclose(out.vectors, x, atol=1e-12)

    def test_scaling_input_changes_nothing(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((3, 3))
        x = rng.standard_normal((4, 3))
        np.testing.assert_allclose(embed(W, x).vectors,
                                   embed(W, 5.0 * x).vectors, atol=1e-12)

    def test_outputs_unit_norm(self):
        rng = np.random.default_rng(1)
        out = embed(rng.standard_normal((5, 3)), rng.standard_normal((20, 5)))
        np.testing.assert_allclose(np.linalg.norm(out.vectors, axis=1), 1.0,
                                   atol=1e-9)

    def test_degenerate_row_rejected(self):
        W = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            embed(W, np.array([[0.0, 0.0, 1.0]]))


class TestSplitOod:
    def test_orthogonal_point_flagged(self):
        store = PrototypeStore(np.eye(3)[:2], gamma=0.9, n_known=1)
        z = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        novel, lam = split_ood(z, store, np.ones(10), percentile=90.0)
        assert lam == 1.0
        np.testing.assert_array_equal(novel, [1])

    def test_p_zero_uses_min_score(self):
        store = PrototypeStore(np.eye(2), gamma=0.9, n_known=1)
        z = unit([[1.0, 0.2], [0.2, 1.0]])
        scores = np.array([0.3, 0.8, 0.5])
        novel, lam = split_ood(z, store, scores, percentile=0.0)
        assert lam == 0.3
        # only the second point scores below 0.3 against prototype e1
        np.testing.assert_array_equal(novel,
                                      np.flatnonzero(known_scores(store, z)
                                                     < 0.3))

    def test_boundary_score_stays_in_distribution(self):
        store = PrototypeStore(np.eye(2), gamma=0.9, n_known=1)
        z = np.array([[1.0, 0.0]])  # score exactly 1.0
        novel, lam = split_ood(z, store, np.ones(4), percentile=50.0)
        assert lam == 1.0
        assert novel.size == 0


class TestPseudoLabel:
    def test_prototype_row_maps_to_itself(self):
        store = PrototypeStore(np.eye(5)[:4], gamma=0.9, n_known=2)
        assert pseudo_label(store.M[3], store)[0] == 3

    def test_tie_takes_lowest_index(self):
        M = unit([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        store = PrototypeStore(M, gamma=0.9, n_known=1)
        assert pseudo_label(np.array([1.0, 0.0]), store)[0] == 0

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        M = unit(rng.standard_normal((4, 6)))
        store = PrototypeStore(M, gamma=0.9, n_known=2)
        z = unit(rng.standard_normal((30, 6)))
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        rotated = PrototypeStore(M @ Q, gamma=0.9, n_known=2)
        np.testing.assert_array_equal(pseudo_label(z, store),
                                      pseudo_label(z @ Q, rotated))


class TestContrastiveLoss:
    def test_two_views_of_one_sample(self):
        # single positive doubling as the only negative: hand expansion gives
        # -s/tau + log(exp(s/tau)) = 0 identically
        z = unit([[1.0, 0.0], [0.6, 0.8]])
        res = contrastive_loss(z, view_positive_sets(1), 1.0)
        assert res.loss == pytest.approx(0.0, abs=1e-12)
        assert res.n_anchors == 2 and res.skipped == 0

    def test_singleton_anchors_skipped(self):
        z = unit([[1.0, 0.0], [0.0, 1.0]])
        res = contrastive_loss(z, label_positive_sets([0, 1]), 1.0)
        assert res.skipped == 2
        assert res.n_anchors == 0
        assert res.loss == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        z = unit(rng.standard_normal((6, 3)))
        sets = label_positive_sets([0, 0, 1, 1, 0, 1])
        res = contrastive_loss(z, sets, 0.5)
        h = 1e-6
        for i in range(6):
            for j in range(3):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += h
                zm[i, j] -= h
                fd = (contrastive_loss(zp, sets, 0.5).loss
                      - contrastive_loss(zm, sets, 0.5).loss) / (2 * h)
                assert res.grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_aligned_below_shuffled(self):
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2])
        z = np.eye(3)[labels]
        aligned = contrastive_loss(z, label_positive_sets(labels), 1.0).loss
        shuffled_labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2])
        shuffled = contrastive_loss(z, label_positive_sets(shuffled_labels),
                                    1.0).loss
        assert aligned < shuffled

    def test_nonpositive_temperature_rejected(self):
        z = unit([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            contrastive_loss(z, view_positive_sets(1), 0.0)


class TestOpenconLoss:
    @staticmethod
    def batches(seed=4):
        rng = np.random.default_rng(seed)
        return LossBatches(
            novel=unit(rng.standard_normal((6, 4))),
            novel_labels=np.array([1, 2, 1, 2, 1, 2]),
            labeled=unit(rng.standard_normal((8, 4))),
            labeled_labels=np.zeros(8, dtype=int),
            unlabeled=unit(rng.standard_normal((10, 4))),
        )

    def test_weight_algebra(self):
        b = self.batches()
        cfg = benchmark_config(0, d_in=4, d_out=4, lambda_n=0.0, lambda_u=0.0,
                               lambda_l=0.2)
        out = opencon_loss(b, cfg)
        assert out.total == pytest.approx(0.2 * out.loss_l, abs=1e-12)

    def test_linear_in_each_weight(self):
        b = self.batches()
        lo = opencon_loss(b, benchmark_config(0, d_in=4, d_out=4,
                                              lambda_n=0.3))
        hi = opencon_loss(b, benchmark_config(0, d_in=4, d_out=4,
                                              lambda_n=0.7))
        assert hi.total - lo.total == pytest.approx(0.4 * lo.loss_n, abs=1e-10)
        assert hi.loss_n == pytest.approx(lo.loss_n, abs=1e-12)

    def test_components_match_standalone_calls(self):
        b = self.batches()
        cfg = benchmark_config(0, d_in=4, d_out=4)
        out = opencon_loss(b, cfg)
        assert out.loss_n == pytest.approx(contrastive_loss(
            b.novel, label_positive_sets(b.novel_labels), cfg.tau_n).loss,
            abs=1e-12)
        assert out.loss_l == pytest.approx(contrastive_loss(
            b.labeled, label_positive_sets(b.labeled_labels), cfg.tau_l).loss,
            abs=1e-12)
        assert out.loss_u == pytest.approx(contrastive_loss(
            b.unlabeled, view_positive_sets(5), cfg.tau_u).loss, abs=1e-12)


class TestPrototypeUpdate:
    def test_gamma_one_freezes(self):
        store = PrototypeStore(np.eye(3)[:2], gamma=1.0, n_known=1)
        before = store.M.copy()
        prototype_update(store, np.array([0.0, 1.0, 0.0]), 0)
        np.testing.assert_array_equal(store.M, before)

    def test_gamma_zero_replaces(self):
        store = PrototypeStore(np.eye(3)[:2], gamma=0.0, n_known=1)
        z = unit([[0.0, 0.6, 0.8]])[0]
        prototype_update(store, z, 1)
        np.testing.assert_allclose(store.M[1], z, atol=1e-12)
        np.testing.assert_array_equal(store.M[0], np.eye(3)[0])

    def test_hand_update(self):
        store = PrototypeStore(np.eye(2), gamma=0.9, n_known=1)
        prototype_update(store, np.array([0.0, 1.0]), 0)
        np.testing.assert_allclose(store.M[0], [0.99388373, 0.11043153],
                                   atol=1e-8)

    def test_fixpoint_for_any_gamma(self):
        rng = np.random.default_rng(5)
        z = unit(rng.standard_normal((1, 4)))[0]
        for gamma in [0.0, 0.3, 0.9, 1.0]:
            store = PrototypeStore(np.vstack([z, unit(rng.standard_normal(
                (1, 4)))[0]]), gamma=gamma, n_known=1)
            prototype_update(store, z, 0)
            np.testing.assert_allclose(store.M[0], z, atol=1e-12)

    def test_out_of_range_class(self):
        store = PrototypeStore(np.eye(3)[:2], gamma=0.9, n_known=1)
        with pytest.raises((IndexError, ValueError)):
            prototype_update(store, np.array([1.0, 0.0, 0.0]), 5)


class TestEmTrain:
    def test_deterministic_given_seed(self):
        labeled, unlabeled = benchmark_dataset(0)
        cfg = benchmark_config(0, epochs=3)
        s1 = em_train(labeled, unlabeled, cfg)
        s2 = em_train(labeled, unlabeled, cfg)
        assert s1.history == s2.history
        np.testing.assert_array_equal(s1.encoder, s2.encoder)
        np.testing.assert_array_equal(s1.store.M, s2.store.M)

    def test_gamma_one_prototypes_never_move(self):
        labeled, unlabeled = benchmark_dataset(0)
        short = em_train(labeled, unlabeled,
                         benchmark_config(0, gamma=1.0, epochs=1))
        long = em_train(labeled, unlabeled,
                        benchmark_config(0, gamma=1.0, epochs=4))
        np.testing.assert_array_equal(short.store.M, long.store.M)
        assert np.isfinite(long.history[-1].novel_acc)

    def test_unit_norms_and_epoch_order(self):
        labeled, unlabeled = benchmark_dataset(1)
        state = em_train(labeled, unlabeled, benchmark_config(1, epochs=4))
        np.testing.assert_allclose(np.linalg.norm(state.store.M, axis=1), 1.0,
                                   atol=1e-9)
        z = embed(state, unlabeled)
        np.testing.assert_allclose(np.linalg.norm(z.vectors, axis=1), 1.0,
                                   atol=1e-9)
        assert [r.epoch for r in state.history] == list(range(4))

    def test_benchmark_accuracy_and_ablation(self):
        labeled, unlabeled = benchmark_dataset(1)
        full = em_train(labeled, unlabeled, benchmark_config(1))
        assert full.history[-1].novel_acc >= 0.9
        baseline = em_train(labeled, unlabeled,
                            benchmark_config(1, lambda_n=0.0))
        assert baseline.history[-1].novel_acc < full.history[-1].novel_acc


class TestConsistencyChecks:
    @staticmethod
    def trained_state():
        labeled, unlabeled = benchmark_dataset(0)
        cfg = benchmark_config(0, epochs=5)
        return em_train(labeled, unlabeled, cfg), labeled, unlabeled, cfg

    def test_report_fields(self):
        state, labeled, unlabeled, cfg = self.trained_state()
        report = em_consistency_checks(state, labeled, unlabeled, cfg)
        assert report.mstep_optimal
        assert report.alignment_gain >= -1e-10
        assert report.decomposition_error < 1e-10
        assert report.bound_margin == pytest.approx(
            report.bound_lhs - report.bound_rhs, abs=1e-12)
        assert 0.0 <= report.gamma_hat <= 1.0

    def test_class_mean_prototypes_are_fixpoint(self):
        # point-mass clusters on orthogonal axes with prototypes exactly on
        # them: every flagged class mean IS its prototype, so the audit's
        # replacement gains nothing
        store = PrototypeStore(np.eye(3), gamma=0.9, n_known=1)
        state = TrainState(encoder=np.eye(3), store=store)
        labeled = EmbeddingSet(np.tile(np.eye(3)[0], (6, 1)),
                               np.zeros(6, dtype=int), True)
        rows = np.vstack([np.tile(np.eye(3)[1], (4, 1)),
                          np.tile(np.eye(3)[2], (4, 1))])
        unlabeled = EmbeddingSet(rows, np.array([1] * 4 + [2] * 4), True)
        cfg = benchmark_config(0, d_in=3, d_out=3)
        report = em_consistency_checks(state, labeled, unlabeled, cfg)
        assert report.alignment_gain == pytest.approx(0.0, abs=1e-10)
        assert report.mstep_optimal

    def test_bound_margin_positive_on_separated_data(self):
        state, labeled, unlabeled, cfg = self.trained_state()
        report = em_consistency_checks(state, labeled, unlabeled, cfg)
        assert report.bound_margin > 0.0
