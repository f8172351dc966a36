import math

import numpy as np
import pytest

from oodcombine.datamodel import SPLIT_MEASURE_TRAIN, SyntheticConfig, generate_synthetic
from oodcombine.measures import (
    MEASURE_NAMES,
    MeasureError,
    MeasureTable,
    avg_true_prob_nn,
    compute_all,
    distance_family,
    enwedi,
    entropy_bits,
    feature_stats,
    fit_context,
    fre,
    knn_class_probability,
    load_context,
    probability_family,
    save_context,
    softmax_t,
    td_linear_knn,
)
from oodcombine.knn import fit_pca
from oodcombine.taxonomy import build_tree

from oracles import (
    mann_whitney_auc,
    measure_comparison_tolerance,
    oracle_measure_vector,
    reconstruction_error_via_covariance,
)


class TestSoftmax:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(softmax_t([0.0, 0.0], 1.0), [0.5, 0.5])
        np.testing.assert_allclose(softmax_t([0.0, 0.0], 7.3), [0.5, 0.5])

    def test_closed_form_values(self):
        np.testing.assert_allclose(softmax_t([math.log(4), 0.0], 1.0), [0.8, 0.2],
                                   atol=1e-12)
        np.testing.assert_allclose(softmax_t([math.log(4), 0.0], 2.0),
                                   [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=8)
        np.testing.assert_allclose(softmax_t(logits, 1.5),
                                   softmax_t(logits + 123.456, 1.5), atol=1e-12)

    def test_sums_to_one(self, rng):
        for _ in range(20):
            p = softmax_t(rng.normal(size=6) * 10, rng.uniform(0.5, 4.0))
            assert abs(p.sum() - 1.0) < 1e-9
            assert np.all(p > 0) and np.all(p < 1)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            softmax_t([1.0, 2.0], 0.0)


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy_bits([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_two_is_one_bit(self):
        assert entropy_bits([0.5, 0.5]) == pytest.approx(1.0)

    def test_hand_evaluated_case(self):
        assert entropy_bits([0.5, 0.25, 0.25]) == pytest.approx(1.5)

    def test_bounded_by_log2_n(self, rng):
        for _ in range(20):
            p = rng.dirichlet(np.ones(5))
            h = entropy_bits(p)
            assert 0.0 <= h <= math.log2(5) + 1e-12


class TestKnnClassProbability:
    def test_unanimous(self):
        p = knn_class_probability(np.full(30, 3), 6)
        assert p[3] == 1.0 and p.sum() == 1.0

    def test_even_split(self):
        classes = np.array([1] * 15 + [4] * 15)
        p = knn_class_probability(classes, 6)
        assert p[1] == 0.5 and p[4] == 0.5

    def test_counting_oracle(self, rng):
        for _ in range(50):
            classes = rng.integers(0, 7, size=30)
            p = knn_class_probability(classes, 7)
            assert p.sum() == pytest.approx(1.0)
            for c in range(7):
                assert p[c] == pytest.approx(np.sum(classes == c) / 30)


class TestDistanceFamily:
    def test_symmetric_configuration(self):
        c = 2.5
        dq = np.full(4, c)
        pair = np.full((4, 4), c)
        np.fill_diagonal(pair, 0.0)
        out = distance_family(dq, pair)
        assert out["avg_dist_to_nn"] == pytest.approx(c)
        assert out["avg_dist_among_nn"] == pytest.approx(c)
        assert out["ldof"] == pytest.approx(1.0)

    def test_degenerate_identical_cluster(self):
        out = distance_family(np.zeros(5), np.zeros((5, 5)))
        assert out["dist_1st_nn"] == 0.0
        assert out["avg_dist_to_nn"] == 0.0
        assert out["ldof"] == 0.0

    def test_spread_query_over_degenerate_neighbors_capped(self):
        out = distance_family(np.full(3, 2.0), np.zeros((3, 3)))
        assert out["ldof"] == 1e6

    def test_pairwise_loop_oracle(self, rng):
        pts = rng.normal(size=(10, 3))
        q = rng.normal(size=3)
        k = 4
        d_all = np.array([-(q @ p) for p in pts])
        order = np.argsort(d_all)[:k]
        shift = d_all.min() - 0.5  # any constant shift below the minimum
        dq = d_all[order] - shift
        pair = np.array([[-(pts[n] @ pts[m]) - shift for m in order] for n in order])
        out = distance_family(dq, pair)

        total, count = 0.0, 0
        for a in range(k):
            for b in range(k):
                if a != b:
                    total += pair[a, b]
                    count += 1
        assert out["avg_dist_among_nn"] == pytest.approx(total / count, abs=1e-9)
        assert out["avg_dist_to_nn"] == pytest.approx(dq.mean(), abs=1e-9)
        assert out["dist_1st_nn"] == pytest.approx(dq[0], abs=1e-9)
        assert out["dist_kth_nn"] == pytest.approx(dq[-1], abs=1e-9)
        assert out["ldof"] == pytest.approx(dq.mean() / (total / count), abs=1e-9)

    def test_needs_two_neighbors(self):
        with pytest.raises(MeasureError):
            distance_family(np.array([1.0]), np.zeros((1, 1)))


class TestFre:
    def test_in_span_is_zero(self, rng):
        X = rng.normal(size=(50, 6))
        model = fit_pca(X, 3)
        x = model.inverse_transform(model.transform(X[[0]]))[0]
        assert fre(model, x) < 1e-7

    def test_orthogonal_residual_norm(self, rng):
        X = rng.normal(size=(60, 5))
        model = fit_pca(X, 2)
        v = rng.normal(size=5)
        v -= model.components.T @ (model.components @ v)  # project out the span
        x = model.mean + v
        assert fre(model, x) == pytest.approx(np.linalg.norm(v), abs=1e-9)

    def test_matches_covariance_oracle(self, rng):
        X = rng.normal(size=(80, 7))
        model = fit_pca(X, 4)
        for _ in range(10):
            x = rng.normal(size=7)
            assert fre(model, x) == pytest.approx(
                reconstruction_error_via_covariance(X, x, 4), abs=1e-9
            )

    def test_full_rank_is_zero_everywhere(self, rng):
        X = rng.normal(size=(40, 5))
        model = fit_pca(X, 5)
        for _ in range(10):
            assert fre(model, rng.normal(size=5) * 100) < 1e-6


class TestProbabilityFamily:
    def test_agreement_is_one(self):
        p = np.array([0.0, 1.0, 0.0])
        out = probability_family(p, p, p)
        assert out["max_linear_plus_knn"] == 1.0

    def test_maximal_disagreement_is_half(self):
        out = probability_family(np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                                 np.array([0.0, 1.0]))
        assert out["max_linear_plus_knn"] == 0.5

    def test_direct_evaluation_oracle(self, rng):
        for _ in range(30):
            p = rng.dirichlet(np.ones(5))
            pt = rng.dirichlet(np.ones(5))
            pk = rng.dirichlet(np.ones(5))
            out = probability_family(p, pt, pk)
            assert out["max_linear"] == pytest.approx(max(p))
            assert out["max_knn"] == pytest.approx(max(pk))
            assert out["max_linear_t_scaled"] == pytest.approx(max(pt))
            assert out["max_linear_plus_knn"] == pytest.approx(
                max((p[i] + pk[i]) / 2 for i in range(5))
            )


class TestTdLinearKnn:
    def tree_and_leaves(self):
        tree = build_tree([
            {"id": 0, "name": "family", "level": 2, "parent_id": None},
            {"id": 1, "name": "genus_a", "level": 1, "parent_id": 0},
            {"id": 2, "name": "genus_b", "level": 1, "parent_id": 0},
            {"id": 3, "name": "sp_a1", "level": 0, "parent_id": 1},
            {"id": 4, "name": "sp_a2", "level": 0, "parent_id": 1},
            {"id": 5, "name": "sp_b1", "level": 0, "parent_id": 2},
        ])
        return tree, [3, 4, 5]

    def test_agreement_is_zero(self):
        tree, leaves = self.tree_and_leaves()
        p = np.array([0.7, 0.2, 0.1])
        assert td_linear_knn(tree, leaves, p, p) == 0.0

    def test_congener_prediction_at_one(self):
        tree, leaves = self.tree_and_leaves()
        p = np.array([0.9, 0.05, 0.05])
        p_knn = np.array([0.1, 0.8, 0.1])
        assert td_linear_knn(tree, leaves, p, p_knn) == 1.0

    def test_ties_break_to_lowest_class(self):
        tree, leaves = self.tree_and_leaves()
        p = np.array([0.5, 0.5, 0.0])  # argmax tie -> class 0
        p_knn = np.array([1.0, 0.0, 0.0])
        assert td_linear_knn(tree, leaves, p, p_knn) == 0.0


class TestEnwedi:
    def test_entropy_free_reduces_to_distance(self):
        out = enwedi(3.0, 1.5, 0.0)
        assert out["enwedi_1st"] == 3.0
        assert out["enwedi_avg"] == 1.5

    def test_direct_product(self):
        assert enwedi(2.0, 1.0, 1.0)["enwedi_1st"] == 4.0

    def test_formula_oracle_and_lower_bound(self, rng):
        for _ in range(50):
            d1 = float(rng.uniform(0, 5))
            dbar = float(rng.uniform(d1, 6))
            h = float(rng.uniform(0, 3))
            out = enwedi(d1, dbar, h)
            assert out["enwedi_1st"] == pytest.approx(d1 * (1 + h))
            assert out["enwedi_avg"] == pytest.approx(dbar * (1 + h))
            assert out["enwedi_1st"] >= d1
            assert out["enwedi_avg"] >= dbar


class TestFeatureStats:
    def test_one_hot_feature(self):
        out = feature_stats(np.array([1.0, 0.0, 0.0]))
        assert out == {"feature_entropy": 0.0, "feature_sum": 1.0,
                       "feature_magnitude": 1.0}

    def test_uniform_positive(self):
        out = feature_stats(np.full(8, 0.25))
        assert out["feature_entropy"] == pytest.approx(3.0)

    def test_all_zero(self):
        out = feature_stats(np.zeros(4))
        assert out == {"feature_entropy": 0.0, "feature_sum": 0.0,
                       "feature_magnitude": 0.0}

    def test_direct_formula_oracle(self, rng):
        for _ in range(30):
            f = rng.normal(size=12)
            out = feature_stats(f)
            assert out["feature_sum"] == pytest.approx(sum(abs(v) for v in f))
            assert out["feature_magnitude"] == pytest.approx(
                math.sqrt(sum(v * v for v in f))
            )
            w = [abs(v) / sum(abs(u) for u in f) for v in f]
            assert out["feature_entropy"] == pytest.approx(
                -sum(v * math.log2(v) for v in w if v > 0)
            )


class TestAvgTrueProbNn:
    def test_perfectly_classified_neighbors(self):
        assert avg_true_prob_nn(np.ones(30)) == 1.0

    def test_two_neighbor_mean(self):
        assert avg_true_prob_nn(np.array([0.2, 0.8])) == pytest.approx(0.5)

    def test_missing_metadata(self):
        with pytest.raises(MeasureError):
            avg_true_prob_nn(np.array([]))


# ---------------------------------------------------------------------------
# fitted context and batch computation


@pytest.fixture(scope="module")
def small_setup():
    cfg = SyntheticConfig(
        n_id_classes=4,
        samples_per_class=60,
        feature_dim=8,
        hierarchy_depth=2,
        branching=3,
        ood_samples_per_mode=25,
        seed=31,
    )
    store, tree = generate_synthetic(cfg)
    context = fit_context(store, tree, k=10, pca_components=8, seed=1)
    return store, tree, context


class TestComputeAll:
    def test_rows_match_eval_splits(self, small_setup):
        store, _, context = small_setup
        table = compute_all(store, context)
        eval_ids = [store.sample_ids[i] for i, s in enumerate(store.splits)
                    if s != SPLIT_MEASURE_TRAIN]
        assert table.sample_ids == eval_ids
        assert np.all(np.isfinite(table.values))

    def test_probability_entries_in_unit_interval(self, small_setup):
        store, _, context = small_setup
        table = compute_all(store, context)
        for name in ("max_linear", "max_knn", "max_linear_t_scaled",
                     "max_linear_plus_knn", "avg_true_prob_nn"):
            col = table.column(name)
            assert np.all(col >= 0) and np.all(col <= 1)
        assert np.all(table.column("entropy_nn_true") >= 0)
        assert np.all(table.column("feature_entropy") >= 0)
        assert np.all(table.column("ldof") >= 0)

    def test_enwedi_dominates_distance(self, small_setup):
        store, _, context = small_setup
        table = compute_all(store, context)
        assert np.all(table.column("enwedi_1st") >= table.column("dist_1st_nn") - 1e-12)
        assert np.all(table.column("enwedi_avg") >= table.column("avg_dist_to_nn") - 1e-12)

    def test_td_zero_on_agreement(self, small_setup):
        store, _, context = small_setup
        table = compute_all(store, context)
        eval_idx = [i for i, s in enumerate(store.splits) if s != SPLIT_MEASURE_TRAIN]
        for row, i in enumerate(eval_idx[:100]):
            p = softmax_t(store.logits[i], 1.0)
            z = context.knn_pca.transform(store.features[i])[0]
            from oodcombine.knn import query
            nb = query(context.index, z, context.k)
            p_knn = knn_class_probability(nb.true_classes, store.n_classes)
            if np.argmax(p) == np.argmax(p_knn):
                assert table.values[row, MEASURE_NAMES.index("td_linear_knn")] == 0.0

    def test_order_independence(self, small_setup):
        store, tree, context = small_setup
        table = compute_all(store, context)
        perm = np.random.default_rng(5).permutation(len(store))
        shuffled = type(store)(
            features=store.features[perm],
            logits=store.logits[perm],
            labels=store.labels[perm],
            sample_ids=[store.sample_ids[i] for i in perm],
            source_tags=[store.source_tags[i] for i in perm],
            splits=[store.splits[i] for i in perm],
            class_names=store.class_names,
        )
        table2 = compute_all(shuffled, context)
        lookup = {sid: table2.values[i] for i, sid in enumerate(table2.sample_ids)}
        for sid, row in zip(table.sample_ids, table.values):
            np.testing.assert_allclose(row, lookup[sid], atol=1e-12)

    def test_far_ood_d1_exceeds_id_d1(self, small_setup):
        store, _, context = small_setup
        table = compute_all(store, context)
        tags = {sid: store.source_tags[store.sample_ids.index(sid)]
                for sid in table.sample_ids}
        d1 = table.column("dist_1st_nn")
        far = np.array([tags[s] == "OOD:far" for s in table.sample_ids])
        id_mask = np.array([tags[s] == "ID" for s in table.sample_ids])
        assert d1[far].mean() > d1[id_mask].mean()

    def test_t1_context_reduces_to_max_linear(self, small_setup):
        store, tree, _ = small_setup
        context_t1 = fit_context(store, tree, k=10, pca_components=8, seed=1,
                                 temperature=1.0)
        table = compute_all(store, context_t1)
        np.testing.assert_allclose(table.column("max_linear_t_scaled"),
                                   table.column("max_linear"), atol=1e-12)

    def test_single_eval_sample(self, small_setup):
        store, tree, context = small_setup
        keep = store.indices_for_split(SPLIT_MEASURE_TRAIN).tolist()
        eval_one = [i for i in range(len(store)) if i not in keep][0]
        splits = [
            "measure-train" if i in keep else ("ood-val" if i == eval_one else "measure-train")
            for i in range(len(store))
        ]
        # keep only measure-train plus one eval row
        idx = keep + [eval_one]
        sub = type(store)(
            features=store.features[idx],
            logits=store.logits[idx],
            labels=store.labels[idx],
            sample_ids=[store.sample_ids[i] for i in idx],
            source_tags=[store.source_tags[i] for i in idx],
            splits=[splits[i] for i in idx],
            class_names=store.class_names,
        )
        table = compute_all(sub, context)
        assert len(table) == 1
        assert np.all(np.isfinite(table.values))


class TestOracleEquivalence:
    def test_full_vector_against_independent_oracle(self, rng):
        # compact deterministic setup so the O(n^2) oracle stays fast
        n_classes, dim, k = 3, 5, 6
        tree_records = [
            {"id": 0, "name": "root", "level": 2, "parent_id": None},
            {"id": 1, "name": "g1", "level": 1, "parent_id": 0},
            {"id": 2, "name": "g2", "level": 1, "parent_id": 0},
            {"id": 3, "name": "c0", "level": 0, "parent_id": 1},
            {"id": 4, "name": "c1", "level": 0, "parent_id": 1},
            {"id": 5, "name": "c2", "level": 0, "parent_id": 2},
        ]
        tree = build_tree(tree_records)
        n_train = 60
        train_X = rng.normal(size=(n_train, dim))
        train_labels = rng.integers(0, n_classes, size=n_train)
        train_logits = rng.normal(size=(n_train, n_classes)) * 3

        from oodcombine.datamodel import FeatureStore
        store = FeatureStore(
            features=np.vstack([train_X, rng.normal(size=(20, dim))]).astype(np.float32),
            logits=np.vstack([train_logits, rng.normal(size=(20, n_classes)) * 3]).astype(np.float32),
            labels=np.concatenate([train_labels, rng.integers(0, n_classes, 20)]).astype(np.uint32),
            sample_ids=[f"s{i}" for i in range(n_train + 20)],
            source_tags=["ID"] * (n_train + 20),
            splits=["measure-train"] * n_train + ["ood-val"] * 20,
            class_names=["c0", "c1", "c2"],
        )
        context = fit_context(store, tree, k=k, pca_components=4, temperature=2.0, seed=3)
        table = compute_all(store, context)

        # float32 storage in the index quantizes the vectors; the oracle works
        # from the same float32-rounded training features
        train_f32 = store.features[:n_train].astype(np.float64)
        for row in range(20):
            i = n_train + row
            expected, expected_flag = oracle_measure_vector(
                train_X=train_f32,
                train_labels=train_labels,
                train_logits=store.logits[:n_train].astype(np.float64),
                feature=store.features[i].astype(np.float64),
                logits=store.logits[i].astype(np.float64),
                n_classes=n_classes,
                tree_records=tree_records,
                level_weights=tree.level_weights,
                class_leaf_ids=[3, 4, 5],
                k=k,
                temperature=2.0,
                pca_rank=4,
            )
            for name in MEASURE_NAMES:
                tol = measure_comparison_tolerance(name, context.d_min)
                assert table.values[row, MEASURE_NAMES.index(name)] == pytest.approx(
                    expected[name], **tol
                ), name
            assert bool(table.class_fre_fallback[row]) == expected_flag


class TestClassFreFallback:
    def test_small_class_falls_back(self, rng):
        # class 1 has too few members for a class PCA
        n0, n1 = 40, 3
        dim = 6
        X = np.vstack([rng.normal(size=(n0, dim)), rng.normal(size=(n1, dim)) + 8.0])
        labels = np.array([0] * n0 + [1] * n1, dtype=np.uint32)
        logits = np.zeros((n0 + n1, 2), dtype=np.float32)
        logits[n0:, 1] = 50.0  # eval rows predicted as class 1
        from oodcombine.datamodel import FeatureStore
        tree = build_tree([
            {"id": 0, "name": "root", "level": 1, "parent_id": None},
            {"id": 1, "name": "c0", "level": 0, "parent_id": 0},
            {"id": 2, "name": "c1", "level": 0, "parent_id": 0},
        ])
        eval_X = rng.normal(size=(5, dim)) + 8.0
        eval_logits = np.zeros((5, 2), dtype=np.float32)
        eval_logits[:, 1] = 50.0
        store = FeatureStore(
            features=np.vstack([X, eval_X]).astype(np.float32),
            logits=np.vstack([logits, eval_logits]),
            labels=np.concatenate([labels, np.zeros(5, dtype=np.uint32)]),
            sample_ids=[f"s{i}" for i in range(n0 + n1 + 5)],
            source_tags=["ID"] * (n0 + n1 + 5),
            splits=["measure-train"] * (n0 + n1) + ["ood-val"] * 5,
            class_names=["c0", "c1"],
        )
        context = fit_context(store, tree, k=5, pca_components=4, seed=0)
        assert 0 in context.fre_class and 1 not in context.fre_class
        table = compute_all(store, context)
        assert np.all(table.class_fre_fallback)
        np.testing.assert_allclose(table.column("class_fre"), table.column("global_fre"))


class TestPersistence:
    def test_context_round_trip(self, small_setup, tmp_path):
        store, tree, context = small_setup
        save_context(context, tmp_path / "ctx")
        loaded = load_context(tmp_path / "ctx", tree)
        t1 = compute_all(store, context)
        t2 = compute_all(store, loaded)
        np.testing.assert_allclose(t1.values, t2.values, atol=1e-12)
        assert t1.sample_ids == t2.sample_ids

    def test_measure_table_round_trip(self, small_setup, tmp_path):
        store, _, context = small_setup
        table = compute_all(store, context)
        table.save(tmp_path / "m")
        loaded = MeasureTable.load(tmp_path / "m")
        np.testing.assert_array_equal(loaded.values, table.values)
        assert loaded.sample_ids == table.sample_ids
        np.testing.assert_array_equal(loaded.class_fre_fallback, table.class_fre_fallback)
        # binary block mirrors the csv values exactly
        blob = np.fromfile(tmp_path / "m" / "measures.bin", dtype="<f8")
        np.testing.assert_array_equal(blob.reshape(table.values.shape), table.values)


def test_d1_auroc_monotone_in_displacement():
    aurocs = []
    for far in (1.5, 3.0, 6.0):
        cfg = SyntheticConfig(
            n_id_classes=3, samples_per_class=50, feature_dim=8,
            hierarchy_depth=2, branching=2, ood_samples_per_mode=40,
            displacement_near=0.5, displacement_mid=1.0, displacement_far=far,
            seed=7,
        )
        store, tree = generate_synthetic(cfg)
        context = fit_context(store, tree, k=8, pca_components=8, seed=0)
        table = compute_all(store, context)
        tag_by_id = dict(zip(store.sample_ids, store.source_tags))
        mask = np.array([tag_by_id[s] in ("ID", "OOD:far") for s in table.sample_ids])
        labels = np.array([tag_by_id[s] == "OOD:far" for s in table.sample_ids])[mask]
        aurocs.append(mann_whitney_auc(table.column("dist_1st_nn")[mask], labels))
    assert aurocs[0] <= aurocs[1] <= aurocs[2]
