import numpy as np
import pytest

from trustrec import backbone
from trustrec.backbone import (TrainConfig, bpr_loss_and_grads, build_item_knn_graph,
                               build_norm_adjacency, init_embeddings, load_model,
                               propagate, save_model, train)
from trustrec.corpus import (FeatureTable, InteractionSet, SplitDataset,
                             SynthSpec, synth_generate)
from trustrec.evaluator import MetricsReport
from trustrec.rng import SplitMix64


def toy_features(seed, n, dims=(("v", 6), ("t", 4))):
    stream = SplitMix64(seed)
    return {m: FeatureTable(m, stream.normal(n * d).reshape(n, d).astype(np.float32))
            for m, d in dims}


def random_interactions(seed, m, n, edges):
    stream = SplitMix64(seed)
    pairs = set()
    while len(pairs) < edges:
        pairs.add((int(stream.randint(m, 1)[0]), int(stream.randint(n, 1)[0])))
    return InteractionSet.from_pairs(m, n, pairs)


class TestInit:
    def test_xavier_bound(self):
        model = init_embeddings(10, 8, 64, seed=1)
        bound = np.sqrt(6.0 / (10 + 64))
        assert model.user0.shape == (10, 64)
        assert np.abs(model.user0).max() <= bound

    def test_same_seed_identical(self):
        a = init_embeddings(10, 8, 16, seed=3)
        b = init_embeddings(10, 8, 16, seed=3)
        assert a.user0.tobytes() == b.user0.tobytes()
        assert a.item0.tobytes() == b.item0.tobytes()

    def test_variance_matches_uniform_moment(self):
        model = init_embeddings(1000, 10, 100, seed=5)
        bound = np.sqrt(6.0 / (1000 + 100))
        var = model.user0.astype(np.float64).var()
        assert abs(var - bound**2 / 3) < 0.05 * bound**2 / 3

    def test_dim_must_be_positive(self):
        with pytest.raises(ValueError):
            init_embeddings(4, 4, 0, seed=1)


class TestAdjacency:
    def test_single_edge(self):
        inter = InteractionSet.from_pairs(1, 1, [(0, 0)])
        adj = build_norm_adjacency(inter).toarray()
        assert adj[0, 1] == 1.0 and adj[1, 0] == 1.0
        assert adj[0, 0] == 0.0 and adj[1, 1] == 0.0

    def test_star_user(self):
        inter = InteractionSet.from_pairs(1, 4, [(0, i) for i in range(4)])
        adj = build_norm_adjacency(inter).toarray()
        assert np.allclose(adj[0, 1:], 0.5)
        assert np.allclose(adj[1:, 0], 0.5)

    def test_dense_oracle_random_graph(self):
        inter = random_interactions(7, 10, 12, 50)
        adj = build_norm_adjacency(inter).toarray()
        m = inter.num_users
        dense = np.zeros((22, 22))
        ud, idg = inter.user_degrees(), inter.item_degrees()
        for u, i in inter.edges.tolist():
            w = 1.0 / np.sqrt(ud[u] * idg[i])
            dense[u, m + i] = w
            dense[m + i, u] = w
        assert np.allclose(adj, dense, atol=1e-12)
        assert np.allclose(adj.sum(axis=1), dense.sum(axis=1), atol=1e-12)

    def test_zero_degree_rows_empty(self):
        inter = InteractionSet.from_pairs(2, 3, [(0, 0)])
        adj = build_norm_adjacency(inter)
        assert adj[1].nnz == 0 and adj[2 + 1].nnz == 0


class TestPropagate:
    def test_layer_zero_identity(self):
        inter = InteractionSet.from_pairs(2, 2, [(0, 0), (1, 1)])
        model = init_embeddings(2, 2, 4, seed=1, num_layers=0)
        graph = build_norm_adjacency(inter)
        avg_user, avg_item = propagate(graph, model)
        assert np.allclose(avg_user, model.user0)
        assert np.allclose(avg_item, model.item0)

    def test_isolated_item_scaled_ego(self):
        inter = InteractionSet.from_pairs(2, 3, [(0, 0), (1, 1)])
        model = init_embeddings(2, 3, 4, seed=2, num_layers=2)
        graph = build_norm_adjacency(inter)
        _, avg_item = propagate(graph, model)
        assert np.allclose(avg_item[2], model.item0[2] / 3.0, atol=1e-7)

    def test_path_graph_hand_oracle(self):
        # u0 - i0 - u1 - i1 path; L=1
        inter = InteractionSet.from_pairs(2, 2, [(0, 0), (1, 0), (1, 1)])
        model = init_embeddings(2, 2, 3, seed=3, num_layers=1, dtype=np.float64)
        graph = build_norm_adjacency(inter)
        avg_user, avg_item = propagate(graph, model)
        e_u0, e_u1 = model.user0
        e_i0, e_i1 = model.item0
        # degrees: u0=1, u1=2, i0=2, i1=1
        a_u0 = (e_u0 + e_i0 / np.sqrt(2)) / 2
        a_u1 = (e_u1 + e_i0 / 2 + e_i1 / np.sqrt(2)) / 2
        a_i0 = (e_i0 + e_u0 / np.sqrt(2) + e_u1 / 2) / 2
        a_i1 = (e_i1 + e_u1 / np.sqrt(2)) / 2
        assert np.allclose(avg_user, np.vstack([a_u0, a_u1]), atol=1e-12)
        assert np.allclose(avg_item, np.vstack([a_i0, a_i1]), atol=1e-12)

    def test_linearity_in_embeddings(self):
        inter = random_interactions(4, 6, 5, 12)
        graph = build_norm_adjacency(inter)
        model = init_embeddings(6, 5, 4, seed=5, num_layers=2, dtype=np.float64)
        au1, ai1 = propagate(graph, model)
        model.params["user0"] = model.user0 * 2.5
        model.params["item0"] = model.item0 * 2.5
        au2, ai2 = propagate(graph, model)
        assert np.allclose(au2, 2.5 * au1, atol=1e-12)
        assert np.allclose(ai2, 2.5 * ai1, atol=1e-12)


class TestItemKnn:
    def test_full_k_dense(self):
        feats = toy_features(1, 5)
        graph = build_item_knn_graph(feats, k=4)
        dense = graph.toarray()
        off_diag = dense[~np.eye(5, dtype=bool)]
        assert (off_diag > 0).all()
        assert np.allclose(dense.sum(axis=1), 1.0)

    def test_identical_features_ties_to_lower_index(self):
        rows = np.ones((6, 3), dtype=np.float32)
        feats = {"v": FeatureTable("v", rows)}
        graph = build_item_knn_graph(feats, k=2).toarray()
        for i in range(6):
            expected = [j for j in range(6) if j != i][:2]
            assert set(np.flatnonzero(graph[i])) == set(expected)

    def test_brute_force_cosine_ranking(self):
        stream = SplitMix64(9)
        rows = stream.normal(10).reshape(5, 2).astype(np.float32)
        feats = {"v": FeatureTable("v", rows)}
        graph = build_item_knn_graph(feats, k=2).toarray()
        unit = rows.astype(np.float64)
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
        sims = unit @ unit.T
        for i in range(5):
            ranked = sorted((j for j in range(5) if j != i),
                            key=lambda j: (-sims[i, j], j))[:2]
            assert set(np.flatnonzero(graph[i])) == set(ranked)
            assert np.allclose(graph[i][ranked], 0.5)

    def test_two_modalities_equal_weight(self):
        rows_v = np.eye(4, dtype=np.float32)
        rows_t = np.ones((4, 2), dtype=np.float32)
        feats = {"v": FeatureTable("v", rows_v), "t": FeatureTable("t", rows_t)}
        graph = build_item_knn_graph(feats, k=1).toarray()
        assert np.allclose(graph.sum(axis=1), 1.0)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            build_item_knn_graph(toy_features(1, 4), 0)


class TestScore:
    def test_zero_embeddings_zero_scores(self):
        inter = InteractionSet.from_pairs(2, 3, [(0, 0), (1, 1), (1, 2)])
        model = init_embeddings(2, 3, 4, seed=1)
        model.params["user0"] = np.zeros_like(model.user0)
        model.params["item0"] = np.zeros_like(model.item0)
        propagate(build_norm_adjacency(inter), model)
        assert np.all(model.score(0) == 0.0)

    def test_vbpr_theta_zero_reduces_to_mf(self):
        feats = toy_features(2, 4)
        model = init_embeddings(3, 4, 5, seed=2, kind="vbpr", features=feats)
        for m in model.modalities:
            model.params[f"pref.{m}"] = np.zeros_like(model.params[f"pref.{m}"])
        got = model.score_batch([0, 1, 2])
        mf = model.user0.astype(np.float64) @ model.item0.T.astype(np.float64)
        assert np.allclose(got, mf, atol=1e-12)

    def test_unpropagated_graph_model_raises(self):
        model = init_embeddings(2, 2, 4, seed=1)
        with pytest.raises(RuntimeError, match="propagate"):
            model.score(0)

    @pytest.mark.parametrize("kind", ["lightgcn", "vbpr", "modality_knn"])
    def test_dense_per_pair_oracle(self, kind):
        inter = random_interactions(11, 6, 7, 14)
        feats = toy_features(3, 7)
        item_graph = build_item_knn_graph(feats, 3) if kind == "modality_knn" else None
        model = init_embeddings(6, 7, 4, seed=4, kind=kind, num_layers=2,
                                features=feats if kind != "lightgcn" else None,
                                item_graph=item_graph, dtype=np.float64)
        graph = build_norm_adjacency(inter)
        if kind != "vbpr":
            propagate(graph, model)
        scores = model.score_batch(np.arange(6))

        # dense float64 oracle
        if kind == "vbpr":
            expect = model.user0 @ model.item0.T
            for m in model.modalities:
                q = model.features[m].rows.astype(np.float64) @ model.params[f"proj.{m}"].T
                expect += model.params[f"pref.{m}"] @ q.T
        else:
            adj = graph.toarray()
            e0 = np.vstack([model.user0, model.item0])
            acc = e0.copy()
            x = e0
            for _ in range(2):
                x = adj @ x
                acc += x
            avg = acc / 3
            reprs = avg[6:]
            if kind == "modality_knn":
                z = np.zeros((7, 4))
                for m in model.modalities:
                    z += model.features[m].rows.astype(np.float64) @ model.params[f"proj.{m}"].T
                reprs = reprs + model.item_graph.toarray() @ z
            expect = avg[:6] @ reprs.T
        assert np.allclose(scores, expect, atol=1e-10)


class TestBprLoss:
    def test_equal_scores_ln2(self):
        model = init_embeddings(2, 3, 4, seed=1, kind="vbpr", features=toy_features(1, 3))
        for name in model.params:
            model.params[name] = np.zeros_like(model.params[name])
        loss, _ = bpr_loss_and_grads(model, [0, 1], [0, 1], [2, 2], l2=0.0)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_large_gap_loss_near_zero(self):
        model = init_embeddings(1, 2, 1, seed=1, kind="vbpr",
                                features={"v": FeatureTable("v", np.zeros((2, 1), np.float32))})
        model.params["user0"] = np.array([[1.0]], dtype=np.float32)
        model.params["item0"] = np.array([[20.0], [0.0]], dtype=np.float32)
        model.params["pref.v"] = np.zeros_like(model.params["pref.v"])
        loss, _ = bpr_loss_and_grads(model, [0], [0], [1], l2=0.0)
        assert loss < 1e-8

    def test_non_finite_loss_aborts(self):
        model = init_embeddings(2, 3, 4, seed=1, kind="vbpr", features=toy_features(1, 3))
        bad = model.params["user0"].copy()
        bad[0, 0] = np.nan
        model.params["user0"] = bad
        with pytest.raises(FloatingPointError):
            bpr_loss_and_grads(model, [0], [0], [1], l2=0.0)


def _make_split(seed, m, n, edges):
    inter = random_interactions(seed, m, n, edges)
    from trustrec.corpus import split_dataset
    split = split_dataset(inter, seed=seed)
    assert split.val.num_edges > 0  # tests below rely on a live validation set
    return split


class TestTrain:
    def test_constant_validation_stops_at_patience(self, monkeypatch):
        split = _make_split(5, 8, 30, 160)
        model = init_embeddings(8, 30, 4, seed=1)
        calls = []

        def fake_evaluate(*args, **kwargs):
            calls.append(1)
            return MetricsReport((10,), {10: 0.5}, {10: 0.5}, 3, "original_positives")

        monkeypatch.setattr("trustrec.evaluator.evaluate", fake_evaluate)
        cfg = TrainConfig(max_epochs=1000, patience=30, seed=2)
        result = train(model, split, cfg)
        assert len(result.history) == 31
        assert result.best_epoch == 1

    def test_improving_validation_runs_to_max_epochs(self, monkeypatch):
        split = _make_split(6, 8, 30, 160)
        model = init_embeddings(8, 30, 4, seed=1)
        counter = {"n": 0}

        def fake_evaluate(*args, **kwargs):
            counter["n"] += 1
            return MetricsReport((10,), {10: 0.01 * counter["n"]}, {10: 0.0},
                                 3, "original_positives")

        monkeypatch.setattr("trustrec.evaluator.evaluate", fake_evaluate)
        cfg = TrainConfig(max_epochs=40, patience=30, seed=2)
        result = train(model, split, cfg)
        assert len(result.history) == 40
        assert result.best_epoch == 40

    def test_empty_supervision_raises(self):
        from trustrec.corpus import split_dataset
        split = split_dataset(random_interactions(7, 5, 5, 10), seed=7)
        empty = InteractionSet.from_pairs(5, 5, [])
        model = init_embeddings(5, 5, 4, seed=1)
        with pytest.raises(ValueError, match="empty supervision"):
            train(model, split, TrainConfig(max_epochs=1), supervision_edges=empty)

    def test_training_beats_popularity_baseline(self):
        spec = SynthSpec(num_users=120, num_items=80, d_lat=8, edges_per_user=10,
                         modality_dims=(("v", 16),))
        split, _, _ = synth_generate(spec, 17)
        model = init_embeddings(120, 80, 32, seed=3)
        cfg = TrainConfig(learning_rate=5e-3, max_epochs=60, patience=60,
                          batch_size=512, seed=3)
        result = train(model, split, cfg)
        losses = [h[1] for h in result.history]
        assert losses[-1] < losses[0]

        from trustrec.evaluator import evaluate
        report = evaluate(result.model, split, ks=(10,))

        # popularity oracle: rank items by train degree, same filter/tie rules
        degree = split.train.item_degrees().astype(np.float64)
        recalls = []
        for u in range(120):
            truth = set(split.test.user_items[u].tolist())
            if not truth:
                continue
            s = degree.copy()
            filt = list(split.original_user_positives[u])
            s[filt] = -np.inf
            top = sorted(range(80), key=lambda j: (-s[j], j))[:10]
            recalls.append(len(truth & set(top)) / len(truth))
        pop_recall = float(np.mean(recalls))
        assert report.recall[10] > pop_recall

    def test_supervision_propagation_separation_bit_identical(self):
        split = _make_split(8, 8, 30, 160)
        cfg = TrainConfig(max_epochs=5, patience=30, seed=4, batch_size=32)
        m1 = init_embeddings(8, 30, 4, seed=9)
        r1 = train(m1, split, cfg)
        m2 = init_embeddings(8, 30, 4, seed=9)
        r2 = train(m2, split, cfg, propagation_edges=split.train,
                   supervision_edges=split.train)
        for name in r1.model.params:
            assert r1.model.params[name].tobytes() == r2.model.params[name].tobytes()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        feats = toy_features(4, 6)
        inter = random_interactions(12, 5, 6, 12)
        model = init_embeddings(5, 6, 4, seed=6, kind="vbpr", features=feats)
        save_model(model, tmp_path / "m.ckpt")
        loaded = load_model(tmp_path / "m.ckpt", features=feats)
        assert loaded.kind == "vbpr"
        for name, value in model.params.items():
            assert loaded.params[name].tobytes() == value.tobytes()

    def test_round_trip_with_propagation_cache(self, tmp_path):
        inter = random_interactions(13, 5, 6, 12)
        model = init_embeddings(5, 6, 4, seed=7)
        propagate(build_norm_adjacency(inter), model)
        save_model(model, tmp_path / "m.ckpt")
        loaded = load_model(tmp_path / "m.ckpt")
        au, ai = loaded.averaged()
        au0, ai0 = model.averaged()
        assert np.allclose(au, au0, atol=1e-7)
        assert np.allclose(ai, ai0, atol=1e-7)
