import itertools
import json
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_gfm.graph import (
    UNLABELED, AttackInfeasible, DatasetError, Graph, PerturbationSpec, bfs_ball, drop_edges,
    extract_ego_graph, fit_linear_surrogate, generate_sbm, load_dataset, make_dataset,
    normalized_adjacency, perturb_features, read_matrix, save_dataset, surrogate_margin,
    targeted_attack, write_matrix,
)

from conftest import path_graph, two_cliques


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadDataset:
    def test_triangle(self, tmp_path):
        e = _write(tmp_path, "e.txt", "0 1\n1 2\n2 0\n")
        x = _write(tmp_path, "x.csv", "1,2\n3,4\n5,6\n")
        ds = load_dataset(e, x, domain_id="tri")
        assert ds.num_nodes == 3 and ds.graph.num_edges == 3
        np.testing.assert_array_equal(ds.graph.degrees, [2, 2, 2])
        assert np.all(ds.labels == UNLABELED)

    def test_self_loop_dropped_with_count(self, tmp_path, caplog):
        e = _write(tmp_path, "e.txt", "# comment\n0 1\n5 5\n1 0\n")
        x = _write(tmp_path, "x.csv", "\n".join(["0,0"] * 6) + "\n")
        ds = load_dataset(e, x)
        assert ds.meta["self_loops_dropped"] == 1
        assert ds.meta["duplicates_dropped"] == 1
        assert ds.graph.num_edges == 1
        assert "self-loops" in caplog.text

    def test_errors(self, tmp_path):
        x = _write(tmp_path, "x.csv", "1,2\n3,4\n")
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "missing.txt", x)
        e = _write(tmp_path, "e.txt", "0 1\n")
        with pytest.raises(DatasetError, match="ragged"):
            load_dataset(e, _write(tmp_path, "r.csv", "1,2\n3\n"))
        with pytest.raises(DatasetError, match="no feature row"):
            load_dataset(_write(tmp_path, "e2.txt", "0 7\n"), x)
        with pytest.raises(DatasetError, match="out of range"):
            load_dataset(e, x, _write(tmp_path, "y.csv", "0\n3\n"), num_classes=2)
        with pytest.raises(DatasetError):
            load_dataset(_write(tmp_path, "e3.txt", "0 1 2\n"), x)

    def test_save_load_round_trip(self, tmp_path, sbm_small):
        save_dataset(sbm_small, tmp_path / "d")
        back = load_dataset(tmp_path / "d" / "edges.txt", tmp_path / "d" / "features.csv",
                            tmp_path / "d" / "labels.csv")
        np.testing.assert_array_equal(back.graph.adjacency, sbm_small.graph.adjacency)
        np.testing.assert_array_equal(back.features, sbm_small.features)
        np.testing.assert_array_equal(back.labels, sbm_small.labels)


class TestInvariants:
    def test_graph_is_symmetric_and_consistent(self, sbm_small):
        a = sbm_small.graph.adjacency
        np.testing.assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        e = sbm_small.graph.edges
        assert a.sum() == 2 * len(e)
        assert np.all(a[e[:, 0], e[:, 1]] == 1)

    def test_dataset_shape_checks(self):
        g = path_graph(3)
        with pytest.raises(DatasetError):
            make_dataset(g, np.zeros((2, 1)), [0, 0, 0])
        with pytest.raises(DatasetError):
            make_dataset(g, np.zeros((3, 1)), [0, 0])
        with pytest.raises(DatasetError):
            make_dataset(g, np.zeros((3, 1)), [0, -2, 0])

    def test_perturbation_spec_validation(self):
        with pytest.raises(ValueError):
            PerturbationSpec("edge-drop", rate=1.5)
        with pytest.raises(ValueError):
            PerturbationSpec("targeted", budget=0)
        with pytest.raises(ValueError):
            PerturbationSpec("nope")
        assert PerturbationSpec("edge-drop", 0.4).label == "struct-0.4"
        assert PerturbationSpec("targeted", budget=3, mode="poisoning").label == "poisoning-p3"

    def test_matrix_blob_round_trip(self, tmp_path, rng):
        m = rng.normal(size=(5, 3))
        write_matrix(tmp_path / "m.bin", m)
        meta = json.loads((tmp_path / "m.bin.json").read_text())
        assert meta == {"rows": 5, "cols": 3, "dtype": "f64"}
        assert (tmp_path / "m.bin").read_bytes() == m.astype("<f8").tobytes()
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), m)
        (tmp_path / "m.bin").write_bytes(b"\0" * 16)
        with pytest.raises(DatasetError):
            read_matrix(tmp_path / "m.bin")


class TestSBM:
    def test_deterministic(self):
        a = generate_sbm(300, 3, 0.2, 0.01, 16, 1.0, seed=7)
        b = generate_sbm(300, 3, 0.2, 0.01, 16, 1.0, seed=7)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.graph.adjacency.tobytes() == b.graph.adjacency.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_limit_case_gives_disjoint_cliques(self):
        ds = generate_sbm(8, 2, 1.0, 0.0, 4, 1.0, seed=0)
        np.testing.assert_array_equal(ds.graph.adjacency, two_cliques(4).adjacency)

    def test_within_class_edge_count(self):
        ds = generate_sbm(300, 3, 0.2, 0.01, 16, 1.0, seed=7)
        y = ds.labels
        e = ds.graph.edges
        within = int(np.sum(y[e[:, 0]] == y[e[:, 1]]))
        trials = 3 * comb(100, 2)
        mean, sd = 0.2 * trials, np.sqrt(trials * 0.2 * 0.8)
        assert abs(within - mean) <= 3 * sd

    def test_class_mean_separation(self):
        ds = generate_sbm(3000, 3, 0.0, 0.0, 16, 4.0, seed=1)
        means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(3)])
        dists = [np.linalg.norm(means[i] - means[j]) for i, j in itertools.combinations(range(3), 2)]
        np.testing.assert_allclose(dists, 4.0, atol=0.3)

    def test_inverted_probabilities_rejected(self):
        with pytest.raises(ValueError):
            generate_sbm(30, 3, 0.01, 0.2, 4, 1.0, seed=0)
        generate_sbm(30, 3, 0.01, 0.2, 4, 1.0, seed=0, allow_inverted=True)

    def test_remainder_round_robin(self):
        ds = generate_sbm(10, 3, 0.5, 0.1, 4, 1.0, seed=0)
        np.testing.assert_array_equal(np.bincount(ds.labels), [4, 3, 3])


class TestNormalizedAdjacency:
    def test_k3_with_loops(self):
        k3 = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
        np.testing.assert_allclose(normalized_adjacency(k3, True), np.full((3, 3), 1 / 3), atol=1e-15)

    def test_single_edge(self):
        a = normalized_adjacency(Graph.from_edges(2, [(0, 1)]), False)
        np.testing.assert_array_equal(a, [[0, 1], [1, 0]])

    def test_path_spectral_radius(self):
        a = normalized_adjacency(path_graph(4), True)
        assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-12

    def test_isolated_node_zero_row(self):
        a = normalized_adjacency(Graph.from_edges(3, [(0, 1)]), False)
        assert np.all(a[2] == 0) and np.all(a[:, 2] == 0)


class TestEgoGraph:
    def test_isolated_center(self):
        ds = make_dataset(Graph.from_edges(3, [(1, 2)]), np.eye(3), [0, 1, 1])
        ego = extract_ego_graph(ds, 0, 1)
        assert ego.num_nodes == 1 and ego.meta["graph_label"] == 0

    def test_k3(self):
        k3 = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
        ego = extract_ego_graph(make_dataset(k3, np.eye(3), [2, 0, 1]), 0, 1)
        np.testing.assert_array_equal(ego.graph.adjacency, k3.adjacency)
        assert ego.meta["graph_label"] == 2

    def test_sbm_degree_plus_one(self):
        ds = generate_sbm(300, 3, 0.2, 0.01, 16, 1.0, seed=7)
        deg = ds.graph.degrees
        center = int(np.flatnonzero(deg == 9)[0]) if np.any(deg == 9) else int(np.argmax(deg))
        ego = extract_ego_graph(ds, center, 1)
        assert ego.num_nodes == int(deg[center]) + 1
        assert ego.meta["node_ids"][0] == center

    def test_unlabeled_center(self):
        ds = make_dataset(path_graph(3), np.eye(3), [UNLABELED, 0, 0])
        with pytest.raises(DatasetError):
            extract_ego_graph(ds, 0, 1)
        assert extract_ego_graph(ds, 0, 1, require_label=False).num_nodes == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 50), st.floats(0.02, 0.3), st.integers(1, 3), st.integers(0, 10**6))
    def test_matches_bfs_oracle(self, n, p, radius, seed):
        rng = np.random.default_rng(seed)
        a = np.triu(rng.random((n, n)) < p, 1)
        g = Graph.from_adjacency((a | a.T).astype(float))
        ds = make_dataset(g, np.zeros((n, 1)), np.zeros(n, dtype=int))
        center = int(rng.integers(n))
        # oracle: hop distances from matrix powers
        reach = np.eye(n, dtype=bool)
        frontier = reach.copy()
        for _ in range(radius):
            frontier = (frontier.astype(float) @ g.adjacency) > 0
            reach |= frontier
        expected = set(np.flatnonzero(reach[center]).tolist())
        ego = extract_ego_graph(ds, center, radius)
        assert set(ego.meta["node_ids"].tolist()) == expected
        assert bfs_ball(g.adjacency, center, radius) == sorted(expected)


class TestPerturbFeatures:
    def test_zero_rate_identity(self, rng):
        x = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(perturb_features(x, 0.0, seed=1), x)

    def test_constant_column_unchanged(self, rng):
        x = np.column_stack([np.full(20, 3.0), rng.normal(size=20)])
        out = perturb_features(x, 0.8, seed=2)
        np.testing.assert_array_equal(out[:, 0], x[:, 0])
        assert not np.array_equal(out[:, 1], x[:, 1])

    def test_noise_std(self, rng):
        x = rng.normal(size=(1000, 1))
        x = (x - x.mean()) / x.std()
        d = perturb_features(x, 0.4, seed=3) - x
        assert 0.36 <= d.std() <= 0.44

    def test_input_not_modified_and_rows(self, rng):
        x = rng.normal(size=(6, 2))
        before = x.copy()
        out = perturb_features(x, 0.5, seed=0, rows=[1, 4])
        np.testing.assert_array_equal(x, before)
        np.testing.assert_array_equal(out[[0, 2, 3, 5]], x[[0, 2, 3, 5]])

    def test_noise_mean_near_zero(self):
        x = np.random.default_rng(5).normal(size=(100_000, 2))
        d = perturb_features(x, 1.0, seed=4) - x
        sigma = x.std(axis=0) / np.sqrt(x.shape[0])
        assert np.all(np.abs(d.mean(axis=0)) <= 3 * sigma)


class TestDropEdges:
    def test_zero_and_one(self, sbm_small):
        g = sbm_small.graph
        np.testing.assert_array_equal(drop_edges(g, 0.0, 1).adjacency, g.adjacency)
        out = drop_edges(g, 1.0, 1)
        assert out.num_edges == 0 and out.num_nodes == g.num_nodes

    def test_ten_edges(self):
        g = path_graph(11)
        assert drop_edges(g, 0.4, seed=0).num_edges == 6

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 10**6))
    def test_exact_count_and_subset(self, rate, seed):
        g = generate_sbm(80, 2, 0.3, 0.05, 2, 1.0, seed=seed % 50)
        out = drop_edges(g.graph, rate, seed)
        assert out.num_edges == g.graph.num_edges - int(round(rate * g.graph.num_edges))
        assert np.all(out.adjacency <= g.graph.adjacency)
        np.testing.assert_array_equal(out.adjacency, out.adjacency.T)


def _two_clique_task(seed):
    g = two_cliques(4, bridge=True)
    x = np.random.default_rng(seed).normal(size=(8, 3)) + np.repeat(np.eye(2, 3) * 2, 4, axis=0)
    ds = make_dataset(g, x, [0] * 4 + [1] * 4)
    return ds, fit_linear_surrogate(ds)


def _exhaustive_margin(ds, scores, t, p):
    best = np.inf
    others = [v for v in range(ds.num_nodes) if v != t]
    for k in range(1, p + 1):
        for flips in itertools.combinations(others, k):
            a = np.array(ds.graph.adjacency)
            for v in flips:
                a[t, v] = a[v, t] = 1 - a[t, v]
            best = min(best, surrogate_margin(a, scores, t, int(ds.labels[t])))
    return best


class TestTargetedAttack:
    def test_single_same_class_neighbour_removed(self):
        g = Graph.from_edges(4, [(0, 1), (2, 3)])
        x = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 0.1], [0.0, 0.1]])
        ds = make_dataset(g, x, [0, 0, 1, 1])
        scores = x.copy()
        out = targeted_attack(ds, scores, 0, 1, seed=0)
        assert out.meta["attack_flips"] == [("remove", 1)]
        assert out.graph.adjacency[0, 1] == 0

    def test_stops_early(self):
        g = Graph.from_edges(3, [(0, 1)])
        ds = make_dataset(g, np.eye(3, 2), [0, 0, 1])
        out = targeted_attack(ds, np.eye(3, 2), 0, 10, seed=0)
        assert len(out.meta["attack_flips"]) == 2

    def test_infeasible(self):
        ds = make_dataset(Graph.from_edges(2, [(0, 1)]), np.eye(2), [0, 1])
        with pytest.raises(AttackInfeasible):
            targeted_attack(ds, np.eye(2), 0, 1, seed=0)

    def test_margin_trace_decreases_and_symmetric(self):
        ds, h = _two_clique_task(0)
        out = targeted_attack(ds, h, 2, 2, seed=0)
        assert np.all(np.diff(out.meta["attack_margins"]) < 0)
        np.testing.assert_array_equal(out.graph.adjacency, out.graph.adjacency.T)

    def test_budget_one_matches_exhaustive(self):
        for seed in range(10):
            ds, h = _two_clique_task(seed)
            for t in range(8):
                out = targeted_attack(ds, h, t, 1, seed=0)
                assert out.meta["attack_margins"][-1] == pytest.approx(_exhaustive_margin(ds, h, t, 1), abs=1e-12)

    def test_budget_two_fixture_matches_exhaustive(self):
        ds, h = _two_clique_task(0)
        for t in range(8):
            out = targeted_attack(ds, h, t, 2, seed=0)
            assert out.meta["attack_margins"][-1] == pytest.approx(_exhaustive_margin(ds, h, t, 2), abs=1e-12)

    def test_greedy_never_beats_exhaustive(self):
        for seed in range(10):
            ds, h = _two_clique_task(seed)
            for t in range(8):
                out = targeted_attack(ds, h, t, 2, seed=0)
                assert out.meta["attack_margins"][-1] >= _exhaustive_margin(ds, h, t, 2) - 1e-12

    def test_deterministic(self):
        ds, h = _two_clique_task(3)
        a = targeted_attack(ds, h, 1, 2, seed=9)
        b = targeted_attack(ds, h, 1, 2, seed=9)
        assert a.meta["attack_flips"] == b.meta["attack_flips"]
