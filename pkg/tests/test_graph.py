"""Node sampling, proximity edges, mesh-edge labels, and the edge GNN."""

import numpy as np
import pytest
from conftest import teleport_fold

import langfold.tensor as T
from langfold import cloth_sim as cs
from langfold import graph as G


def brute_force_edges(nodes, radius):
    nodes = np.asarray(nodes, dtype=np.float64)
    n = nodes.shape[0]
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(nodes[i] - nodes[j]) < radius:
                out.append((i, j))
    return np.array(out, dtype=np.int32).reshape(-1, 2)


class TestDownsample:
    def test_exact_count_is_permutation(self):
        rng = np.random.default_rng(0)
        pts = rng.random((16, 3))
        nodes, idx = G.downsample(pts, 16)
        assert sorted(idx.tolist()) == list(range(16))
        assert np.array_equal(nodes, pts[idx])

    def test_two_clusters_one_node_each(self):
        pts = np.array(
            [
                [0.00, 0.00, 0.0],
                [0.01, 0.00, 0.0],
                [0.00, 0.01, 0.0],
                [0.01, 0.01, 0.0],
                [1.00, 0.00, 0.0],
                [1.00, 0.01, 0.0],
            ]
        )
        _, idx = G.downsample(pts, 2)
        assert {idx[0] < 4, idx[1] < 4} == {True, False}

    def test_matches_hand_rolled_fps(self):
        rng = np.random.default_rng(1)
        pts = rng.random((40, 3))
        _, idx = G.downsample(pts, 8)
        # replicate the documented rule: start nearest the centroid, then
        # repeatedly take the point farthest from everything chosen so far
        d2c = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
        expect = [int(np.argmin(d2c))]
        mind = ((pts - pts[expect[0]]) ** 2).sum(axis=1)
        for _ in range(7):
            nxt = int(np.argmax(mind))
            expect.append(nxt)
            mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
        assert idx.tolist() == expect

    def test_replacement_cycles_when_short(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, 1, 0]])
        nodes, idx = G.downsample(pts, 8)
        assert nodes.shape == (8, 3)
        assert set(idx.tolist()) == {0, 1, 2}
        assert np.array_equal(idx[:3], idx[3:6])

    def test_deterministic_and_seed_sensitive(self):
        rng = np.random.default_rng(2)
        pts = rng.random((200, 3))
        _, a = G.downsample(pts, 32, seed=0)
        _, b = G.downsample(pts, 32, seed=0)
        _, c = G.downsample(pts, 32, seed=1)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_empty_input_rejected(self):
        with pytest.raises(G.GraphError):
            G.downsample(np.zeros((0, 3)), 4)


class TestNearbyEdges:
    def test_coincident_nodes_one_edge(self):
        e = G.nearby_edges(np.zeros((2, 3)), 0.03)
        assert e.tolist() == [[0, 1]]

    def test_exact_radius_excluded(self):
        line = np.stack([np.arange(5) * 0.03, np.zeros(5), np.zeros(5)], axis=1)
        assert G.nearby_edges(line, 0.03).size == 0

    def test_output_sorted_unique(self):
        rng = np.random.default_rng(3)
        pts = rng.random((64, 3)) * 0.15
        e = G.nearby_edges(pts, 0.03)
        assert np.all(e[:, 0] < e[:, 1])
        as_tuples = list(map(tuple, e))
        assert as_tuples == sorted(set(as_tuples))

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_brute_force(self, trial):
        rng = np.random.default_rng(100 + trial)
        pts = rng.random((128, 3)) * np.array([0.4, 0.4, 0.02])
        fast = G.nearby_edges(pts, 0.03)
        assert np.array_equal(fast, brute_force_edges(pts, 0.03))


class TestMeshEdgeLabels:
    def test_flat_cloth_all_true(self):
        st = cs.make_grid_state(25, 25, 0.02)
        obs = G.build_observation(st, cs.render_depth(st), None)
        labels = G.mesh_edge_labels(obs, st)
        assert labels.all()

    def test_fold_creates_false_labels(self):
        st, _, _ = teleport_fold()
        obs = G.build_observation(st, cs.render_depth(st), None)
        labels = G.mesh_edge_labels(obs, st)
        assert labels.size > 0
        assert not labels.all()
        # cross-layer edges join particles from opposite halves of the cloth
        rest = st.rest_positions[obs.source_particles]
        gap = np.linalg.norm(rest[obs.edges[:, 0]] - rest[obs.edges[:, 1]], axis=1)
        assert not labels[gap > 0.1].any()

    def test_duplicate_node_edge_true(self):
        st = cs.make_grid_state(2, 2, 0.02)
        obs = G.GraphObservation(
            nodes=np.repeat(st.positions[:1], 2, axis=0),
            source_particles=np.array([0, 0]),
            edges=np.array([[0, 1]], dtype=np.int32),
            mesh_edge_prob=np.zeros(1, np.float32),
            node_latents=np.zeros((2, 64), np.float32),
        )
        assert G.mesh_edge_labels(obs, st).all()


class TestEdgeGnn:
    def setup_method(self):
        self.params = G.init_edge_gnn(0)

    def test_init_deterministic(self):
        a = G.init_edge_gnn(3)
        b = G.init_edge_gnn(3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert set(a) == set(G.init_edge_gnn(4))

    def test_zero_edges_latents_are_per_node(self):
        rng = np.random.default_rng(0)
        pts = rng.random((6, 3)).astype(np.float32)
        probs, lat = G.edge_gnn_forward(self.params, pts, np.zeros((0, 2), np.int64))
        assert probs.shape == (0,)
        assert lat.shape == (6, G.LATENT_DIM)
        # with no edges a node's latent ignores the others (beyond centering)
        moved = pts.copy()
        moved -= pts.mean(axis=0)
        _, lat2 = G.edge_gnn_forward(self.params, moved, np.zeros((0, 2), np.int64))
        np.testing.assert_allclose(lat.data, lat2.data, atol=1e-5)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        pts = rng.random((32, 3)) * 0.1
        edges = G.nearby_edges(pts)
        assert edges.size > 0
        p1, l1 = G.edge_gnn_forward(self.params, pts, edges)
        p2, l2 = G.edge_gnn_forward(self.params, pts + np.array([1.5, -2.0, 0.25]), edges)
        np.testing.assert_allclose(p1.data, p2.data, atol=1e-5)
        np.testing.assert_allclose(l1.data, l2.data, atol=1e-5)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        pts = rng.random((24, 3)) * 0.1
        edges = G.nearby_edges(pts)
        probs, lat = G.edge_gnn_forward(self.params, pts, edges)

        perm = rng.permutation(24)
        inv = np.argsort(perm)
        p_edges = G.nearby_edges(pts[perm])
        p_probs, p_lat = G.edge_gnn_forward(self.params, pts[perm], p_edges)

        np.testing.assert_allclose(p_lat.data[inv], lat.data, atol=1e-5)
        by_pair = {tuple(sorted((perm[i], perm[j]))): p for (i, j), p in zip(p_edges, p_probs.data)}
        for (i, j), p in zip(edges, probs.data):
            assert p == pytest.approx(by_pair[(i, j)], abs=1e-5)

    def test_probs_within_unit_interval(self):
        rng = np.random.default_rng(3)
        pts = rng.random((50, 3)) * 0.12
        edges = G.nearby_edges(pts)
        probs, _ = G.edge_gnn_forward(self.params, pts, edges)
        assert probs.shape == (edges.shape[0],)
        assert np.all((probs.data > 0) & (probs.data < 1))


class TestBuildObservation:
    def test_shapes_and_ranges(self):
        st = cs.spawn(cs.SpawnConfig(), 0)
        obs = G.build_observation(st, cs.render_depth(st), G.init_edge_gnn(0))
        assert obs.nodes.shape == (128, 3)
        assert obs.source_particles.shape == (128,)
        assert obs.node_latents.shape == (128, 64)
        assert obs.mesh_edge_prob.shape == (obs.edges.shape[0],)
        assert np.all((obs.mesh_edge_prob >= 0) & (obs.mesh_edge_prob <= 1))
        assert np.array_equal(obs.nodes, st.positions[obs.source_particles])

    def test_edges_strictly_within_radius(self):
        st, _, _ = teleport_fold()
        obs = G.build_observation(st, cs.render_depth(st), None)
        d = np.linalg.norm(
            obs.nodes[obs.edges[:, 0]].astype(np.float64)
            - obs.nodes[obs.edges[:, 1]].astype(np.float64),
            axis=1,
        )
        assert obs.edges.size > 0
        assert d.max() < G.EDGE_RADIUS

    def test_deterministic(self):
        st = cs.spawn(cs.SpawnConfig(), 1)
        dep = cs.render_depth(st)
        params = G.init_edge_gnn(0)
        a = G.build_observation(st, dep, params, seed=0)
        b = G.build_observation(st, dep, params, seed=0)
        assert np.array_equal(a.nodes, b.nodes)
        assert np.array_equal(a.edges, b.edges)
        assert np.array_equal(a.mesh_edge_prob, b.mesh_edge_prob)
        assert np.array_equal(a.node_latents, b.node_latents)
