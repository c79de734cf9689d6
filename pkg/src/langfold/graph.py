"""Visible-connectivity graph over the cloth and the edge-classifying GNN.

Observed (visible) particles are subsampled to a fixed node count with
farthest-point sampling, connected by proximity ("collision" edges), and a
small message-passing network predicts which collision edges join particles
that are also neighbors on the cloth mesh. Its node latents double as the
graph embedding consumed by the policy transformer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cloth_sim import DepthImage, ClothState, visible_particles
from .util import make_rng

GRAPH_NODES = 128
EDGE_RADIUS = 0.03
LATENT_DIM = 64
MESSAGE_ROUNDS = 3
NODE_SCALE = 0.3  # divisor that brings centered node coordinates to O(1)


class GraphError(ValueError):
    pass


def downsample(positions: np.ndarray, k: int = GRAPH_NODES, seed: int = 0):
    """Farthest-point sample k rows from positions.

    The walk starts at the particle nearest the centroid (seed = 0); other
    seeds start at the seed-th nearest, which gives resampling a way to
    produce a different but still deterministic node set. If fewer than k
    points exist the sampled order is cycled with replacement.

    Returns (points (k,3), indices (k,)).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n == 0:
        raise GraphError("cannot downsample an empty point set")
    d2c = np.einsum("ij,ij->i", pos - pos.mean(axis=0), pos - pos.mean(axis=0))
    start = int(np.argsort(d2c, kind="stable")[seed % n])

    chosen = [start]
    mind2 = np.einsum("ij,ij->i", pos - pos[start], pos - pos[start])
    for _ in range(min(k, n) - 1):
        nxt = int(np.argmax(mind2))  # ties resolve to the lowest index
        chosen.append(nxt)
        d2 = np.einsum("ij,ij->i", pos - pos[nxt], pos - pos[nxt])
        np.minimum(mind2, d2, out=mind2)

    indices = np.array([chosen[i % n] for i in range(k)], dtype=np.int64)
    return np.asarray(positions)[indices], indices


def nearby_edges(nodes: np.ndarray, radius: float = EDGE_RADIUS) -> np.ndarray:
    """Undirected pairs of nodes strictly closer than radius.

    Spatial hash with cell size = radius, so candidates live in the 3x3x3
    cell neighborhood. Result is (E, 2) int32 with i < j, lexicographically
    sorted, no duplicates.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    cells = np.floor(nodes / radius).astype(np.int64)
    buckets: dict = {}
    for i, c in enumerate(map(tuple, cells)):
        buckets.setdefault(c, []).append(i)

    offsets = [
        (dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    ]
    r2 = radius * radius
    pairs = []
    for i in range(nodes.shape[0]):
        cx, cy, cz = cells[i]
        cand = []
        for dx, dy, dz in offsets:
            cand.extend(buckets.get((cx + dx, cy + dy, cz + dz), ()))
        cand = np.array(cand, dtype=np.int64)
        cand = cand[cand > i]
        if cand.size == 0:
            continue
        d = nodes[cand] - nodes[i]
        close = np.einsum("ij,ij->i", d, d) < r2
        pairs.extend((i, int(j)) for j in cand[close])

    if not pairs:
        return np.zeros((0, 2), dtype=np.int32)
    out = np.array(sorted(set(pairs)), dtype=np.int32)
    return out


@dataclass
class GraphObservation:
    nodes: np.ndarray             # (K, 3) float32 world positions
    source_particles: np.ndarray  # (K,) indices into the cloth state
    edges: np.ndarray             # (E, 2) int32 collision edges, i < j
    mesh_edge_prob: np.ndarray    # (E,) float32 predicted mesh-neighbor prob
    node_latents: np.ndarray      # (K, LATENT_DIM) float32


def mesh_edge_labels(obs: GraphObservation, state: ClothState) -> np.ndarray:
    """True for collision edges whose endpoints are mesh neighbors, i.e.
    their rest (flat-cloth) separation is within EDGE_RADIUS."""
    rest = state.rest_positions[obs.source_particles]
    d = rest[obs.edges[:, 0]] - rest[obs.edges[:, 1]]
    return np.linalg.norm(d, axis=1) <= EDGE_RADIUS


# -- edge GNN --------------------------------------------------------------------


def init_edge_gnn(seed: int = 0) -> dict:
    """He-initialized MLP weights for the encoder, message rounds, and heads."""
    rng = make_rng(seed, 0x6E47)
    params: dict[str, T.Tensor] = {}

    def mat(name, fan_in, fan_out, gain=1.0):
        w = rng.standard_normal((fan_in, fan_out)) * (gain * np.sqrt(2.0 / fan_in))
        params[name + "_w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        params[name + "_b"] = T.Tensor(np.zeros(fan_out, np.float32), requires_grad=True)

    d = LATENT_DIM
    mat("node_enc1", 3, d)
    mat("node_enc2", d, d)
    mat("edge_enc1", 4, d)
    mat("edge_enc2", d, d)
    for m in range(MESSAGE_ROUNDS):
        # residual branches start small so sum aggregation cannot blow up
        # activations before training has shaped the messages
        mat(f"msg{m}_1", 3 * d, d)
        mat(f"msg{m}_2", d, d, gain=0.05)
        mat(f"upd{m}_1", 2 * d, d)
        mat(f"upd{m}_2", d, d, gain=0.05)
    mat("edge_head1", d, d)
    mat("edge_head2", d, 1)
    return params


def _mlp2(params, name, x):
    h = T.relu(T.add(T.matmul(x, params[name + "1_w"]), params[name + "1_b"]))
    return T.add(T.matmul(h, params[name + "2_w"]), params[name + "2_b"])


def _scatter_sum(src: T.Tensor, ids: np.ndarray, num: int) -> T.Tensor:
    """Sum rows of src into num bins (differentiable via a one-hot matmul)."""
    onehot = np.zeros((num, ids.shape[0]), dtype=src.data.dtype)
    onehot[ids, np.arange(ids.shape[0])] = 1.0
    return T.matmul(T.Tensor(onehot), src)


def edge_gnn_forward(params: dict, nodes: np.ndarray, edges: np.ndarray):
    """Run the edge classifier.

    Returns (edge_probs (E,), node_latents (K, LATENT_DIM)) as autodiff
    tensors; the latents are the final message-passing node state, which
    stage-1 training shapes directly. Inputs are centered so the outcome is
    translation invariant; per-edge features use only relative displacement
    and distance.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    k = nodes.shape[0]
    # center in double precision so a global shift cancels exactly
    centered = ((nodes - nodes.mean(axis=0, keepdims=True)) / NODE_SCALE).astype(np.float32)
    h = _mlp2(params, "node_enc", T.Tensor(centered))

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n_edges = edges.shape[0]
    if n_edges == 0:
        return T.Tensor(np.zeros(0, dtype=np.float32)), h

    # doubled directed edges so messages flow both ways
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    disp = (centered[dst] - centered[src]) * (NODE_SCALE / EDGE_RADIUS)
    dist = np.linalg.norm(disp, axis=1, keepdims=True)
    e = _mlp2(params, "edge_enc", T.Tensor(np.concatenate([disp, dist], axis=1)))

    for m in range(MESSAGE_ROUNDS):
        inp = T.concat([T.embedding(h, src), T.embedding(h, dst), e], axis=1)
        e = T.add(_mlp2(params, f"msg{m}_", inp), e)
        agg = _scatter_sum(e, dst, k)
        h = T.add(_mlp2(params, f"upd{m}_", T.concat([h, agg], axis=1)), h)

    e_fwd = T.narrow(e, 0, 0, n_edges)
    e_bwd = T.narrow(e, 0, n_edges, n_edges)
    logits = _mlp2(params, "edge_head", T.add(e_fwd, e_bwd))
    probs = T.sigmoid(T.reshape(logits, (n_edges,)))
    return probs, h


def build_observation(
    state: ClothState, depth: DepthImage, gnn_params: dict | None, seed: int = 0
) -> GraphObservation:
    """Full observation pipeline: visibility, sampling, edges, GNN outputs."""
    vis = visible_particles(state, depth)
    if vis.size == 0:
        raise GraphError("no visible particles to build a graph from")
    nodes, local = downsample(state.positions[vis], GRAPH_NODES, seed)
    source = vis[local]
    edges = nearby_edges(nodes, EDGE_RADIUS)
    if gnn_params is None:
        probs = np.zeros(edges.shape[0], dtype=np.float32)
        latents = np.zeros((nodes.shape[0], LATENT_DIM), dtype=np.float32)
    else:
        probs_t, latents_t = edge_gnn_forward(gnn_params, nodes, edges)
        probs = probs_t.data.astype(np.float32)
        latents = latents_t.data.astype(np.float32)
    return GraphObservation(
        nodes=np.asarray(nodes, np.float32),
        source_particles=source.astype(np.int64),
        edges=edges,
        mesh_edge_prob=probs,
        node_latents=latents,
    )
