"""Multimodal transformer policy over language, depth image, and graph tokens.

Token layout is [language 13 | image 65 | graph 129] = 207 tokens of width
D_MODEL, where each modality starts with a learned head token. Language and
image tokens receive learned positional embeddings; graph tokens do not, so
the model stays equivariant to node ordering. Decoders: a per-node pick
score, a convolutional place heatmap decoded from the image patch tokens,
and a success classifier read from the three head tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lang
from . import tensor as T
from .cloth_sim import Camera, DEFAULT_CAMERA, PickPlaceAction, WORKSPACE_HALF
from .graph import GRAPH_NODES, GraphObservation, LATENT_DIM
from .util import make_rng

D_MODEL = 128
N_LAYERS = 4
N_HEADS = 4
D_HEAD = D_MODEL // N_HEADS
MLP_HIDDEN = 256
INIT_STD = 0.02

N_LANG = lang.MAX_TOKENS + 1          # 13
N_IMG = 64 + 1                        # 65 (8x8 patches of the 64x64 depth)
N_GRAPH = GRAPH_NODES + 1             # 129
N_TOKENS = N_LANG + N_IMG + N_GRAPH   # 207

LANG_START = 0
IMG_START = N_LANG
GRAPH_START = N_LANG + N_IMG
PATCH = 8


def _trunc_normal(rng, shape, std=INIT_STD):
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


def init_policy(seed: int = 0) -> dict:
    rng = make_rng(seed, 0xA110)
    p: dict[str, T.Tensor] = {}

    def add(name, shape, std=INIT_STD, zero=False):
        if zero:
            data = np.zeros(shape, np.float32)
        else:
            data = _trunc_normal(rng, shape, std)
        p[name] = T.Tensor(data, requires_grad=True)

    add("tok_embed", (lang.VOCAB_SIZE, D_MODEL))
    add("lang_pos", (N_LANG, D_MODEL))
    add("img_proj_w", (PATCH * PATCH, D_MODEL))
    add("img_proj_b", (D_MODEL,), zero=True)
    add("img_pos", (N_IMG, D_MODEL))
    add("graph_proj_w", (LATENT_DIM, D_MODEL))
    add("graph_proj_b", (D_MODEL,), zero=True)
    for name in ("s_head", "i_head", "g_head", "type_lang", "type_img", "type_graph"):
        add(name, (D_MODEL,))
    for l in range(N_LAYERS):
        pre = f"l{l}_"
        p[pre + "ln1_g"] = T.Tensor(np.ones(D_MODEL, np.float32), requires_grad=True)
        add(pre + "ln1_b", (D_MODEL,), zero=True)
        for nm in ("q", "k", "v", "o"):
            add(pre + f"w{nm}", (D_MODEL, D_MODEL))
            add(pre + f"b{nm}", (D_MODEL,), zero=True)
        p[pre + "ln2_g"] = T.Tensor(np.ones(D_MODEL, np.float32), requires_grad=True)
        add(pre + "ln2_b", (D_MODEL,), zero=True)
        add(pre + "mlp1_w", (D_MODEL, MLP_HIDDEN))
        add(pre + "mlp1_b", (MLP_HIDDEN,), zero=True)
        add(pre + "mlp2_w", (MLP_HIDDEN, D_MODEL))
        add(pre + "mlp2_b", (D_MODEL,), zero=True)
    p["lnf_g"] = T.Tensor(np.ones(D_MODEL, np.float32), requires_grad=True)
    add("lnf_b", (D_MODEL,), zero=True)

    add("pick_w", (D_MODEL, 1))
    add("pick_b", (1,), zero=True)
    # place decoder: 8x8xD -> conv/upsample pyramid -> 64x64 heatmap
    add("place1_w", (64, D_MODEL, 3, 3))
    add("place1_b", (64,), zero=True)
    add("place2_w", (32, 64, 3, 3))
    add("place2_b", (32,), zero=True)
    add("place3_w", (16, 32, 3, 3))
    add("place3_b", (16,), zero=True)
    add("place4_w", (1, 16, 3, 3), zero=True)
    add("place4_b", (1,), zero=True)
    add("suc1_w", (3 * D_MODEL, D_MODEL))
    add("suc1_b", (D_MODEL,), zero=True)
    add("suc2_w", (D_MODEL, 1))
    add("suc2_b", (1,), zero=True)
    return p


def param_count(params: dict) -> int:
    return int(sum(t.size for t in params.values()))


def _tile_head(vec: T.Tensor, batch: int) -> T.Tensor:
    zeros = T.Tensor(np.zeros((batch, 1, vec.shape[-1]), dtype=np.float32))
    return T.add(zeros, T.reshape(vec, (1, 1, vec.shape[-1])))


def _ensure_batch(arr, ndim):
    arr = np.asarray(arr)
    if arr.ndim == ndim:
        return arr[None], True
    return arr, False


def embed_language_batch(params: dict, tokens: np.ndarray) -> T.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] != lang.MAX_TOKENS:
        raise T.ShapeError(f"expected {lang.MAX_TOKENS} token ids, got {tokens.shape}")
    emb = T.embedding(params["tok_embed"], tokens)          # (B, 12, D)
    head = _tile_head(params["s_head"], tokens.shape[0])
    return T.add(T.concat([head, emb], axis=1), params["lang_pos"])


def embed_image_batch(params: dict, depth: np.ndarray) -> T.Tensor:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.shape[-2:] != (64, 64):
        raise T.ShapeError(f"expected 64x64 depth image, got {depth.shape}")
    b = depth.shape[0]
    g = 64 // PATCH
    patches = (
        depth.reshape(b, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4).reshape(b, g * g, PATCH * PATCH)
    )
    tok = T.add(T.matmul(T.Tensor(patches), params["img_proj_w"]), params["img_proj_b"])
    head = _tile_head(params["i_head"], b)
    return T.add(T.concat([head, tok], axis=1), params["img_pos"])


def embed_graph_batch(params: dict, latents) -> T.Tensor:
    if not isinstance(latents, T.Tensor):
        latents = T.Tensor(np.asarray(latents, dtype=np.float32))
    if latents.shape[-2:] != (GRAPH_NODES, LATENT_DIM):
        raise T.ShapeError(
            f"expected {GRAPH_NODES}x{LATENT_DIM} node latents, got {latents.shape}"
        )
    tok = T.add(T.matmul(latents, params["graph_proj_w"]), params["graph_proj_b"])
    head = _tile_head(params["g_head"], tok.shape[0])
    return T.concat([head, tok], axis=1)  # no positional embedding: node order free


def embed_language(params: dict, tokens) -> T.Tensor:
    tokens, squeezed = _ensure_batch(tokens, 1)
    out = embed_language_batch(params, tokens)
    return T.reshape(out, out.shape[1:]) if squeezed else out


def embed_image(params: dict, depth) -> T.Tensor:
    depth, squeezed = _ensure_batch(depth, 2)
    out = embed_image_batch(params, depth)
    return T.reshape(out, out.shape[1:]) if squeezed else out


def embed_graph(params: dict, latents) -> T.Tensor:
    latents, squeezed = _ensure_batch(latents, 2)
    out = embed_graph_batch(params, latents)
    return T.reshape(out, out.shape[1:]) if squeezed else out


@dataclass
class PolicyOutput:
    q_pick: T.Tensor         # (..., K) per-node pick score in (0, 1)
    q_place: T.Tensor        # (..., 64, 64) place heatmap in (0, 1)
    success_logit: T.Tensor  # (...,) pre-sigmoid success score
    head_outputs: T.Tensor   # (..., 3, D) final latents of the head tokens


def _attention(params, pre, z, b):
    h = T.layer_norm(z, params[pre + "ln1_g"], params[pre + "ln1_b"])

    def proj(nm):
        x = T.add(T.matmul(h, params[pre + f"w{nm}"]), params[pre + f"b{nm}"])
        x = T.reshape(x, (b, N_TOKENS, N_HEADS, D_HEAD))
        return T.transpose(x, (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(D_HEAD))
    att = T.softmax(att, axis=-1)
    out = T.matmul(att, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, N_TOKENS, D_MODEL))
    return T.add(T.matmul(out, params[pre + "wo"]), params[pre + "bo"])


def forward_batch(params: dict, tokens, depth, latents) -> PolicyOutput:
    tokens = np.asarray(tokens, dtype=np.int64)
    b = tokens.shape[0]
    z = T.concat(
        [
            T.add(embed_language_batch(params, tokens), params["type_lang"]),
            T.add(embed_image_batch(params, depth), params["type_img"]),
            T.add(embed_graph_batch(params, latents), params["type_graph"]),
        ],
        axis=1,
    )
    for l in range(N_LAYERS):
        pre = f"l{l}_"
        z = T.add(z, _attention(params, pre, z, b))
        h = T.layer_norm(z, params[pre + "ln2_g"], params[pre + "ln2_b"])
        h = T.gelu(T.add(T.matmul(h, params[pre + "mlp1_w"]), params[pre + "mlp1_b"]))
        h = T.add(T.matmul(h, params[pre + "mlp2_w"]), params[pre + "mlp2_b"])
        z = T.add(z, h)
    z = T.layer_norm(z, params["lnf_g"], params["lnf_b"])

    node_tok = T.narrow(z, 1, GRAPH_START + 1, GRAPH_NODES)
    q_pick = T.sigmoid(
        T.reshape(T.add(T.matmul(node_tok, params["pick_w"]), params["pick_b"]), (b, GRAPH_NODES))
    )

    g = 64 // PATCH
    patch_tok = T.narrow(z, 1, IMG_START + 1, g * g)
    x = T.transpose(T.reshape(patch_tok, (b, g, g, D_MODEL)), (0, 3, 1, 2))
    x = T.relu(T.conv2d(x, params["place1_w"], params["place1_b"]))
    x = T.upsample2x(x)
    x = T.relu(T.conv2d(x, params["place2_w"], params["place2_b"]))
    x = T.upsample2x(x)
    x = T.relu(T.conv2d(x, params["place3_w"], params["place3_b"]))
    x = T.upsample2x(x)
    x = T.conv2d(x, params["place4_w"], params["place4_b"])
    q_place = T.sigmoid(T.reshape(x, (b, 64, 64)))

    heads = T.concat(
        [T.narrow(z, 1, LANG_START, 1), T.narrow(z, 1, IMG_START, 1), T.narrow(z, 1, GRAPH_START, 1)],
        axis=1,
    )  # (B, 3, D)
    flat = T.reshape(heads, (b, 3 * D_MODEL))
    s = T.relu(T.add(T.matmul(flat, params["suc1_w"]), params["suc1_b"]))
    logit = T.reshape(T.add(T.matmul(s, params["suc2_w"]), params["suc2_b"]), (b,))
    return PolicyOutput(q_pick, q_place, logit, heads)


def forward(params: dict, tokens, depth, latents) -> PolicyOutput:
    """Single-observation forward pass (unbatched shapes in and out)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        return forward_batch(params, tokens, depth, latents)
    lat = latents.node_latents if isinstance(latents, GraphObservation) else latents
    out = forward_batch(params, tokens[None], np.asarray(depth)[None], np.asarray(lat)[None])
    return PolicyOutput(
        T.reshape(out.q_pick, (GRAPH_NODES,)),
        T.reshape(out.q_place, (64, 64)),
        T.reshape(out.success_logit, ()),
        T.reshape(out.head_outputs, (3, D_MODEL)),
    )


def select_action(
    output: PolicyOutput, obs: GraphObservation, camera: Camera = DEFAULT_CAMERA
) -> PickPlaceAction:
    """Argmax decode: pick at the best node, place at the best pixel center.

    Ties resolve to the first (row-major) maximum; both points are clamped
    into the workspace so the action is always executable.
    """
    qp = np.asarray(output.q_pick.data)
    node = int(np.argmax(qp))
    pick_xy = np.asarray(obs.nodes[node, :2], dtype=np.float64)

    qpl = np.asarray(output.q_place.data)
    row, col = np.unravel_index(int(np.argmax(qpl)), qpl.shape)
    place_xy = camera.center_of(row, col)
    lim = WORKSPACE_HALF
    return PickPlaceAction(
        tuple(np.clip(pick_xy, -lim, lim)), tuple(np.clip(place_xy, -lim, lim))
    )


def classify_success(output: PolicyOutput) -> bool:
    return bool(np.asarray(output.success_logit.data) > 0.0)
