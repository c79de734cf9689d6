"""Staged training: edge GNN first, then the action policy, then the success head.

Each stage freezes everything trained before it. All shuffling is derived
from the config seed, so a fixed (dataset, config) pair reproduces the same
parameters bit for bit.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cloth_sim import render_depth
from .graph import build_observation, edge_gnn_forward, init_edge_gnn, mesh_edge_labels
from .model import forward_batch, init_policy
from .oracle import DatasetError, make_targets
from .util import ByteReader, atomic_write, make_rng

log = logging.getLogger(__name__)

LDCK_MAGIC = b"LDCK"
LDCK_VERSION = 1

GRAD_CLIP = 1.0
# the only policy parameters stage 3 is allowed to touch
SUCCESS_PARAMS = ("suc1_w", "suc1_b", "suc2_w", "suc2_b")


class CheckpointError(ValueError):
    """Unreadable, corrupted, or schema-incompatible checkpoint file."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch: int = 16
    epochs_edges: int = 20
    epochs_policy: int = 100
    epochs_success: int = 20
    seed: int = 0
    eval_every: int = 10  # epochs between held-out metric logs; 0 disables
    data_path: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be at least 1, got {self.batch}")
        for name in ("epochs_edges", "epochs_policy", "epochs_success"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")


def freeze(params: dict) -> dict:
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return params


def _zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


def _split_demos(demos: list) -> tuple[list, list]:
    """Every tenth demo is held out; tiny datasets keep everything for training."""
    held = [d for i, d in enumerate(demos) if i % 10 == 9]
    train = [d for i, d in enumerate(demos) if i % 10 != 9]
    if not train:
        return list(demos), []
    return train, held


def _batches(n: int, batch: int, rng) -> list[np.ndarray]:
    """Shuffled index batches covering all n items, last one possibly short."""
    order = rng.permutation(n)
    return [order[s : s + batch] for s in range(0, n, batch)]


# -- stage 1: edge GNN ---------------------------------------------------------------


@dataclass
class EdgeItem:
    nodes: np.ndarray   # (K, 3)
    edges: np.ndarray   # (E, 2)
    labels: np.ndarray  # (E,) float 0/1 mesh-neighbor truth


def edge_items(demos: list) -> list[EdgeItem]:
    """One training graph per stored demo step, labeled from rest positions."""
    items = []
    for demo in demos:
        for step in demo.steps:
            obs = step.graph()
            labels = mesh_edge_labels(obs, step.state).astype(np.float32)
            if labels.size:
                items.append(EdgeItem(step.nodes, step.edges, labels))
    return items


def evaluate_edge_gnn(params: dict, items: list) -> dict:
    """Loss plus F1/precision/recall of thresholded predictions at 0.5."""
    tp = fp = fn = 0
    total = 0.0
    n_edges = 0
    for it in items:
        probs, _ = edge_gnn_forward(params, it.nodes, it.edges)
        total += float(
            T.binary_cross_entropy(probs, it.labels).data.sum()
        )
        pred = probs.data > 0.5
        truth = it.labels > 0.5
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
        n_edges += it.labels.size
    denom = 2 * tp + fp + fn
    return {
        "loss": total / max(n_edges, 1),
        "f1": 1.0 if denom == 0 else 2 * tp / denom,
        "precision": 1.0 if tp + fp == 0 else tp / (tp + fp),
        "recall": 1.0 if tp + fn == 0 else tp / (tp + fn),
    }


@dataclass
class EdgeGnnResult:
    params: dict
    epoch_losses: list
    holdout: dict  # evaluate_edge_gnn metrics on the held-out graphs


def fit_edge_gnn(params: dict, items: list, config: TrainConfig, holdout: list = ()) -> list:
    if not items:
        raise DatasetError("no edge-labeled graphs to train on")
    opt = T.AdamState(params)
    losses = []
    for epoch in range(config.epochs_edges):
        rng = make_rng(config.seed, 0xED6E, epoch)
        run = 0.0
        for idx in _batches(len(items), config.batch, rng):
            _zero_grads(params)
            terms = []
            for i in idx:
                it = items[i]
                probs, _ = edge_gnn_forward(params, it.nodes, it.edges)
                terms.append(T.reshape(T.reduce_mean(T.binary_cross_entropy(probs, it.labels)), (1,)))
            loss = T.reduce_mean(T.concat(terms, axis=0))
            loss.backward()
            T.clip_grad_norm(params, GRAD_CLIP)
            T.adam_step(params, opt, config.lr)
            run += loss.item() * idx.size
        losses.append(run / len(items))
        if config.eval_every and (epoch + 1) % config.eval_every == 0 and holdout:
            m = evaluate_edge_gnn(params, holdout)
            log.info("edges epoch %d/%d loss %.4f holdout f1 %.3f",
                     epoch + 1, config.epochs_edges, losses[-1], m["f1"])
        else:
            log.debug("edges epoch %d/%d loss %.4f", epoch + 1, config.epochs_edges, losses[-1])
    return losses


def train_edge_gnn(dataset, config: TrainConfig = TrainConfig()) -> EdgeGnnResult:
    """Stage 1: fit the mesh-edge classifier, report held-out F1, freeze it."""
    if not len(dataset):
        raise DatasetError("cannot train the edge GNN on an empty dataset")
    train_demos, held_demos = _split_demos(dataset.demos)
    train = edge_items(train_demos)
    held = edge_items(held_demos)
    params = init_edge_gnn(config.seed)
    losses = fit_edge_gnn(params, train, config, holdout=held)
    metrics = evaluate_edge_gnn(params, held if held else train)
    log.info("edge GNN final %s f1 %.3f (precision %.3f recall %.3f)",
             "holdout" if held else "training", metrics["f1"], metrics["precision"],
             metrics["recall"])
    freeze(params)
    return EdgeGnnResult(params, losses, metrics)


# -- stage 2: action policy ----------------------------------------------------------


@dataclass
class PolicyItem:
    tokens: np.ndarray      # (MAX_TOKENS,) int64
    depth: np.ndarray       # (64, 64) float32
    latents: np.ndarray     # (K, LATENT_DIM) float32, from the frozen GNN
    q_pick_gt: np.ndarray   # (K,) one-hot
    q_place_gt: np.ndarray  # (64, 64) Gaussian peak at the demo place pixel


def policy_items(demos: list, gnn_params: dict) -> list[PolicyItem]:
    """Flatten demos into supervised steps with node latents precomputed once."""
    items = []
    for demo in demos:
        for step in demo.steps:
            _, latents = edge_gnn_forward(gnn_params, step.nodes, step.edges)
            tg = make_targets(step)
            items.append(
                PolicyItem(
                    np.asarray(demo.tokens, np.int64),
                    np.asarray(step.depth_values, np.float32),
                    latents.data.astype(np.float32),
                    tg.q_pick_gt,
                    tg.q_place_gt,
                )
            )
    return items


def _stack_policy_batch(items: list):
    tokens = np.stack([it.tokens for it in items])
    depth = np.stack([it.depth for it in items])
    latents = np.stack([it.latents for it in items])
    pick_gt = np.stack([it.q_pick_gt for it in items])
    place_gt = np.stack([it.q_place_gt for it in items])
    return tokens, depth, latents, pick_gt, place_gt


def policy_batch_loss(params: dict, items: list) -> T.Tensor:
    """Mean-per-element pick BCE plus place BCE, equally weighted."""
    tokens, depth, latents, pick_gt, place_gt = _stack_policy_batch(items)
    out = forward_batch(params, tokens, depth, latents)
    return T.add(
        T.reduce_mean(T.binary_cross_entropy(out.q_pick, pick_gt)),
        T.reduce_mean(T.binary_cross_entropy(out.q_place, place_gt)),
    )


def policy_action_accuracy(params: dict, items: list, batch: int = 16) -> tuple:
    """(pick argmax accuracy, fraction of place argmaxes within 2 px of target)."""
    pick_ok = place_ok = 0
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        tokens, depth, latents, pick_gt, place_gt = _stack_policy_batch(chunk)
        out = forward_batch(params, tokens, depth, latents)
        pick_ok += int(np.sum(out.q_pick.data.argmax(1) == pick_gt.argmax(1)))
        b = len(chunk)
        pr, pc = np.unravel_index(out.q_place.data.reshape(b, -1).argmax(1), (64, 64))
        gr, gc = np.unravel_index(place_gt.reshape(b, -1).argmax(1), (64, 64))
        place_ok += int(np.sum(np.hypot(pr - gr, pc - gc) <= 2.0))
    return pick_ok / len(items), place_ok / len(items)


@dataclass
class PolicyResult:
    params: dict
    epoch_losses: list
    pick_accuracy: float    # training-set pick-node argmax accuracy
    place_within_2px: float


def fit_policy(params: dict, items: list, config: TrainConfig) -> list:
    if not items:
        raise DatasetError("no supervised steps to train the policy on")
    opt = T.AdamState(params)
    losses = []
    for epoch in range(config.epochs_policy):
        rng = make_rng(config.seed, 0x90C1, epoch)
        run = 0.0
        for idx in _batches(len(items), config.batch, rng):
            _zero_grads(params)
            loss = policy_batch_loss(params, [items[i] for i in idx])
            loss.backward()
            T.clip_grad_norm(params, GRAD_CLIP)
            T.adam_step(params, opt, config.lr)
            run += loss.item() * idx.size
        losses.append(run / len(items))
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            sample = items[: min(len(items), 320)]
            pick_acc, place_acc = policy_action_accuracy(params, sample, config.batch)
            log.info("policy epoch %d/%d loss %.4f pick %.3f place2px %.3f",
                     epoch + 1, config.epochs_policy, losses[-1], pick_acc, place_acc)
        else:
            log.debug("policy epoch %d/%d loss %.4f", epoch + 1, config.epochs_policy, losses[-1])
    return losses


def train_policy(dataset, edge_gnn: dict, config: TrainConfig = TrainConfig()) -> PolicyResult:
    """Stage 2: behavior-clone pick/place heads on demo actions; GNN stays frozen."""
    if not len(dataset):
        raise DatasetError("cannot train the policy on an empty dataset")
    freeze(edge_gnn)
    items = policy_items(dataset.demos, edge_gnn)
    params = init_policy(config.seed)
    losses = fit_policy(params, items, config)
    pick_acc, place_acc = policy_action_accuracy(params, items, config.batch)
    log.info("policy final training pick %.3f place2px %.3f", pick_acc, place_acc)
    return PolicyResult(params, losses, pick_acc, place_acc)


# -- stage 3: success classifier -----------------------------------------------------


@dataclass
class SuccessItem:
    tokens: np.ndarray
    depth: np.ndarray
    latents: np.ndarray
    label: float


def success_items(demos: list, gnn_params: dict) -> tuple[list, np.ndarray]:
    """Terminal states as positives, stored pre-action states as negatives.

    Returns (items, demo_index per item) so callers can split by demo.
    """
    items = []
    owner = []
    n_neg = 0
    for d, demo in enumerate(demos):
        tokens = np.asarray(demo.tokens, np.int64)
        depth = render_depth(demo.final_state)
        obs = build_observation(demo.final_state, depth, gnn_params, seed=0)
        items.append(SuccessItem(tokens, depth.values, obs.node_latents, 1.0))
        owner.append(d)
        for neg in demo.negatives:
            _, latents = edge_gnn_forward(gnn_params, neg.nodes, neg.edges)
            items.append(
                SuccessItem(tokens, np.asarray(neg.depth_values, np.float32),
                            latents.data.astype(np.float32), 0.0)
            )
            owner.append(d)
            n_neg += 1
    if n_neg == 0:
        raise DatasetError("dataset has no negative examples for the success classifier")
    return items, np.asarray(owner)


def _head_features(policy: dict, items: list, batch: int = 16) -> np.ndarray:
    """Frozen-transformer fused features (N, 3*D) feeding the success MLP."""
    feats = []
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        out = forward_batch(
            policy,
            np.stack([it.tokens for it in chunk]),
            np.stack([it.depth for it in chunk]),
            np.stack([it.latents for it in chunk]),
        )
        feats.append(out.head_outputs.data.reshape(len(chunk), -1))
    return np.concatenate(feats, axis=0)


def _success_logits(policy: dict, feats: T.Tensor) -> T.Tensor:
    # same two layers forward_batch applies to the head tokens
    s = T.relu(T.add(T.matmul(feats, policy["suc1_w"]), policy["suc1_b"]))
    return T.reshape(T.add(T.matmul(s, policy["suc2_w"]), policy["suc2_b"]), (feats.shape[0],))


@dataclass
class SuccessResult:
    params: dict        # the full policy dict, success head updated in place
    epoch_losses: list
    holdout_accuracy: float


def fit_success_head(policy: dict, feats: np.ndarray, labels: np.ndarray,
                     rows: np.ndarray, config: TrainConfig) -> list:
    """Train suc1/suc2 on precomputed fused features; nothing else gets grads."""
    head = {k: policy[k] for k in SUCCESS_PARAMS}
    for p in head.values():
        p.requires_grad = True
    opt = T.AdamState(head)
    losses = []
    for epoch in range(config.epochs_success):
        rng = make_rng(config.seed, 0x5C35, epoch)
        run = 0.0
        for idx in _batches(rows.size, config.batch, rng):
            take = rows[idx]
            _zero_grads(head)
            logits = _success_logits(policy, T.Tensor(feats[take]))
            loss = T.reduce_mean(T.binary_cross_entropy(T.sigmoid(logits), labels[take]))
            loss.backward()
            T.clip_grad_norm(head, GRAD_CLIP)
            T.adam_step(head, opt, config.lr)
            run += loss.item() * idx.size
        losses.append(run / rows.size)
        log.debug("success epoch %d/%d loss %.4f", epoch + 1, config.epochs_success, losses[-1])
    return losses


def success_head_accuracy(policy: dict, feats: np.ndarray, labels: np.ndarray) -> float:
    logits = _success_logits(policy, T.Tensor(feats)).data
    return float(np.mean((logits > 0.0) == (labels > 0.5)))


def train_success_classifier(dataset, models: "Models", config: TrainConfig = TrainConfig()) -> SuccessResult:
    """Stage 3: fit suc1/suc2 on frozen features; everything else untouched."""
    if not len(dataset):
        raise DatasetError("cannot train the success classifier on an empty dataset")
    if models.edge_gnn is None or models.policy is None:
        raise CheckpointError("success training needs both edge_gnn and policy models")
    policy = models.policy
    items, owner = success_items(dataset.demos, models.edge_gnn)
    feats = _head_features(policy, items, config.batch)
    labels = np.asarray([it.label for it in items], np.float32)

    held_mask = (owner % 10 == 9) if len(dataset.demos) >= 10 else np.zeros(len(items), bool)
    tr = np.flatnonzero(~held_mask)
    ho = np.flatnonzero(held_mask)

    losses = fit_success_head(policy, feats, labels, tr, config)
    eval_rows = ho if ho.size else tr
    accuracy = success_head_accuracy(policy, feats[eval_rows], labels[eval_rows])
    log.info("success classifier %s accuracy %.3f",
             "holdout" if ho.size else "training", accuracy)
    return SuccessResult(policy, losses, accuracy)


# -- LDCK checkpoints ----------------------------------------------------------------


@dataclass
class Models:
    edge_gnn: dict | None = None
    policy: dict | None = None


@dataclass
class Checkpoint:
    models: Models
    stage: int
    meta: dict = field(default_factory=dict)


_GROUP_SCHEMAS = {"edge_gnn": init_edge_gnn, "policy": init_policy}


def _config_meta(config: TrainConfig | None) -> dict:
    if config is None:
        return {}
    return {
        "lr": config.lr,
        "batch": config.batch,
        "epochs_edges": config.epochs_edges,
        "epochs_policy": config.epochs_policy,
        "epochs_success": config.epochs_success,
        "seed": config.seed,
        "eval_every": config.eval_every,
    }


def save_checkpoint(models: Models, path, stage: int = 0, config: TrainConfig | None = None) -> None:
    """Write every model tensor plus numeric metadata, CRC32-sealed."""
    tensors: dict[str, np.ndarray] = {}
    for group in _GROUP_SCHEMAS:
        params = getattr(models, group)
        if params is not None:
            for name, p in params.items():
                tensors[f"{group}.{name}"] = p.data
    tensors["meta.stage"] = np.float32(stage)
    for key, value in _config_meta(config).items():
        tensors[f"meta.{key}"] = np.float32(value)

    buf = bytearray()
    buf += LDCK_MAGIC
    buf += struct.pack("<HI", LDCK_VERSION, len(tensors))
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw))
        buf += raw
        # asarray, not ascontiguousarray: the latter promotes 0-d metadata to 1-d
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    atomic_write(path, bytes(buf))


def _group_params(found: dict, group: str) -> dict | None:
    prefix = group + "."
    present = {k[len(prefix):]: v for k, v in found.items() if k.startswith(prefix)}
    if not present:
        return None
    schema = {k: p.shape for k, p in _GROUP_SCHEMAS[group](0).items()}
    for name in schema:
        if name not in present:
            raise CheckpointError(f"checkpoint missing tensor {prefix}{name}")
    for name, arr in present.items():
        if name not in schema:
            raise CheckpointError(f"checkpoint has unknown tensor {prefix}{name}")
        if arr.shape != schema[name]:
            raise CheckpointError(
                f"checkpoint tensor {prefix}{name} has shape {arr.shape}, expected {schema[name]}"
            )
    return {k: T.Tensor(present[k], requires_grad=True) for k in schema}


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(LDCK_MAGIC) + 10:
        raise CheckpointError(f"{path}: truncated checkpoint")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file truncated or corrupted")
    r = ByteReader(data[:-4], what=str(path))
    if r.take(4) != LDCK_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an LDCK file")
    version, count = r.unpack("<HI")
    if version != LDCK_VERSION:
        raise CheckpointError(f"{path}: unsupported LDCK version {version}")
    found: dict[str, np.ndarray] = {}
    for _ in range(count):
        n = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        if name in found:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        rank = r.unpack("<B")
        shape = tuple(int(d) for d in r.array("<u4", rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        found[name] = r.array("<f4", size).reshape(shape).astype(np.float32)
    if not r.done():
        raise CheckpointError(f"{path}: trailing bytes after tensor table")

    meta = {}
    grouped = {}
    for name, arr in found.items():
        if name.startswith("meta."):
            if arr.shape != ():
                raise CheckpointError(f"{path}: metadata entry {name} is not a scalar")
            meta[name[5:]] = float(arr)
        else:
            group = name.split(".", 1)[0]
            if group not in _GROUP_SCHEMAS:
                raise CheckpointError(f"{path}: unknown tensor {name}")
            grouped[name] = arr
    models = Models(
        edge_gnn=_group_params(grouped, "edge_gnn"),
        policy=_group_params(grouped, "policy"),
    )
    stage = int(meta.pop("stage", 0))
    return Checkpoint(models, stage, meta)
