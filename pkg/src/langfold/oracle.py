"""Scripted demonstrators, supervision targets, and the LDOM dataset format.

The oracle reads privileged simulator state: it knows which particle sits at
each cloth corner and where material mirror points currently are, so it can
script each fold as one or two pick-and-place actions. Demonstrations record
the observation (depth image + graph) before every action together with the
supervision needed for behavioral cloning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import lang
from .cloth_sim import (
    DEFAULT_CAMERA,
    Camera,
    ClothState,
    DepthImage,
    PickPlaceAction,
    SpawnConfig,
    execute_pick_place,
    render_depth,
    spawn,
)
from .graph import GRAPH_NODES, GraphObservation, build_observation
from .lang import Direction, Instruction, TaskSpec, TaskType
from .util import ByteReader, atomic_write, derive_seed

PICK_NODE_TOLERANCE = 0.02  # max node-to-oracle-pick distance before resampling
MAX_GRAPH_RESAMPLES = 3
DEMO_SEED_RETRIES = 20      # replacement spawn seeds per dataset slot
HEATMAP_SIGMA = 1.5         # pixels

LDOM_MAGIC = b"LDOM"
LDOM_VERSION = 1


class DemonstrationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


# -- task scripts ----------------------------------------------------------------


def corner_particle(grid_shape, corner: Direction) -> int:
    rows, cols = grid_shape
    return {
        Direction.BOTTOM_LEFT: 0,
        Direction.BOTTOM_RIGHT: cols - 1,
        Direction.TOP_LEFT: (rows - 1) * cols,
        Direction.TOP_RIGHT: rows * cols - 1,
    }[corner]


_OPPOSITE = {
    Direction.BOTTOM_LEFT: Direction.TOP_RIGHT,
    Direction.TOP_RIGHT: Direction.BOTTOM_LEFT,
    Direction.BOTTOM_RIGHT: Direction.TOP_LEFT,
    Direction.TOP_LEFT: Direction.BOTTOM_RIGHT,
}

# corners on the moving side of each half fold, in execution order
_HALF_MOVERS = {
    Direction.BOTTOM_OVER_TOP: (Direction.BOTTOM_LEFT, Direction.BOTTOM_RIGHT),
    Direction.TOP_OVER_BOTTOM: (Direction.TOP_LEFT, Direction.TOP_RIGHT),
    Direction.LEFT_OVER_RIGHT: (Direction.BOTTOM_LEFT, Direction.TOP_LEFT),
    Direction.RIGHT_OVER_LEFT: (Direction.BOTTOM_RIGHT, Direction.TOP_RIGHT),
}


def _mirror_particle(grid_shape, particle: int, direction: Direction) -> int:
    """Material mirror image of a particle across the half-fold line."""
    rows, cols = grid_shape
    r, c = divmod(particle, cols)
    if direction in (Direction.BOTTOM_OVER_TOP, Direction.TOP_OVER_BOTTOM):
        return (rows - 1 - r) * cols + c
    return r * cols + (cols - 1 - c)


def oracle_step_count(task_type: TaskType) -> int:
    return 2 if task_type is TaskType.HALF else 1


def oracle_action(state: ClothState, task: TaskSpec, step_index: int):
    """Scripted action for the given step, from privileged state.

    Returns (action, pick_particle).
    """
    pos = state.positions
    if task.task_type is TaskType.CORNER:
        pick = corner_particle(state.grid_shape, task.direction)
        place_xy = pos[:, :2].mean(axis=0)
    elif task.task_type is TaskType.TRIANGLE:
        pick = corner_particle(state.grid_shape, task.direction)
        place_xy = pos[corner_particle(state.grid_shape, _OPPOSITE[task.direction]), :2]
    else:
        mover = _HALF_MOVERS[task.direction][step_index]
        pick = corner_particle(state.grid_shape, mover)
        place_xy = pos[_mirror_particle(state.grid_shape, pick, task.direction), :2]
    action = PickPlaceAction(tuple(pos[pick, :2].tolist()), tuple(np.asarray(place_xy).tolist()))
    return action, pick


def execute_oracle(task: TaskSpec, seed: int, config: SpawnConfig = SpawnConfig()):
    """Run the scripted expert without building observations.

    Returns (final_state, actions). Used both for demonstrations and as the
    deterministic goal reference during evaluation.
    """
    state = spawn(config, seed)
    actions = []
    for t in range(oracle_step_count(task.task_type)):
        action, _ = oracle_action(state, task, t)
        state, ok = execute_pick_place(state, action)
        if not ok:
            raise DemonstrationError(f"oracle grasp missed at step {t} (seed {seed})")
        actions.append(action)
    return state, actions


# -- demonstrations ---------------------------------------------------------------


@dataclass
class DemoStep:
    depth: DepthImage
    graph: GraphObservation
    state: ClothState               # snapshot before the action
    pick_particle: int
    pick_node: int                  # graph node used as the pick target
    place_pixel: tuple              # (row, col) containing the place point
    action: PickPlaceAction


@dataclass
class Demonstration:
    instruction: Instruction | None
    task: TaskSpec
    steps: list
    final_state: ClothState

    @property
    def oracle_final_positions(self) -> np.ndarray:
        return self.final_state.positions


def _nearest_node(graph: GraphObservation, point: np.ndarray):
    d = graph.nodes - point[None, :]
    d2 = np.einsum("ij,ij->i", d, d)
    i = int(np.argmin(d2))
    return i, float(np.sqrt(d2[i]))


def demonstrate(
    task: TaskSpec,
    seed: int,
    config: SpawnConfig = SpawnConfig(),
    instruction: Instruction | None = None,
    camera: Camera = DEFAULT_CAMERA,
) -> Demonstration:
    state = spawn(config, seed)
    steps = []
    for t in range(oracle_step_count(task.task_type)):
        depth = render_depth(state, camera)
        action, pick_particle = oracle_action(state, task, t)
        pick_pos = state.positions[pick_particle]

        pick_node = None
        graph = None
        for attempt in range(MAX_GRAPH_RESAMPLES + 1):
            graph = build_observation(state, depth, None, seed=attempt)
            node, dist = _nearest_node(graph, pick_pos)
            if dist <= PICK_NODE_TOLERANCE:
                pick_node = node
                break
        if pick_node is None:
            raise DemonstrationError(
                f"no graph node within {PICK_NODE_TOLERANCE} m of the oracle pick "
                f"after {MAX_GRAPH_RESAMPLES} resamples (seed {seed}, step {t})"
            )

        row, col = camera.pixel_of(np.asarray(action.place_xy))
        steps.append(
            DemoStep(depth, graph, state.copy(), pick_particle, pick_node, (int(row), int(col)), action)
        )
        state, ok = execute_pick_place(state, action)
        if not ok:
            raise DemonstrationError(f"oracle grasp missed at step {t} (seed {seed})")
    return Demonstration(instruction, task, steps, state.copy())


# -- supervision targets -----------------------------------------------------------


@dataclass
class SupervisionTargets:
    q_pick_gt: np.ndarray   # (K,) one-hot
    q_place_gt: np.ndarray  # (64, 64) Gaussian peak 1 at place_pixel
    success_label: bool


def gaussian_heatmap(place_pixel, size: int = 64, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    pr, pc = place_pixel
    rows = np.arange(size)[:, None] - pr
    cols = np.arange(size)[None, :] - pc
    return np.exp(-(rows * rows + cols * cols) / (2.0 * sigma * sigma)).astype(np.float32)


def make_targets(step, success_label: bool = False, k: int = GRAPH_NODES) -> SupervisionTargets:
    pick = np.zeros(k, dtype=np.float32)
    pick[step.pick_node] = 1.0
    return SupervisionTargets(pick, gaussian_heatmap(step.place_pixel), success_label)


# -- LDOM serialization ------------------------------------------------------------


def _state_floats(state: ClothState) -> np.ndarray:
    return np.concatenate(
        [state.positions.ravel(), state.velocities.ravel(), state.rest_positions.ravel()]
    ).astype("<f4")


def _state_from_floats(flat: np.ndarray) -> ClothState:
    if flat.size % 9 != 0:
        raise DatasetError(f"state block of {flat.size} floats is not 3x(P x 3)")
    p = flat.size // 9
    side = int(round(np.sqrt(p)))
    if side * side != p:
        raise DatasetError(f"particle count {p} is not a square grid")
    arrs = flat.reshape(3, p, 3)
    return ClothState(arrs[0].copy(), arrs[1].copy(), arrs[2].copy(), (side, side))


def _write_step(buf: bytearray, depth_values, nodes, edges, pick_node, place_pixel, state):
    buf += np.asarray(depth_values, "<f4").tobytes()
    buf += struct.pack("<H", nodes.shape[0])
    buf += np.asarray(nodes, "<f4").tobytes()
    buf += struct.pack("<I", edges.shape[0])
    buf += np.asarray(edges, "<u2").tobytes()
    buf += struct.pack("<HHH", pick_node, place_pixel[0], place_pixel[1])
    floats = _state_floats(state)
    buf += struct.pack("<I", floats.size)
    buf += floats.tobytes()


@dataclass
class StoredStep:
    depth_values: np.ndarray
    nodes: np.ndarray
    edges: np.ndarray
    pick_node: int
    place_pixel: tuple
    state: ClothState

    @property
    def depth(self) -> DepthImage:
        return DepthImage(self.depth_values)

    def graph(self, gnn_params=None) -> GraphObservation:
        """Rebuild the observation graph; GNN fields recomputed on demand."""
        source = _match_source_particles(self.nodes, self.state.positions)
        obs = GraphObservation(
            nodes=self.nodes,
            source_particles=source,
            edges=self.edges,
            mesh_edge_prob=np.zeros(self.edges.shape[0], np.float32),
            node_latents=np.zeros((self.nodes.shape[0], 64), np.float32),
        )
        if gnn_params is not None:
            from .graph import edge_gnn_forward

            probs, latents = edge_gnn_forward(gnn_params, self.nodes, self.edges)
            obs.mesh_edge_prob = probs.data.astype(np.float32)
            obs.node_latents = latents.data.astype(np.float32)
        return obs


def _match_source_particles(nodes: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Nodes are verbatim copies of particle positions; recover the indices."""
    from scipy.spatial import cKDTree

    dist, idx = cKDTree(positions).query(nodes)
    if np.any(dist > 1e-6):
        raise DatasetError("graph node does not coincide with any stored particle")
    return idx.astype(np.int64)


@dataclass
class StoredDemo:
    tokens: np.ndarray
    task: TaskSpec
    steps: list
    final_state: ClothState
    negatives: list
    instruction: Instruction = field(default=None)

    @property
    def oracle_final_positions(self) -> np.ndarray:
        return self.final_state.positions


@dataclass
class Dataset:
    demos: list

    def __len__(self):
        return len(self.demos)


def _read_step(r: ByteReader) -> StoredStep:
    depth = r.array("<f4", 64 * 64).reshape(64, 64).copy()
    k = r.unpack("<H")
    nodes = r.array("<f4", k * 3).reshape(k, 3).copy()
    n_edges = r.unpack("<I")
    edges = r.array("<u2", n_edges * 2).reshape(n_edges, 2).astype(np.int32)
    pick, prow, pcol = r.unpack("<HHH")
    n_floats = r.unpack("<I")
    state = _state_from_floats(r.array("<f4", n_floats).astype(np.float32))
    return StoredStep(depth, nodes, edges, int(pick), (int(prow), int(pcol)), state)


def _step_arrays(s) -> tuple:
    # live DemoStep carries a GraphObservation; StoredStep carries bare arrays
    if isinstance(s, StoredStep):
        return s.nodes, s.edges
    return s.graph.nodes, s.graph.edges


def save_dataset(path, demos: list) -> None:
    """Serialize demos; accepts fresh demonstrations and reloaded ones alike."""
    buf = bytearray()
    buf += LDOM_MAGIC
    buf += struct.pack("<HI", LDOM_VERSION, len(demos))
    for demo in demos:
        if demo.instruction is not None:
            tokens = demo.instruction.tokens
        else:
            tokens = getattr(demo, "tokens", None)
            tokens = lang.tokenize("") if tokens is None else tokens
        buf += struct.pack("<H", tokens.size)
        buf += np.asarray(tokens, "<u2").tobytes()
        buf += struct.pack("<BBB", demo.task.task_type.value, demo.task.direction_code, len(demo.steps))
        for s in demo.steps:
            nodes, edges = _step_arrays(s)
            _write_step(buf, s.depth.values, nodes, edges, s.pick_node, s.place_pixel, s.state)
        buf += struct.pack("<I", _state_floats(demo.final_state).size)
        buf += _state_floats(demo.final_state).tobytes()
        # success-classifier negatives: the pre-action observations, re-stored
        # with placeholder action fields
        buf += struct.pack("<B", len(demo.steps))
        for s in demo.steps:
            nodes, edges = _step_arrays(s)
            _write_step(buf, s.depth.values, nodes, edges, 0, (0, 0), s.state)
    atomic_write(path, bytes(buf))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = ByteReader(f.read(), what=str(path))
    if r.take(4) != LDOM_MAGIC:
        raise DatasetError(f"{path}: bad magic, not an LDOM file")
    version, n_demos = r.unpack("<HI")
    if version != LDOM_VERSION:
        raise DatasetError(f"{path}: unsupported LDOM version {version}")
    demos = []
    for _ in range(n_demos):
        n_tok = r.unpack("<H")
        tokens = r.array("<u2", n_tok).astype(np.int64)
        task_code, dir_code, n_steps = r.unpack("<BBB")
        task = TaskSpec.from_codes(task_code, dir_code)
        steps = [_read_step(r) for _ in range(n_steps)]
        n_floats = r.unpack("<I")
        final_state = _state_from_floats(r.array("<f4", n_floats).astype(np.float32))
        n_neg = r.unpack("<B")
        negatives = [_read_step(r) for _ in range(n_neg)]
        text = lang.detokenize(tokens)
        instruction = lang.instruction_from_text(text) if text else None
        if instruction is not None and instruction.task != task:
            raise DatasetError(f"{path}: instruction text does not match stored task codes")
        demos.append(StoredDemo(tokens, task, steps, final_state, negatives, instruction))
    if not r.done():
        raise DatasetError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Dataset(demos)


# -- dataset generation ------------------------------------------------------------


def dataset_cells():
    """(task, direction) pairs that may appear in training data."""
    return [
        TaskSpec(task_type, d)
        for task_type in TaskType
        for d in lang.training_directions(task_type)
    ]


def _demo_job(args):
    task_code, dir_code, template_id, spawn_seed, config = args
    task = TaskSpec.from_codes(task_code, dir_code)
    instruction = Instruction(
        lang.render_instruction(task, template_id), task, template_id, lang.Split.SEEN
    )
    # A rare spawn leaves the scripted pick with no sampled node inside
    # tolerance even after graph resamples; swap in a derived replacement
    # seed rather than failing the whole dataset. attempt 0 keeps the
    # original seed so existing datasets reproduce byte for byte.
    for attempt in range(DEMO_SEED_RETRIES):
        try:
            seed = derive_seed(spawn_seed, attempt) if attempt else spawn_seed
            return demonstrate(task, seed, config, instruction)
        except DemonstrationError:
            if attempt == DEMO_SEED_RETRIES - 1:
                raise


def generate_dataset(
    n_per_cell: int,
    seed: int,
    path,
    config: SpawnConfig = SpawnConfig(),
    workers: int = 1,
) -> Dataset:
    """Write n_per_cell demos for each (task x training-direction) cell.

    Demos are interleaved across cells (all cells' demo i before any demo
    i+1) so a prefix of the file is balanced. Instructions cycle through the
    seen templates. Deterministic in (n_per_cell, seed, config).
    """
    cells = dataset_cells()
    jobs = []
    for i in range(n_per_cell):
        for c, task in enumerate(cells):
            template = lang.seen_template_ids(task.task_type)[i % lang.SEEN_TEMPLATES_PER_TASK]
            jobs.append(
                (
                    task.task_type.value,
                    task.direction_code,
                    template,
                    derive_seed(seed, 0xDE30, c, i),
                    config,
                )
            )
    if workers > 1:
        import multiprocessing as mp

        with mp.Pool(workers) as pool:
            demos = list(pool.imap(_demo_job, jobs, chunksize=1))
    else:
        demos = [_demo_job(j) for j in jobs]
    save_dataset(path, demos)
    return load_dataset(path)
