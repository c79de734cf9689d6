"""Particle-based cloth simulation with pick-and-place primitives.

The cloth is a 25x25 grid of unit-mass particles joined by stretch
constraints (grid neighbors plus diagonals). Integration is semi-implicit
Euler followed by iterated position projection: mesh distance constraints,
particle-particle separation so folded layers stack instead of merging,
ground contact with friction, and pinning of a grasped particle to the
gripper path. A top-down orthographic depth render and a visibility test
provide the observation side.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .util import make_rng

DT = 0.01
GRAVITY = 9.8
DAMPING = 0.02          # velocity retained factor is (1 - DAMPING) per step
SOLVER_ITERATIONS = 15
SOR_OMEGA = 1.7         # over-relaxation for Jacobi constraint averaging
PARTICLE_RADIUS = 0.01
GRID_ROWS = 25
GRID_COLS = 25
NUM_PARTICLES = GRID_ROWS * GRID_COLS

WORKSPACE_HALF = 0.4    # table spans [-0.4, 0.4] in x and y
WORKSPACE_MARGIN = 0.02
FRICTION = 0.4          # fraction of tangential motion removed at ground contact
COLLISION_MARGIN = 0.01

GRASP_RADIUS = 0.015
LIFT_HEIGHT = 0.08
RELEASE_HEIGHT = 0.03
LIFT_STEPS = 25
LOWER_STEPS = 25
TRANSLATE_SPEED = 0.4   # m/s while carrying
SPAWN_SETTLE_STEPS = 50
RELEASE_SETTLE_STEPS = 100

DEPTH_SIZE = 64
METERS_PER_PIXEL = 2 * WORKSPACE_HALF / DEPTH_SIZE
HEIGHT_CAP = 0.1        # depth value 1.0 corresponds to this height
VISIBILITY_EPS = 0.005


class SimError(ValueError):
    pass


class SpawnError(SimError):
    pass


@functools.lru_cache(maxsize=8)
def _mesh_topology(rows: int, cols: int):
    """Edges (structural + shear) for a grid, plus a lookup set of edge keys."""

    def pid(r, c):
        return r * cols + c

    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((pid(r, c), pid(r, c + 1)))
            if r + 1 < rows:
                edges.append((pid(r + 1, c), pid(r, c)))
            if r + 1 < rows and c + 1 < cols:
                edges.append((pid(r, c), pid(r + 1, c + 1)))
                edges.append((pid(r, c + 1), pid(r + 1, c)))
    e = np.sort(np.array(edges, dtype=np.int32).reshape(-1, 2), axis=1)
    keys = np.unique(e[:, 0].astype(np.int64) * rows * cols + e[:, 1])
    deg = np.bincount(e.ravel(), minlength=rows * cols).astype(np.float32)
    return e, keys, 1.0 / np.maximum(deg, 1.0)


@dataclass
class ClothState:
    positions: np.ndarray       # (P, 3) float32, meters
    velocities: np.ndarray      # (P, 3) float32, m/s
    rest_positions: np.ndarray  # (P, 3) float32, flat grid at spawn
    grid_shape: tuple = (GRID_ROWS, GRID_COLS)
    grasped: int | None = None
    rest_lengths: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("positions", "velocities", "rest_positions"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            setattr(self, name, arr)
        if self.rest_lengths is None:
            e = self.mesh_edges
            d = self.rest_positions[e[:, 0]] - self.rest_positions[e[:, 1]]
            self.rest_lengths = np.linalg.norm(d, axis=1).astype(np.float32)

    @property
    def num_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def mesh_edges(self) -> np.ndarray:
        return _mesh_topology(*self.grid_shape)[0]

    def copy(self) -> "ClothState":
        return ClothState(
            self.positions.copy(),
            self.velocities.copy(),
            self.rest_positions.copy(),
            self.grid_shape,
            self.grasped,
            self.rest_lengths,
        )


@dataclass(frozen=True)
class SpawnConfig:
    side_range: tuple = (0.40, 0.52)
    center_offset: float = 0.06
    yaw_range: float = np.deg2rad(10.0)
    grid_shape: tuple = (GRID_ROWS, GRID_COLS)


@dataclass(frozen=True)
class PickPlaceAction:
    pick_xy: tuple
    place_xy: tuple


def make_grid_state(rows, cols, spacing, center=(0.0, 0.0), yaw=0.0) -> ClothState:
    """Flat grid of particles resting at z = PARTICLE_RADIUS."""
    r_idx, c_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = (c_idx.ravel() - (cols - 1) / 2) * spacing
    y = (r_idx.ravel() - (rows - 1) / 2) * spacing
    cy, sy = np.cos(yaw), np.sin(yaw)
    pos = np.stack(
        [cy * x - sy * y + center[0], sy * x + cy * y + center[1], np.full(x.shape, PARTICLE_RADIUS)],
        axis=1,
    )
    zeros = np.zeros_like(pos)
    return ClothState(pos, zeros, pos.copy(), (rows, cols))


def _max_spawn_extent(config: SpawnConfig) -> float:
    y = abs(config.yaw_range)
    half = config.side_range[1] / 2
    return half * (np.cos(y) + np.sin(y)) + config.center_offset


def spawn(config: SpawnConfig, seed: int) -> ClothState:
    """Sample a flat cloth pose and settle it onto the table."""
    if _max_spawn_extent(config) > WORKSPACE_HALF - WORKSPACE_MARGIN:
        raise SpawnError(
            f"spawn extent {_max_spawn_extent(config):.3f} m may exit the workspace"
        )
    rng = make_rng(seed, 0x5BA6)
    side = rng.uniform(*config.side_range)
    center = rng.uniform(-config.center_offset, config.center_offset, size=2)
    yaw = rng.uniform(-config.yaw_range, config.yaw_range)
    rows, cols = config.grid_shape
    state = make_grid_state(rows, cols, side / (cols - 1), center, yaw)
    settle(state, SPAWN_SETTLE_STEPS)
    return state


def _collision_pairs(state: ClothState, q: np.ndarray) -> tuple:
    """Non-adjacent particle pairs close enough to need separation this step."""
    radius = 2 * PARTICLE_RADIUS + COLLISION_MARGIN
    pairs = cKDTree(q).query_pairs(radius, output_type="ndarray")
    if pairs.size:
        _, mesh_keys, _ = _mesh_topology(*state.grid_shape)
        keys = pairs[:, 0].astype(np.int64) * state.num_particles + pairs[:, 1]
        pairs = pairs[~np.isin(keys, mesh_keys, assume_unique=True)]
    return pairs[:, 0].astype(np.int32), pairs[:, 1].astype(np.int32)


def step(state: ClothState, dt: float = DT, gripper_target=None) -> ClothState:
    """Advance the simulation by one timestep (mutates and returns state)."""
    p = state.positions
    v = state.velocities
    edges, _, inv_deg = _mesh_topology(*state.grid_shape)
    ei, ej = edges[:, 0], edges[:, 1]
    rest = state.rest_lengths
    g = state.grasped

    v[:, 2] -= GRAVITY * dt
    v *= 1.0 - DAMPING
    prev = p.copy()
    q = p + v * dt

    if g is not None:
        target = prev[g] if gripper_target is None else np.asarray(gripper_target, np.float32)
        q[g] = target

    ci, cj = _collision_pairs(state, q)
    n = state.num_particles
    sep = 2 * PARTICLE_RADIUS

    for _ in range(SOLVER_ITERATIONS):
        # stretch constraints, Jacobi with degree averaging and over-relaxation
        d = q[ei] - q[ej]
        ln = np.sqrt(np.einsum("ij,ij->i", d, d))
        f = 0.5 * (ln - rest) / np.maximum(ln, 1e-9)
        d *= f[:, None]
        acc = np.empty_like(q)
        for ax in range(3):
            acc[:, ax] = np.bincount(ei, weights=-d[:, ax], minlength=n) + np.bincount(
                ej, weights=d[:, ax], minlength=n
            )
        q += (SOR_OMEGA * inv_deg)[:, None] * acc.astype(np.float32)

        # particle separation so layers do not interpenetrate
        if ci.size:
            d = q[ci] - q[cj]
            ln = np.sqrt(np.einsum("ij,ij->i", d, d))
            pen = sep - ln
            active = pen > 0
            if active.any():
                ai, aj = ci[active], cj[active]
                d = d[active] * (0.5 * pen[active] / np.maximum(ln[active], 1e-9))[:, None]
                cdeg = np.bincount(ai, minlength=n) + np.bincount(aj, minlength=n)
                scale = 1.0 / np.maximum(cdeg, 1)
                for ax in range(3):
                    q[:, ax] += scale * (
                        np.bincount(ai, weights=d[:, ax], minlength=n)
                        - np.bincount(aj, weights=d[:, ax], minlength=n)
                    )

        np.maximum(q[:, 2], PARTICLE_RADIUS, out=q[:, 2])
        if g is not None:
            q[g] = target

    # ground friction: particles pressed into the table lose tangential motion
    contact = q[:, 2] <= PARTICLE_RADIUS + 1e-6
    if g is not None:
        contact[g] = False
    q[contact, :2] = prev[contact, :2] + (1.0 - FRICTION) * (q[contact, :2] - prev[contact, :2])

    v[:] = (q - prev) / dt
    p[:] = q
    return state


def settle(state: ClothState, steps: int) -> ClothState:
    for _ in range(steps):
        step(state)
    return state


def kinetic_energy(state: ClothState) -> float:
    return float(0.5 * np.sum(state.velocities.astype(np.float64) ** 2))


def _grasp_candidate(state: ClothState, pick_xy) -> int | None:
    d = state.positions[:, :2] - np.asarray(pick_xy, np.float32)
    near = np.einsum("ij,ij->i", d, d) <= GRASP_RADIUS * GRASP_RADIUS
    if not near.any():
        return None
    # topmost particle within reach; ties resolve to the lowest index
    z = np.where(near, state.positions[:, 2], -np.inf)
    return int(np.argmax(z))


def execute_pick_place(state: ClothState, action: PickPlaceAction):
    """Grasp near pick_xy, lift, carry, lower, release, settle.

    Returns (state, grasped_flag). A miss (no particle within GRASP_RADIUS
    of the pick point) returns the state unchanged with grasped_flag False.
    """
    pick = np.asarray(action.pick_xy, np.float32)
    place = np.asarray(action.place_xy, np.float32)
    if np.abs(pick).max() > WORKSPACE_HALF or np.abs(place).max() > WORKSPACE_HALF:
        raise SimError(f"action outside workspace: pick {tuple(pick)}, place {tuple(place)}")
    idx = _grasp_candidate(state, pick)
    if idx is None:
        return state, False

    state.grasped = idx
    start = state.positions[idx].copy()

    def run_phase(frm, to, steps):
        frm, to = np.asarray(frm, np.float64), np.asarray(to, np.float64)
        for k in range(1, steps + 1):
            step(state, DT, frm + (to - frm) * (k / steps))

    top = np.array([start[0], start[1], LIFT_HEIGHT])
    run_phase(start, top, LIFT_STEPS)
    carry_to = np.array([place[0], place[1], LIFT_HEIGHT])
    dist = float(np.linalg.norm(carry_to[:2] - top[:2]))
    run_phase(top, carry_to, max(10, int(np.ceil(dist / (TRANSLATE_SPEED * DT)))))
    drop = np.array([place[0], place[1], RELEASE_HEIGHT])
    run_phase(carry_to, drop, LOWER_STEPS)

    state.grasped = None
    settle(state, RELEASE_SETTLE_STEPS)
    return state, True


@dataclass(frozen=True)
class Camera:
    """Top-down orthographic camera over the square workspace."""

    half_extent: float = WORKSPACE_HALF
    size: int = DEPTH_SIZE

    @property
    def meters_per_pixel(self) -> float:
        return 2 * self.half_extent / self.size

    def pixel_of(self, xy) -> tuple:
        """(row, col) of a world point; row 0 is the -y edge. Clipped in-bounds."""
        xy = np.asarray(xy)
        col = np.floor((xy[..., 0] + self.half_extent) / self.meters_per_pixel).astype(np.int64)
        row = np.floor((xy[..., 1] + self.half_extent) / self.meters_per_pixel).astype(np.int64)
        return (
            np.clip(row, 0, self.size - 1),
            np.clip(col, 0, self.size - 1),
        )

    def center_of(self, row, col) -> np.ndarray:
        """World xy of a pixel center (rows/cols may be arrays)."""
        x = (np.asarray(col) + 0.5) * self.meters_per_pixel - self.half_extent
        y = (np.asarray(row) + 0.5) * self.meters_per_pixel - self.half_extent
        return np.stack([x, y], axis=-1)


DEFAULT_CAMERA = Camera()


@dataclass
class DepthImage:
    values: np.ndarray  # (64, 64) float32 in [0, 1]
    camera: Camera = DEFAULT_CAMERA

    @property
    def meters(self) -> np.ndarray:
        return self.values * HEIGHT_CAP


def render_depth(state: ClothState, camera: Camera = DEFAULT_CAMERA) -> DepthImage:
    """Splat each particle as a disc into a max-height buffer."""
    p = state.positions
    mpp = camera.meters_per_pixel
    col = np.floor((p[:, 0] + camera.half_extent) / mpp).astype(np.int64)
    row = np.floor((p[:, 1] + camera.half_extent) / mpp).astype(np.int64)
    top = p[:, 2] + PARTICLE_RADIUS
    buf = np.zeros((camera.size, camera.size), dtype=np.float64)
    r2 = PARTICLE_RADIUS * PARTICLE_RADIUS
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = row + dr, col + dc
            inb = (rr >= 0) & (rr < camera.size) & (cc >= 0) & (cc < camera.size)
            ctr = camera.center_of(rr, cc)
            d2 = (p[:, 0] - ctr[:, 0]) ** 2 + (p[:, 1] - ctr[:, 1]) ** 2
            m = inb & (d2 <= r2)
            np.maximum.at(buf, (rr[m], cc[m]), top[m])
    values = np.clip(buf, 0.0, HEIGHT_CAP) / HEIGHT_CAP
    return DepthImage(values.astype(np.float32), camera)


def visible_particles(state: ClothState, depth: DepthImage) -> np.ndarray:
    """Indices of particles not hidden under a higher layer.

    A particle is visible when its top surface reaches the depth buffer
    height at its own pixel, within VISIBILITY_EPS.
    """
    row, col = depth.camera.pixel_of(state.positions[:, :2])
    surface = state.positions[:, 2] + PARTICLE_RADIUS
    vis = surface >= depth.meters[row, col] - VISIBILITY_EPS
    return np.nonzero(vis)[0].astype(np.int64)
