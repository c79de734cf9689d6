"""Shared builders for simulator states used across test modules."""

import numpy as np
import pytest

from langfold import cloth_sim as cs
from langfold import oracle as O

# narrow spawn ranges keep per-demo settling cheap in tests
FAST_SPAWN = cs.SpawnConfig(side_range=(0.44, 0.48), center_offset=0.03, yaw_range=np.deg2rad(5))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """One demo per training cell (9 total), written to disk once per run."""
    path = tmp_path_factory.mktemp("data") / "small.ldom"
    ds = O.generate_dataset(1, seed=7, path=path, config=FAST_SPAWN)
    return path, ds


def teleport_fold(settle_steps=50):
    """25x25 flat cloth with its right half mirrored onto the left, settled.

    Returns (state, grid_index_array, folded_particle_ids). The mirror line
    sits between columns 12 and 13 so crease edges keep their rest length.
    """
    st = cs.make_grid_state(25, 25, 0.02)
    idx = np.arange(625).reshape(25, 25)
    right = idx[:, 13:].ravel()
    xline = st.positions[idx[0, 12], 0] + 0.01
    pos = st.positions.copy()
    pos[right, 0] = 2 * xline - pos[right, 0]
    pos[right, 2] = 3 * cs.PARTICLE_RADIUS
    st = cs.ClothState(pos, np.zeros_like(pos), st.rest_positions, (25, 25))
    cs.settle(st, settle_steps)
    return st, idx, right
