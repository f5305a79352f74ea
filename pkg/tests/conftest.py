from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from cadrepair.geometry import CommandSequence, EdgeKind, SketchEdge

finite_floats = st.floats(allow_nan=False, allow_infinity=False)
small_floats = st.floats(-2.0, 2.0, allow_nan=False)


@st.composite
def sketch_edges(draw, coord=finite_floats, bulge=finite_floats):
    kind = draw(st.sampled_from([EdgeKind.LINE, EdgeKind.ARC]))
    target = (draw(coord), draw(coord))
    b = draw(bulge) if kind is EdgeKind.ARC else 0.0
    return SketchEdge(kind, target, b)


@st.composite
def command_sequences(draw, coord=finite_floats, bulge=finite_floats, depth=finite_floats):
    edges = draw(st.lists(sketch_edges(coord, bulge), min_size=0, max_size=5))
    return CommandSequence(tuple(edges), draw(depth))


@st.composite
def latent_vectors(draw, values=st.floats(-3.0, 3.0, allow_nan=False)):
    return np.array(draw(st.lists(values, min_size=21, max_size=21)))


def random_simple_polygon(rng: np.random.Generator, n: int) -> np.ndarray:
    """Star-shaped polygon around the origin: simple by construction."""
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    radii = rng.uniform(0.3, 1.0, n)
    return np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
