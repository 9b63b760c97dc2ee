"""Per-vertex balance-constraint vectors.

Layout: one-hot vertex type, then train / val / test indicators, then the
incident-edge count (in-degree + out-degree).
"""
import numpy as np

from ..graph import MASK_TEST, MASK_TRAIN, MASK_VAL, HomogenizedGraph


def constraint_names(g: HomogenizedGraph) -> tuple[str, ...]:
    return tuple(f"type:{t}" for t in g.schema.vertex_types) + ("train", "val", "test", "degree")


def build_constraints(g: HomogenizedGraph) -> np.ndarray:
    n, T = g.num_vertices, len(g.schema.vertex_types)
    out = np.zeros((n, T + 4), dtype=np.float64)
    out[np.arange(n), g.vertex_types_of(np.arange(n))] = 1.0
    for j, code in enumerate((MASK_TRAIN, MASK_VAL, MASK_TEST)):
        out[:, T + j] = g.masks == code
    out[:, T + 3] = g.in_degrees() + g.out_degrees()
    return out
