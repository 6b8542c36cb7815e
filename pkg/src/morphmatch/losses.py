"""Registration, as-rigid-as-possible and geodesic-preservation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .geodesic import DenseDistances
from .mesh import EdgeSet
from .ndiff import Value


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


@dataclass
class LossWeights:
    reg: float = 100.0
    arap: float = 1.0
    geo: float = 1.0

    def __post_init__(self):
        if min(self.reg, self.arap, self.geo) < 0:
            raise ValueError("loss weights must be non-negative")


def registration_loss(x_t: Value, pi, y: np.ndarray) -> Value:
    """``|pi Y - X_T|^2``."""
    pi = nd.as_value(pi)
    return nd.sq_frobenius(pi @ Value(np.asarray(y, dtype=pi.dtype)) - x_t)


def kabsch_batch(h: np.ndarray) -> np.ndarray:
    """Rotations maximizing ``trace(R H)`` for a stack of ``(k, 3, 3)`` cross-covariances.

    A vanishing ``H`` yields the identity; otherwise the singular direction of
    the smallest singular value is flipped when needed so that ``det R = +1``.
    """
    h = np.asarray(h, dtype=np.float64)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, 1, 2) @ np.swapaxes(u, 1, 2)))
    d[d == 0] = 1.0
    fix = np.ones((len(h), 3))
    fix[:, 2] = d
    r = np.swapaxes(vt, 1, 2) @ (fix[:, :, None] * np.swapaxes(u, 1, 2))
    tiny = np.linalg.norm(h.reshape(len(h), -1), axis=1) < 1e-12
    r[tiny] = np.eye(3)
    return r


def kabsch_rotation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Rotation ``R`` in SO(3) minimizing ``sum |R p_l - q_l|^2`` over paired rows."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    return kabsch_batch((p.T @ q)[None])[0]


def local_rotations(edges: EdgeSet, ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
    """Per-vertex Kabsch rotations taking edge vectors ``ea`` onto ``eb``."""
    outer = ea[:, :, None] * eb[:, None, :]
    h = np.add.reduceat(outer.reshape(len(ea), 9).astype(np.float64),
                        edges.offsets[:-1], axis=0).reshape(-1, 3, 3)
    return kabsch_batch(h)


def arap_pair_energy(edges: EdgeSet, x_a, x_b) -> Value:
    """``1/2 sum_(i,j) |R_i (a_j - a_i) - (b_j - b_i)|^2`` with optimal local rotations.

    The rotations are recomputed from the current states but enter the graph
    as constants.
    """
    if np.any(edges.degrees() == 0):
        raise ValueError("isolated vertex: ARAP energy needs every vertex to have a neighbor")
    x_a, x_b = nd.as_value(x_a), nd.as_value(x_b)
    src, dst = edges.src, edges.dst

    def edge_vectors(x: Value) -> Value:
        return (nd.gather_rows(x, dst, edges.scatter_dst)
                - nd.gather_rows(x, src, edges.scatter_src))

    ea, eb = edge_vectors(x_a), edge_vectors(x_b)
    rot = local_rotations(edges, ea.data, eb.data)
    resid = nd.batched_matvec(rot[src], ea) - eb
    return nd.sq_frobenius(resid) * 0.5


def arap_sequence_loss(states, edges: EdgeSet) -> Value:
    """Symmetric ARAP energy summed over consecutive states."""
    states = list(states.states if hasattr(states, "states") else states)
    if len(states) < 2:
        raise ValueError("ARAP sequence loss needs at least two states")
    total = None
    for a, b in zip(states[:-1], states[1:]):
        term = arap_pair_energy(edges, a, b) + arap_pair_energy(edges, b, a)
        total = term if total is None else total + term
    return total


def geodesic_loss(pi: Value, d_x: DenseDistances, d_y: DenseDistances) -> Value:
    """``|pi D_Y pi^T - D_X|^2``."""
    pi = nd.as_value(pi)
    dy = Value(np.asarray(d_y.dist, dtype=pi.dtype))
    dx = Value(np.asarray(d_x.dist, dtype=pi.dtype))
    return nd.sq_frobenius(pi @ dy @ nd.transpose(pi) - dx)


def total_loss(components: dict[str, Value], weights: LossWeights) -> tuple[Value, dict[str, float]]:
    """Weighted sum of ``components`` (keys among reg/arap/geo) and their raw values.

    Components with zero weight are still reported but not added to the graph.
    """
    values: dict[str, float] = {}
    total = None
    for name, comp in components.items():
        v = float(nd.as_value(comp).data)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
        w = getattr(weights, name)
        if w == 0:
            continue
        term = nd.as_value(comp) * w
        total = term if total is None else total + term
    if total is None:
        total = Value(np.zeros((), dtype=np.float32))
    values["total"] = float(total.data)
    return total, values
