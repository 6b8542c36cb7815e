"""Edge-graph geodesic distance matrices, normalized by sqrt(surface area)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .mesh import Mesh

DEFAULT_CAP = 5000
CACHE_MAGIC = b"GEOD"
CACHE_VERSION = 1


class GeodesicError(ValueError):
    pass


@dataclass(frozen=True)
class DenseDistances:
    """Symmetric all-pairs distance matrix for one mesh.

    ``dist`` is kept in float64 so the graph metric stays exact; training code
    casts to its own working precision.
    """

    dist: np.ndarray

    @property
    def n(self) -> int:
        return self.dist.shape[0]


def edge_graph(mesh: Mesh) -> csr_matrix:
    e = mesh.edges
    w = np.linalg.norm(mesh.vertices[e.dst] - mesh.vertices[e.src], axis=1)
    return csr_matrix((w, (e.src, e.dst)), shape=(mesh.n_vertices,) * 2)


def geodesic_matrix(mesh: Mesh, cap: int = DEFAULT_CAP, normalize: bool = True) -> DenseDistances:
    """All-pairs shortest paths over the mesh edges with Euclidean weights.

    With ``normalize`` the result is divided by ``sqrt(surface_area(mesh))``.
    """
    n = mesh.n_vertices
    if n > cap:
        raise GeodesicError(f"mesh has {n} vertices, above the cap of {cap}; decimate first")
    dist = dijkstra(edge_graph(mesh), directed=False)
    if not np.isfinite(dist).all():
        raise GeodesicError("mesh is disconnected: some vertices are unreachable")
    dist = 0.5 * (dist + dist.T)
    if normalize:
        dist = dist / np.sqrt(mesh.area)
    return DenseDistances(dist)


def match_error(pred_j, gt_j, d_target: DenseDistances):
    """Normalized geodesic distance between predicted and true target vertices.

    Accepts scalars (returns a float) or equal-length index arrays (returns an array).
    """
    n = d_target.n
    p, g = np.asarray(pred_j), np.asarray(gt_j)
    if p.size and (p.min() < 0 or p.max() >= n or g.min() < 0 or g.max() >= n):
        raise IndexError(f"match index out of range for a {n}-vertex target")
    out = d_target.dist[p, g]
    return float(out) if out.ndim == 0 else out


# cache file: 16-byte header (magic, version u32, n u64) then row-major float32

def save_distances(d: DenseDistances, path) -> None:
    header = CACHE_MAGIC + struct.pack("<IQ", CACHE_VERSION, d.n)
    Path(path).write_bytes(header + np.ascontiguousarray(d.dist, dtype="<f4").tobytes())


def load_distances(path) -> DenseDistances:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise GeodesicError(f"{path}: not a distance cache file")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != CACHE_VERSION:
        raise GeodesicError(f"{path}: unsupported cache version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != n * n:
        raise GeodesicError(f"{path}: truncated cache ({body.size} of {n * n} entries)")
    return DenseDistances(body.reshape(n, n).astype(np.float64))


def cached_geodesic_matrix(mesh: Mesh, cache_dir, cap: int = DEFAULT_CAP) -> DenseDistances:
    """Like :func:`geodesic_matrix` but persisted under ``cache_dir`` keyed by content hash.

    Cached entries are float32, so values read back are rounded to single precision.
    """
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{mesh.content_hash()[:24]}.geod"
    if path.exists():
        d = load_distances(path)
        if d.n == mesh.n_vertices:
            return d
    d = geodesic_matrix(mesh, cap=cap)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_distances(d, path)
    return load_distances(path)
