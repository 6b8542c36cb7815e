"""Triangle meshes: representation, derived quantities, file I/O and augmentation."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix


class MeshError(ValueError):
    """Raised when a mesh violates its invariants or a file cannot be parsed."""


def _scatter(index: np.ndarray, n: int) -> csr_matrix:
    k = len(index)
    return csr_matrix((np.ones(k), (index, np.arange(k))), shape=(n, k))


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Directed edge pairs sorted by (source, target).

    ``offsets[i]:offsets[i+1]`` indexes the neighbors of vertex ``i`` in
    ``src``/``dst``, so a neighborhood lookup is a slice.
    """

    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.offsets) - 1

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def __len__(self) -> int:
        return len(self.src)

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.offsets[i]:self.offsets[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def scatter_src(self) -> csr_matrix:
        return _scatter(self.src, self.n_vertices)

    @cached_property
    def scatter_dst(self) -> csr_matrix:
        return _scatter(self.dst, self.n_vertices)

    @classmethod
    def from_pairs(cls, src, dst, n_vertices: int) -> "EdgeSet":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        offsets = np.zeros(n_vertices + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_vertices), out=offsets[1:])
        return cls(src=src, dst=dst, offsets=offsets)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array
    faces : (f, 3) integer array
    name : str
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = field(default="mesh")

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"invariant violation: vertices must be (n, 3), got {v.shape}")
        if f.size == 0:
            raise MeshError("invariant violation: mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"invariant violation: faces must be (f, 3), got {f.shape}")
        n = len(v)
        if f.min() < 0 or f.max() >= n:
            raise MeshError(f"index out of range: face indices must lie in [0, {n})")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("invariant violation: degenerate face repeats a vertex index")
        if not np.isfinite(v).all():
            raise MeshError("invariant violation: non-finite vertex coordinates")
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshError(f"invariant violation: {int((~used).sum())} isolated vertices")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def edges(self) -> EdgeSet:
        return edge_set(self)

    @cached_property
    def normals(self) -> np.ndarray:
        return vertex_normals(self)

    @cached_property
    def area(self) -> float:
        return surface_area(self)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.hexdigest()

    def with_vertices(self, vertices, name: str | None = None) -> "Mesh":
        return Mesh(vertices, self.faces, self.name if name is None else name)


def edge_set(mesh: Mesh) -> EdgeSet:
    """Symmetric, deduplicated directed edges induced by the triangles."""
    f = mesh.faces
    a = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    b = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    n = mesh.n_vertices
    keys = np.unique(a * n + b)
    return EdgeSet.from_pairs(keys // n, keys % n, n)


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    return np.cross(p1 - p0, p2 - p0)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Vertices whose accumulated normal vanishes get ``(0, 0, 1)``.
    """
    # the un-normalized cross product already carries twice the face area
    cross = face_cross(mesh.vertices, mesh.faces)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    out = np.empty_like(acc)
    ok = norm > 1e-12
    out[ok] = acc[ok] / norm[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


def surface_area(mesh: Mesh) -> float:
    return float(0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1).sum())


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_azimuth(mesh: Mesh, angle: float) -> Mesh:
    """Rotate about the vertical +y axis (right-handed)."""
    return mesh.with_vertices(mesh.vertices @ rotation_y(angle).T)


# --------------------------------------------------------------------------
# decimation

def decimate(mesh: Mesh, keep_fraction: float, seed: int,
             candidate_fraction: float = 0.2) -> tuple[Mesh, np.ndarray]:
    """Randomized shortest-edge collapse down to ``ceil(keep_fraction * n)`` vertices.

    Each round sorts the current edges by length, shuffles the shortest
    ``candidate_fraction`` of them and collapses them to their midpoints in
    that order, skipping edges whose endpoints were already touched in the
    round or whose collapse would break the link condition.

    Returns
    -------
    mesh : Mesh
        The decimated mesh.
    vertex_map : (n',) int array
        Original index of every surviving vertex.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise MeshError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = mesh.n_vertices
    target = math.ceil(keep_fraction * n - 1e-9)
    if target < 4:
        raise MeshError(f"decimation target of {target} vertices is below 4")
    if target >= n:
        return mesh, np.arange(n)

    rng = np.random.default_rng(seed)
    pos = mesh.vertices.copy()
    faces = [list(f) for f in mesh.faces.tolist()]
    face_alive = [True] * len(faces)
    vfaces: list[set[int]] = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for v in f:
            vfaces[v].add(fi)
    alive = np.ones(n, dtype=bool)
    n_alive = n

    def neighbors(v: int) -> set[int]:
        out = set()
        for fi in vfaces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    stalled = 0
    while n_alive > target and stalled < 3:
        edges = set()
        for fi, f in enumerate(faces):
            if face_alive[fi]:
                a, b, c = f
                edges.update((min(x, y), max(x, y)) for x, y in ((a, b), (b, c), (c, a)))
        edges = np.array(sorted(edges), dtype=np.int64)
        lengths = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
        n_cand = max(1, int(math.ceil(candidate_fraction * len(edges))))
        cand = edges[np.argsort(lengths, kind="stable")[:n_cand]]
        cand = cand[rng.permutation(len(cand))]
        touched: set[int] = set()
        collapsed = 0
        for u, v in cand.tolist():
            if n_alive <= target:
                break
            if u in touched or v in touched:
                continue
            nu, nv = neighbors(u), neighbors(v)
            common = nu & nv
            shared = vfaces[u] & vfaces[v]
            if len(common) != len(shared) or not shared:
                continue
            if any(len(neighbors(w)) <= 3 for w in common):
                continue
            if len(nu | nv) - 2 < 3:
                continue
            pos[u] = 0.5 * (pos[u] + pos[v])
            for fi in shared:
                face_alive[fi] = False
                for w in faces[fi]:
                    vfaces[w].discard(fi)
            for fi in list(vfaces[v]):
                faces[fi] = [u if w == v else w for w in faces[fi]]
                vfaces[u].add(fi)
            vfaces[v] = set()
            alive[v] = False
            n_alive -= 1
            touched.update(nu | nv | {u, v})
            collapsed += 1
        stalled = stalled + 1 if collapsed == 0 else 0

    vertex_map = np.flatnonzero(alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[vertex_map] = np.arange(len(vertex_map))
    new_faces = remap[np.array([f for f, ok in zip(faces, face_alive) if ok], dtype=np.int64)]
    out = Mesh(pos[vertex_map], new_faces, f"{mesh.name}_dec")
    return out, vertex_map


# --------------------------------------------------------------------------
# file I/O

FORMATS = ("off", "obj", "ply")


def _format_for(path: Path, format: str | None) -> str:
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in FORMATS:
        raise MeshError(f"unsupported mesh format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _float_tokens(tokens, what: str) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MeshError(f"parse failure: bad {what} {tokens!r}") from exc


def _int_tokens(tokens, what: str) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise MeshError(f"parse failure: bad {what} {tokens!r}") from exc


def _content_lines(text: str) -> list[list[str]]:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split())
    return lines


def _parse_off(text: str):
    lines = _content_lines(text)
    if not lines or lines[0][0] != "OFF":
        raise MeshError("parse failure: missing OFF header")
    head = lines[0][1:] if len(lines[0]) > 1 else None
    body = lines[1:]
    if head is None:
        if not body:
            raise MeshError("parse failure: missing OFF counts line")
        head, body = body[0], body[1:]
    nv, nf = _int_tokens(head[:2], "OFF counts")
    if len(body) < nv + nf:
        raise MeshError("parse failure: OFF file truncated")
    verts = [_float_tokens(body[i][:3], "vertex") for i in range(nv)]
    faces = []
    for line in body[nv:nv + nf]:
        idx = _int_tokens(line, "face")
        if idx[0] != 3 or len(idx) < 4:
            raise MeshError(f"parse failure: only triangles supported, got face {line!r}")
        faces.append(idx[1:4])
    return verts, faces


def _parse_obj(text: str):
    verts, faces = [], []
    for tokens in _content_lines(text):
        if tokens[0] == "v":
            xyz = _float_tokens(tokens[1:4], "vertex")
            if len(xyz) != 3:
                raise MeshError(f"parse failure: vertex needs 3 coordinates: {tokens!r}")
            verts.append(xyz)
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise MeshError(f"parse failure: only triangles supported, got {tokens!r}")
            idx = _int_tokens([t.split("/")[0] for t in tokens[1:]], "face")
            if min(idx) < 1:
                raise MeshError("index out of range: OBJ indices are 1-based and positive")
            faces.append([i - 1 for i in idx])
    return verts, faces


def _parse_ply(raw: bytes):
    header_end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or header_end < 0:
        raise MeshError("parse failure: missing PLY header")
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[header_end + len(b"end_header"):].decode("ascii", errors="replace")
    fmt = None
    elements: list[tuple[str, int, list[list[str]]]] = []
    for line in header[1:]:
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property" and elements:
            elements[-1][2].append(tokens[1:])
    if fmt != "ascii":
        raise MeshError(f"binary PLY is not supported (format {fmt!r}); convert to ascii")
    rows = [line.split() for line in body.splitlines() if line.strip()]
    verts, faces = [], []
    cursor = 0
    for name, count, props in elements:
        chunk = rows[cursor:cursor + count]
        if len(chunk) < count:
            raise MeshError("parse failure: PLY file truncated")
        cursor += count
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError as exc:
                raise MeshError("parse failure: PLY vertex lacks x/y/z") from exc
            verts = [_float_tokens([r[c] for c in cols], "vertex") for r in chunk]
        elif name == "face":
            for r in chunk:
                idx = _int_tokens(r, "face")
                if idx[0] != 3 or len(idx) < 4:
                    raise MeshError(f"parse failure: only triangles supported, got {r!r}")
                faces.append(idx[1:4])
    return verts, faces


def load_mesh(path, format: str | None = None) -> Mesh:
    """Load an OFF, OBJ or ASCII PLY triangle mesh, preserving vertex order."""
    path = Path(path)
    fmt = _format_for(path, format)
    raw = path.read_bytes()
    if fmt == "ply":
        verts, faces = _parse_ply(raw)
    else:
        text = raw.decode("utf-8", errors="replace")
        verts, faces = _parse_off(text) if fmt == "off" else _parse_obj(text)
    if not verts:
        raise MeshError("parse failure: no vertices")
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3), path.stem)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_mesh(mesh: Mesh, path, format: str | None = None) -> None:
    """Write ``mesh`` as text with 9 significant digits."""
    path = Path(path)
    fmt = _format_for(path, format)
    vlines = [" ".join(_fmt(c) for c in row) for row in mesh.vertices.tolist()]
    flist = mesh.faces.tolist()
    out: list[str] = []
    if fmt == "off":
        out.append("OFF")
        out.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        out.extend(vlines)
        out.extend(f"3 {a} {b} {c}" for a, b, c in flist)
    elif fmt == "obj":
        out.extend("v " + v for v in vlines)
        out.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in flist)
    else:
        out += ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
                "property double x", "property double y", "property double z",
                f"element face {mesh.n_faces}", "property list uchar int vertex_indices",
                "end_header"]
        out.extend(vlines)
        out.extend(f"3 {a} {b} {c}" for a, b, c in flist)
    path.write_text("\n".join(out) + "\n", encoding="ascii")
