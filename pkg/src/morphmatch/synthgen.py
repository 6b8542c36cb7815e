"""Procedural bendable capsule "limbs" sharing one template connectivity.

Every pose of a given tessellation has the same faces, so the identity index
map is a dense ground-truth correspondence between any two poses.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .mesh import Mesh, save_mesh

MAX_ANGLE = 2.5


@dataclass(frozen=True)
class PoseSpec:
    angles: tuple[float, float] = (0.0, 0.0)
    lengths: tuple[float, float, float] = (1.0, 1.0, 1.0)
    rings: int = 30
    segments: int = 16
    radius: float = 0.2
    taper: float = 1.0
    blend: float = 0.15
    noise: float = 0.0
    bulge: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "lengths", tuple(float(a) for a in self.lengths))
        if len(self.angles) != 2 or len(self.lengths) != 3:
            raise ValueError("a pose has two joint angles and three limb lengths")
        if any(abs(a) > MAX_ANGLE for a in self.angles):
            raise ValueError(f"joint angles must lie in [-{MAX_ANGLE}, {MAX_ANGLE}]")
        if self.rings < 8:
            raise ValueError("resolution must be at least 8 rings")
        if self.bulge < 0:
            raise ValueError("bulge must be non-negative")
        if self.segments < 3 or min(self.lengths) <= 0 or self.radius <= 0:
            raise ValueError("invalid capsule dimensions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angles"] = list(self.angles)
        d["lengths"] = list(self.lengths)
        return d


def _profile(spec: PoseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Heights and radii of the rings, evenly spaced in arc length along the profile."""
    length = sum(spec.lengths)
    r0, r1 = spec.radius, spec.radius * spec.taper
    side = math.hypot(length - r0 - r1, r0 - r1)
    arc0, arc1 = 0.5 * math.pi * r0, 0.5 * math.pi * r1
    total = arc0 + side + arc1
    s = total * np.arange(1, spec.rings + 1) / (spec.rings + 1)
    y = np.empty_like(s)
    r = np.empty_like(s)
    lo = s < arc0
    phi = s[lo] / r0
    y[lo], r[lo] = r0 - r0 * np.cos(phi), r0 * np.sin(phi)
    mid = (s >= arc0) & (s <= arc0 + side)
    u = (s[mid] - arc0) / side
    y[mid], r[mid] = r0 + u * (length - r0 - r1), r0 + u * (r1 - r0)
    hi = s > arc0 + side
    phi = (total - s[hi]) / r1
    y[hi], r[hi] = length - r1 + r1 * np.cos(phi), r1 * np.sin(phi)
    return y, r


def template(spec: PoseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Straight capsule along +y: vertices (2 + rings * segments) and faces.

    A positive ``bulge`` swells the +z side of the middle segment, which
    removes the mirror symmetry across the bend plane.
    """
    y, r = _profile(spec)
    k = spec.segments
    theta = 2 * np.pi * np.arange(k) / k
    radial = np.outer(r, np.ones(k))
    if spec.bulge > 0:
        mid = spec.lengths[0] + 0.5 * spec.lengths[1]
        along = np.exp(-((y - mid) / (0.25 * spec.lengths[1])) ** 2)
        around = np.exp(-(np.angle(np.exp(1j * (theta - np.pi / 2))) / 0.8) ** 2)
        radial = radial * (1 + spec.bulge * np.outer(along, around))
    ring = np.stack([radial * np.cos(theta), np.repeat(y[:, None], k, axis=1),
                     radial * np.sin(theta)], axis=-1).reshape(-1, 3)
    bottom, top = np.array([[0.0, 0.0, 0.0]]), np.array([[0.0, sum(spec.lengths), 0.0]])
    verts = np.concatenate([bottom, ring, top])
    idx = lambda ring_i, seg: 1 + ring_i * k + seg % k  # noqa: E731
    faces = []
    for s in range(k):
        faces.append((0, idx(0, s), idx(0, s + 1)))
        for i in range(spec.rings - 1):
            a, b = idx(i, s), idx(i, s + 1)
            c, d = idx(i + 1, s), idx(i + 1, s + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
        faces.append((len(verts) - 1, idx(spec.rings - 1, s + 1), idx(spec.rings - 1, s)))
    return verts, np.array(faces, dtype=np.int64)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_pose(spec: PoseSpec) -> Mesh:
    """Bend the template at its two joints by linear-blend skinning.

    Bones rotate about +z through joints on the y axis, so the bend happens in
    the x-y plane and the mesh stays upright.
    """
    verts, faces = template(spec)
    j1, j2 = spec.lengths[0], spec.lengths[0] + spec.lengths[1]
    y = verts[:, 1]
    w = spec.blend
    s1 = _smoothstep((y - j1 + w) / (2 * w))
    s2 = _smoothstep((y - j2 + w) / (2 * w))
    weights = np.stack([1 - s1, s1 * (1 - s2), s1 * s2], axis=1)

    p1, p2 = np.array([0.0, j1, 0.0]), np.array([0.0, j2, 0.0])
    r1 = _rot_z(spec.angles[0])
    r2 = r1 @ _rot_z(spec.angles[1])
    t1 = p1 - r1 @ p1
    t2 = r1 @ (p2 - p1) + p1 - r2 @ p2
    posed = (weights[:, 0:1] * verts
             + weights[:, 1:2] * (verts @ r1.T + t1)
             + weights[:, 2:3] * (verts @ r2.T + t2))
    if spec.noise > 0:
        posed = posed + np.random.default_rng(spec.seed).normal(scale=spec.noise, size=posed.shape)
    a = ",".join(f"{x:+.3f}" for x in spec.angles)
    return Mesh(posed, faces, f"capsule[{a}]")


def make_dataset(n_poses: int, out_dir, rings: int = 30, seed: int = 0, segments: int = 16,
                 max_angle: float = 1.2, holdout: int = 0, taper: float = 1.0,
                 bulge: float = 0.0, fmt: str = "off") -> dict:
    """Write ``n_poses`` random poses and a ``manifest.json``; return the manifest.

    The last ``holdout`` poses are marked as the test split.
    """
    if n_poses < 2:
        raise ValueError("a dataset needs at least two poses")
    if not 0 <= holdout < n_poses:
        raise ValueError("holdout must leave at least one training pose")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_poses):
        angles = rng.uniform(-max_angle, max_angle, size=2).round(6)
        spec = PoseSpec(angles=tuple(angles), rings=rings, segments=segments, taper=taper,
                        bulge=bulge, seed=i)
        name = f"pose_{i:03d}.{fmt}"
        save_mesh(make_pose(spec), out_dir / name)
        entries.append({"file": name, "spec": spec.to_dict(),
                        "split": "test" if i >= n_poses - holdout else "train"})
    manifest = {
        "generator": "capsule-lbs",
        "seed": seed,
        "ground_truth": "identity",
        "note": "all poses share faces; vertex i of one pose corresponds to vertex i of every other",
        "meshes": entries,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out_dir / "manifest.json").write_text(text + "\n", encoding="utf-8")
    manifest["sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest
