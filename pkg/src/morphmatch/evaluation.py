"""Matching accuracy, interpolation distortion, reconstruction error and report export."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geodesic import DenseDistances, geodesic_matrix, match_error
from .losses import kabsch_batch
from .mesh import Mesh

DEFAULT_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
INVERTED_PENALTY = 100.0
DISTORTION_NOTE = "conformal distortion reported as mean(|J|_F^2 / det J) - 2; 0 means conformal"


# --------------------------------------------------------------------------
# metrics

def correspondence_accuracy(hard, gt, d_target: DenseDistances,
                            thresholds: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    """Mean normalized geodesic error and the cumulative accuracy curve.

    ``gt`` entries below zero mark vertices without a ground-truth annotation;
    they are left out of the mean and the curve. The curve has rows
    ``(threshold, fraction of errors <= threshold)``.
    """
    errors = per_vertex_errors(hard, gt, d_target)
    valid = errors[~np.isnan(errors)]
    if valid.size == 0:
        raise ValueError("no annotated vertices to evaluate")
    return float(valid.mean()), accuracy_curve(valid, thresholds)


def per_vertex_errors(hard, gt, d_target: DenseDistances) -> np.ndarray:
    """Geodesic error per source vertex; NaN where ground truth is missing."""
    hard = np.asarray(hard, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if hard.shape != gt.shape or hard.ndim != 1:
        raise ValueError(f"match lists differ in length: {hard.shape} vs {gt.shape}")
    errors = np.full(len(hard), np.nan)
    ok = gt >= 0
    errors[ok] = match_error(hard[ok], gt[ok], d_target)
    return errors


def accuracy_curve(errors: np.ndarray, thresholds: Sequence[float] | None = None) -> np.ndarray:
    thresholds = np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted")
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    frac = np.searchsorted(errors, thresholds, side="right") / len(errors)
    return np.column_stack([thresholds, frac])


def random_matching_expectation(gt, d_target: DenseDistances) -> float:
    """Expected mean error when every annotated vertex is matched uniformly at random."""
    gt = np.asarray(gt, dtype=np.int64)
    gt = gt[gt >= 0]
    return float(d_target.dist[gt].mean(axis=1).mean())


def _frames(p: np.ndarray) -> np.ndarray:
    """Edge vectors of each triangle in its own orthonormal frame, as ``(f, 2, 2)`` columns."""
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    len1 = np.linalg.norm(e1, axis=1)
    u = e1 / np.maximum(len1, 1e-300)[:, None]
    n = np.cross(e1, e2)
    w = np.cross(n, u)
    w /= np.maximum(np.linalg.norm(w, axis=1), 1e-300)[:, None]
    b = np.zeros((len(p), 2, 2))
    b[:, 0, 0] = len1
    b[:, 0, 1] = np.einsum("ij,ij->i", e2, u)
    b[:, 1, 1] = np.einsum("ij,ij->i", e2, w)
    return b


def triangle_distortion(ref: Mesh, state: np.ndarray, penalty: float = INVERTED_PENALTY) -> np.ndarray:
    """Per-triangle ``|J|_F^2 / det J`` of the map from ``ref`` to ``state``.

    A deformed triangle counts as inverted (and scores ``penalty``) when it has
    collapsed or its normal opposes the reference normal carried along by the
    best rotation of its corners' neighborhoods.
    """
    f = ref.faces
    b_ref = _frames(ref.vertices[f])
    det_ref = b_ref[:, 0, 0] * b_ref[:, 1, 1]
    scale = np.mean(np.abs(det_ref))
    if np.any(det_ref <= 1e-12 * scale):
        raise ValueError("degenerate triangle in the reference mesh")
    state = np.asarray(state, dtype=np.float64)
    if state.shape != ref.vertices.shape:
        raise ValueError(f"state shape {state.shape} does not match reference {ref.vertices.shape}")
    p = state[f]
    b_def = _frames(p)
    inv_ref = np.zeros_like(b_ref)
    inv_ref[:, 0, 0] = 1 / b_ref[:, 0, 0]
    inv_ref[:, 0, 1] = -b_ref[:, 0, 1] / det_ref
    inv_ref[:, 1, 1] = 1 / b_ref[:, 1, 1]
    jac = b_def @ inv_ref
    det = np.linalg.det(jac)

    face_n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    ref_p = ref.vertices[f]
    ref_n = np.cross(ref_p[:, 1] - ref_p[:, 0], ref_p[:, 2] - ref_p[:, 0])
    # best rotation of the neighborhoods of the three corners, reference -> deformed
    e = ref.edges
    outer = ((ref.vertices[e.dst] - ref.vertices[e.src])[:, :, None]
             * (state[e.dst] - state[e.src])[:, None, :])
    h_vert = np.add.reduceat(outer.reshape(-1, 9), e.offsets[:-1], axis=0).reshape(-1, 3, 3)
    rot = kabsch_batch(h_vert[f].sum(axis=1))
    expected = np.einsum("kij,kj->ki", rot, ref_n)
    inverted = (det <= 1e-12) | (np.einsum("ij,ij->i", face_n, expected) <= 0)
    out = np.full(len(f), float(penalty))
    ok = ~inverted
    out[ok] = np.sum(jac[ok] ** 2, axis=(1, 2)) / det[ok]
    return out


def conformal_distortion(ref: Mesh, traj, penalty: float = INVERTED_PENALTY) -> float:
    """Mean distortion over all triangles and all states, minus 2.

    ``traj`` is a :class:`~morphmatch.nets.Trajectory` or a sequence of vertex arrays.
    """
    states = traj.arrays() if hasattr(traj, "arrays") else list(traj)
    if not states:
        raise ValueError("empty trajectory")
    return float(np.mean([triangle_distortion(ref, s, penalty).mean() for s in states]) - 2.0)


def _nearest_sq(a: np.ndarray, b: np.ndarray, k: int = 4) -> np.ndarray:
    k = min(k, len(b))
    _, idx = cKDTree(b).query(a, k=k)
    idx = idx.reshape(len(a), k)
    # recompute exactly as a brute-force scan would
    return np.min(np.sum((a[:, None, :] - b[idx]) ** 2, axis=-1), axis=1)


def chamfer(a, b) -> float:
    """Symmetric mean squared nearest-neighbor distance between two vertex sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return 0.5 * (float(_nearest_sq(a, b).mean()) + float(_nearest_sq(b, a).mean()))


def linear_trajectory(x: np.ndarray, y: np.ndarray, pi: np.ndarray, T: int) -> list[np.ndarray]:
    """Baseline states ``X + t (pi Y - X)`` for ``t = k / T``."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(pi, dtype=np.float64) @ np.asarray(y, dtype=np.float64) - x
    return [x + (k / T) * v for k in range(T + 1)]


# --------------------------------------------------------------------------
# datasets with ground truth

@dataclass
class Pair:
    source: Mesh
    target: Mesh
    gt: np.ndarray
    name: str = ""


def identity_pairs(meshes: Sequence[Mesh], names: Sequence[str] | None = None) -> list[Pair]:
    """All ordered pairs of shapes sharing connectivity, with the identity ground truth."""
    names = list(names) if names is not None else [m.name for m in meshes]
    out = []
    for i, j in itertools.permutations(range(len(meshes)), 2):
        if len(meshes[i].vertices) != len(meshes[j].vertices):
            raise ValueError("identity ground truth needs equal vertex counts")
        out.append(Pair(meshes[i], meshes[j], np.arange(len(meshes[i].vertices)),
                        f"{names[i]}->{names[j]}"))
    return out


def transfer_ground_truth(gt, source_map, target_map) -> np.ndarray:
    """Re-express original-index ground truth on decimated meshes.

    ``source_map``/``target_map`` list the surviving original index of each
    decimated vertex. Vertices whose annotation did not survive get ``-1``.
    """
    gt = np.asarray(gt, dtype=np.int64)
    lookup = np.full(int(max(np.max(target_map), np.max(gt))) + 1, -1, dtype=np.int64)
    lookup[np.asarray(target_map)] = np.arange(len(target_map))
    orig = gt[np.asarray(source_map)]
    out = np.full(len(source_map), -1, dtype=np.int64)
    ok = orig >= 0
    out[ok] = lookup[orig[ok]]
    return out


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    mean_error: float = float("nan")
    curve: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    conformal: float = float("nan")
    chamfer: float = float("nan")
    per_vertex: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_pair: list[dict] = field(default_factory=list)
    n_excluded: int = 0

    def summary(self) -> dict:
        out = {"pairs": len(self.per_pair), "mean_geodesic_error": self.mean_error,
               "mean_conformal_distortion": self.conformal, "mean_chamfer": self.chamfer,
               "excluded_vertices": self.n_excluded}
        for key in ("baseline_conformal_distortion", "baseline_chamfer", "random_expectation"):
            vals = [p[key] for p in self.per_pair if key in p]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def write_curve(self, path) -> None:
        _write_rows(path, ("threshold", "fraction"), self.curve.tolist())

    def write_per_vertex(self, path) -> None:
        _write_rows(path, ("vertex_index", "mean_error"),
                    [(i, e) for i, e in enumerate(self.per_vertex) if not np.isnan(e)])

    def write_summary(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {DISTORTION_NOTE}\n")
            w = csv.writer(fh)
            w.writerow(("metric", "value"))
            for k, v in self.summary().items():
                w.writerow((k, _fmt(v)))

    def write_pairs(self, path) -> None:
        keys = sorted({k for p in self.per_pair for k in p})
        _write_rows(path, keys, [[p.get(k, "") for k in keys] for p in self.per_pair])

    def export(self, out_dir) -> None:
        out_dir = Path(out_dir)
        self.write_summary(out_dir / "summary.csv")
        self.write_pairs(out_dir / "pairs.csv")
        if len(self.curve):
            self.write_curve(out_dir / "curve.csv")
        if len(self.per_vertex):
            self.write_per_vertex(out_dir / "per_vertex.csv")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def evaluate_matching(model, pairs: Iterable[Pair], thresholds: Sequence[float] | None = None,
                      out_dir=None) -> EvalReport:
    """Hard-match ``model`` on every pair and aggregate geodesic errors.

    ``model`` needs a ``match(source, target) -> target index per source vertex`` method.
    Per-vertex errors are averaged over pairs by source vertex index.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    all_errors = []
    n = max(len(p.source.vertices) for p in pairs)
    sums, counts = np.zeros(n), np.zeros(n)
    report = EvalReport()
    for pair in pairs:
        if pair.gt is None:
            raise ValueError(f"pair {pair.name!r} has no ground truth")
        d = geodesic_matrix(pair.target)
        errors = per_vertex_errors(model.match(pair.source, pair.target), pair.gt, d)
        ok = ~np.isnan(errors)
        report.n_excluded += int((~ok).sum())
        sums[: len(errors)][ok] += errors[ok]
        counts[: len(errors)][ok] += 1
        all_errors.append(errors[ok])
        report.per_pair.append({"pair": pair.name, "mean_geodesic_error": float(errors[ok].mean()),
                                "random_expectation": random_matching_expectation(pair.gt, d)})
    errors = np.concatenate(all_errors)
    report.mean_error = float(np.mean([p["mean_geodesic_error"] for p in report.per_pair]))
    report.curve = accuracy_curve(errors, thresholds)
    with np.errstate(invalid="ignore", divide="ignore"):
        report.per_vertex = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if out_dir is not None:
        report.export(out_dir)
    return report


def evaluate_interpolation(model, pairs: Iterable[Pair], T: int = 8, penalty: float = INVERTED_PENALTY,
                           baseline: bool = True, out_dir=None) -> EvalReport:
    """Distortion of the ``T``-step trajectory and Chamfer error of ``X(1)`` per pair.

    With ``baseline`` the linear path ``X + t (pi Y - X)`` under the same ``pi``
    is scored alongside.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    report = EvalReport()
    for pair in pairs:
        corr, traj = model.trajectory(pair.source, pair.target, T)
        states = [s.astype(np.float64) for s in traj.arrays()]
        row = {"pair": pair.name,
               "conformal_distortion": conformal_distortion(pair.source, states, penalty),
               "chamfer": chamfer(states[-1], pair.target.vertices)}
        if baseline:
            lin = linear_trajectory(pair.source.vertices, pair.target.vertices, corr.matrix, T)
            row["baseline_conformal_distortion"] = conformal_distortion(pair.source, lin, penalty)
            row["baseline_chamfer"] = chamfer(lin[-1], pair.target.vertices)
        report.per_pair.append(row)
    report.conformal = float(np.mean([p["conformal_distortion"] for p in report.per_pair]))
    report.chamfer = float(np.mean([p["chamfer"] for p in report.per_pair]))
    if out_dir is not None:
        report.export(out_dir)
    return report
