"""Acceptance suite A1-A6.

Each test records one PASS/FAIL line in ``conftest.ACCEPTANCE``; the lines are
printed in the pytest terminal summary.
"""
from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import ACCEPTANCE, random_hull_mesh
from test_geodesic import floyd_warshall
from morphmatch import ndiff as nd
from morphmatch.evaluation import (Pair, chamfer, conformal_distortion, correspondence_accuracy,
                                   evaluate_interpolation, evaluate_matching, identity_pairs)
from morphmatch.geodesic import geodesic_matrix
from morphmatch.losses import (LossWeights, arap_pair_energy, arap_sequence_loss, geodesic_loss,
                               kabsch_batch, kabsch_rotation, registration_loss, total_loss)
from morphmatch.mesh import Mesh
from morphmatch.ndiff import ParamStore, Value
from morphmatch.nets import (Model, NetConfig, correspondence, displacement, edgeconv_block,
                             extract_features, init_params, interpolator_input, trajectory)
from morphmatch.synthgen import PoseSpec, make_dataset, make_pose
from morphmatch.training import TrainConfig, Trainer, load_dataset


def record(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[key])
    assert ok, ACCEPTANCE[key]


# --------------------------------------------------------------------------
# A1: finite-difference gradient suite

FD_H = 1e-4
FD_TOL = 1e-3


def _store(**arrays) -> ParamStore:
    s = ParamStore(np.float64)
    for name, a in arrays.items():
        s.add(name, a)
    return s


def _gradient_cases():
    rng = np.random.default_rng(2024)
    a, b = random_hull_mesh(11, 12), random_hull_mesh(12, 14)
    da, db = geodesic_matrix(a), geodesic_matrix(b)
    cases = {}

    s = _store(x=a.vertices + rng.normal(size=(12, 3)) * 0.1, logits=rng.normal(size=(12, 14)))
    cases["loss: registration"] = (
        lambda s=s: registration_loss(s["x"], nd.row_softmax(s["logits"], 1.0), b.vertices), s)

    s = _store(xa=a.vertices.copy(), xb=a.vertices + rng.normal(size=(12, 3)) * 0.2)
    cases["loss: ARAP pair (both states)"] = (lambda s=s: arap_pair_energy(a.edges, s["xa"], s["xb"]), s)

    s = _store(x1=a.vertices + rng.normal(size=(12, 3)) * 0.1, x2=a.vertices + rng.normal(size=(12, 3)) * 0.2)
    cases["loss: ARAP sequence"] = (
        lambda s=s: arap_sequence_loss([Value(a.vertices), s["x1"], s["x2"]], a.edges), s)

    s = _store(logits=rng.normal(size=(12, 14)))
    cases["loss: geodesic"] = (lambda s=s: geodesic_loss(nd.row_softmax(s["logits"], 3.0), da, db), s)

    s = _store(x=a.vertices + 0.1, logits=rng.normal(size=(12, 14)), y=rng.normal(size=(12, 3)))
    cases["loss: weighted total"] = (lambda s=s: total_loss({
        "reg": registration_loss(s["x"], nd.row_softmax(s["logits"], 2.0), b.vertices),
        "arap": arap_pair_energy(a.edges, Value(a.vertices), s["y"]),
        "geo": geodesic_loss(nd.row_softmax(s["logits"], 2.0), da, db)}, LossWeights())[0], s)

    cfg = NetConfig(phi_widths=(5,), feat_dim=8, psi_widths=(4,))
    feats = np.concatenate([a.vertices, a.normals], axis=1)
    w = rng.normal(size=(12, 10))
    p = init_params(cfg, seed=1, dtype=np.float64)
    p.add("input", feats)
    cases["block: EdgeConv + global append"] = (
        lambda p=p: nd.sum(edgeconv_block(p["input"], a.edges, p, "phi.0") * w), p)

    cfg_v = NetConfig(phi_widths=(5,), feat_dim=8, psi_widths=(4,), edge_transform="vertex")
    pv = init_params(cfg_v, seed=2, dtype=np.float64)
    pv.add("input", feats)
    cases["block: vertex-only transform"] = (
        lambda p=pv: nd.sum(edgeconv_block(p["input"], a.edges, p, "phi.0", mode="vertex") * w), pv)

    s = _store(fa=rng.normal(size=(12, 6)), fb=rng.normal(size=(14, 6)))
    wp = rng.normal(size=(12, 14))
    cases["block: cosine similarity + softmax"] = (
        lambda s=s: nd.sum(correspondence(s["fa"], s["fb"], 7.0).pi * wp), s)

    pp = init_params(cfg, seed=3, dtype=np.float64)
    pp.add("logits", rng.normal(size=(12, 14)))
    wv = rng.normal(size=(12, 3))
    cases["block: interpolator displacement"] = (
        lambda p=pp: nd.sum(displacement(a, interpolator_input(a.vertices, nd.row_softmax(p["logits"], 1.0),
                                                               b.vertices, 0.5), p, cfg, 0.5) * wv), pp)

    pf = init_params(cfg, seed=4, dtype=np.float64)
    cases["block: feature extractor"] = (
        lambda p=pf: nd.sum(extract_features(a, p, cfg) * rng_fixed(12, 8)), pf)

    pm = init_params(cfg, seed=5, dtype=np.float64)

    def full(p=pm):
        corr, traj = trajectory(a, b, p, cfg, 2)
        return total_loss({"reg": registration_loss(traj.states[-1], corr.pi, b.vertices),
                           "arap": arap_sequence_loss(traj, a.edges),
                           "geo": geodesic_loss(corr.pi, da, db)}, LossWeights())[0]

    cases["model: all parameters through the composite loss"] = (full, pm)
    return cases


def rng_fixed(*shape):
    return np.random.default_rng(77).normal(size=shape)


def test_A1_gradients():
    start = time.perf_counter()
    worst, failures, checked = 0.0, [], 0
    for name, (graph, params) in _gradient_cases().items():
        rep = nd.finite_difference_check(graph, params, h=FD_H, tolerance=FD_TOL, max_entries=60)
        checked += rep.n_checked
        worst = max(worst, rep.worst)
        if not rep.passed:
            failures.append(f"{name} ({rep.worst:.2e})")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    detail = (f"max rel err {worst:.2e} < {FD_TOL:g} over {checked} entries in 11 instances "
              f"(h={FD_H:g}, float64), {elapsed:.1f}s < 120s")
    if failures:
        detail += "; failing: " + ", ".join(failures)
    record("A1", ok, detail)


# --------------------------------------------------------------------------
# A2: geometric invariants

def test_A2_invariants():
    start = time.perf_counter()
    notes = []

    mesh = random_hull_mesh(500, 500)
    assert mesh.n_vertices == 500
    arap_max = 0.0
    for k in range(20):
        r = Rotation.random(random_state=k).as_matrix()
        moved = mesh.vertices @ r.T + np.random.default_rng(k).normal(size=3) * 5
        arap_max = max(arap_max, arap_sequence_loss([mesh.vertices, moved], mesh.edges).item())
    ok_arap = arap_max < 1e-7
    notes.append(f"ARAP(rigid) max {arap_max:.1e}")

    rng = np.random.default_rng(0)
    tempting = []
    for k in range(50):
        p = rng.normal(size=(10, 3))
        tempting.append((p, p * [1, 1, -1]))                      # pure mirror
        tempting.append((p, -p))                                   # point reflection
        flat = p * [1, 1, 0]
        tempting.append((flat, flat @ Rotation.random(random_state=k).as_matrix().T))  # planar input
        tempting.append((p, p @ np.diag([1, 1, -1e-3]) + rng.normal(size=(10, 3)) * 1e-4))
    so3_err = 0.0
    for p, q in tempting:
        r = kabsch_rotation(p, q)
        so3_err = max(so3_err, abs(np.linalg.det(r) - 1), np.abs(r.T @ r - np.eye(3)).max())
    rs = kabsch_batch(rng.normal(size=(500, 3, 3)))
    so3_err = max(so3_err, np.abs(np.linalg.det(rs) - 1).max())
    ok_kabsch = so3_err < 1e-6
    notes.append(f"Kabsch SO(3) err {so3_err:.1e}")

    model = Model.create(NetConfig(), seed=0)
    x = make_pose(PoseSpec(angles=(0.5, -0.3)))
    y = make_pose(PoseSpec(angles=(-0.8, 1.0)))
    row_err = np.abs(model.correspond(x, y).matrix.astype(np.float64).sum(axis=1) - 1).max()
    sharp = Model.create(NetConfig(sigma=500.0), seed=1)
    row_err = max(row_err, np.abs(sharp.correspond(x, y).matrix.astype(np.float64).sum(axis=1) - 1).max())
    ok_rows = row_err < 1e-6
    notes.append(f"Pi row-sum err {row_err:.1e}")

    _, traj = model.trajectory(x, y, 4)
    states = model.interpolate(x, y, [0.0, 0.5, 1.0])
    ok_x0 = (np.array_equal(traj.states[0].data, x.vertices.astype(np.float32))
             and np.array_equal(states[0], x.vertices))
    notes.append(f"X(0)==X {'exact' if ok_x0 else 'MISMATCH'}")

    geo_err = 0.0
    meshes = [random_hull_mesh(s, n) for s, n in zip(range(12), (8, 12, 16, 20, 25, 30, 35, 40, 45, 50, 55, 60))]
    meshes.append(make_pose(PoseSpec(rings=8, segments=6, angles=(0.9, -0.7))))
    for m in meshes:
        assert m.n_vertices <= 60
        geo_err = max(geo_err, np.abs(geodesic_matrix(m, normalize=False).dist - floyd_warshall(m)).max())
    ok_geo = geo_err < 1e-9
    notes.append(f"geodesic vs Floyd-Warshall {geo_err:.1e}")

    elapsed = time.perf_counter() - start
    ok = ok_arap and ok_kabsch and ok_rows and ok_x0 and ok_geo and elapsed < 120
    record("A2", ok, "; ".join(notes) + f"; {elapsed:.1f}s < 120s")


# --------------------------------------------------------------------------
# A5: metric oracles

def test_A5_metric_oracles(flat_square):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(10):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3)) + 0.3
        d = ((a[:, None] - b[None]) ** 2).sum(-1)
        exact &= chamfer(a, b) == 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    stretch = conformal_distortion(flat_square, [flat_square.vertices * [2, 1, 1]])
    ok_stretch = abs(stretch - 0.5) < 1e-12

    pose = make_pose(PoseSpec(rings=12, segments=10, angles=(0.7, -0.5)))
    dist = geodesic_matrix(pose)
    n = pose.n_vertices
    ident_err, ident_curve = correspondence_accuracy(np.arange(n), np.arange(n), dist)
    monotone = True
    for k in range(5):
        _, curve = correspondence_accuracy(rng.integers(0, n, n), np.arange(n), dist)
        monotone &= bool(np.all(np.diff(curve[:, 1]) >= 0))
    ok_ident = ident_err == 0.0 and np.all(ident_curve[:, 1] == 1.0)
    elapsed = time.perf_counter() - start
    ok = exact and ok_stretch and monotone and ok_ident and elapsed < 60
    record("A5", ok, f"chamfer==scan {'exact' if exact else 'MISMATCH'} (10 x 200-pt sets); "
                     f"diag(2,1) distortion {stretch:.15g}; curves monotone {monotone}; "
                     f"identity error {ident_err:g}; {elapsed:.1f}s < 60s")


# --------------------------------------------------------------------------
# A3 and A6: single-pair overfit, run twice

A3_SOURCE, A3_TARGET = (0.6, -0.4), (-0.5, 0.8)
A3_CONFIG = dict(epochs=12, steps_per_epoch=100, t_interval=3, lr=1e-3, sigma=150.0, fixed_pair=True,
                 keep_min=1.0, keep_max=1.0, rotate=False, seed=0)


def full_weight_loss(model: Model, pair: tuple[Mesh, Mesh], T: int) -> float:
    """Total loss with every weight at its default, evaluated without updating."""
    x, y = pair
    corr, traj = model.trajectory(x, y, T)
    comps = {"reg": registration_loss(traj.states[-1], corr.pi, y.vertices),
             "arap": arap_sequence_loss(traj, x.edges),
             "geo": geodesic_loss(corr.pi, geodesic_matrix(x), geodesic_matrix(y))}
    return total_loss(comps, LossWeights())[0].item()


def _overfit(out_dir: Path):
    pair = (make_pose(PoseSpec(angles=A3_SOURCE)), make_pose(PoseSpec(angles=A3_TARGET)))
    cfg = TrainConfig(out_dir=str(out_dir), **A3_CONFIG)
    start = time.perf_counter()
    trainer = Trainer(cfg, list(pair))
    initial = Model.create(cfg.net_config(), seed=cfg.seed)
    ckpt = trainer.run()
    elapsed = time.perf_counter() - start
    model = Model.from_checkpoint(ckpt)
    t_final = trainer.history[-1]["T"]
    report = evaluate_interpolation(model, [Pair(*pair, np.arange(pair[0].n_vertices), "a3")],
                                    T=t_final, out_dir=out_dir / "report")
    return dict(pair=pair, cfg=cfg, ckpt=ckpt, elapsed=elapsed, report=report, T=t_final,
                loss0=full_weight_loss(initial, pair, t_final), loss1=full_weight_loss(model, pair, t_final),
                steps=len(trainer.history))


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    return _overfit(root / "a"), _overfit(root / "b")


def test_A3_single_pair_overfit(overfit_runs):
    run = overfit_runs[0]
    x, y = run["pair"]
    row = run["report"].per_pair[0]
    diag = float(np.linalg.norm(y.vertices.max(axis=0) - y.vertices.min(axis=0)))
    drop = run["loss0"] / run["loss1"]
    rms = math.sqrt(row["chamfer"])
    ok_drop = drop >= 10
    ok_chamfer = rms < 0.01 * diag
    ok_conf = row["conformal_distortion"] <= row["baseline_conformal_distortion"]
    ok_budget = run["steps"] <= 2000 and run["elapsed"] < 900
    ok = ok_drop and ok_chamfer and ok_conf and ok_budget
    record("A3", ok,
           f"{x.n_vertices} vertices, {run['steps']} steps, {run['elapsed']:.0f}s < 900s; "
           f"loss drop {drop:.1f}x (>= 10) [{'ok' if ok_drop else 'no'}]; "
           f"sqrt Chamfer {rms:.4f} vs 1% diag {0.01 * diag:.4f} (squared {row['chamfer']:.2e}) "
           f"[{'ok' if ok_chamfer else 'no'}]; "
           f"distortion {row['conformal_distortion']:.4f} vs linear {row['baseline_conformal_distortion']:.4f} "
           f"[{'ok' if ok_conf else 'no'}]")


def test_A6_determinism(overfit_runs):
    a, b = overfit_runs
    same_ckpt = a["ckpt"].read_bytes() == b["ckpt"].read_bytes()
    ra, rb = a["ckpt"].parent / "report", b["ckpt"].parent / "report"
    names = sorted(p.name for p in ra.iterdir())
    same_report = (names == sorted(p.name for p in rb.iterdir())
                   and all((ra / n).read_bytes() == (rb / n).read_bytes() for n in names))
    same_log = (a["ckpt"].parent / "train_log.csv").read_bytes() == (b["ckpt"].parent / "train_log.csv").read_bytes()
    record("A6", same_ckpt and same_report and same_log,
           f"checkpoints bit-identical {same_ckpt}; report files ({', '.join(names)}) identical "
           f"{same_report}; training logs identical {same_log}")


# --------------------------------------------------------------------------
# A4: desk-scale generalization with two ablations

A4_CONFIG = dict(epochs=24, steps_per_epoch=50, t_interval=8, geo_decay_epoch=24, lr=1e-3, sigma=50.0,
                 seed=0)
A4_ABLATIONS = {"no geodesic loss": dict(lambda_geo=0.0), "vertex-only transform": dict(edge_transform="vertex")}


@pytest.fixture(scope="module")
def generalization(tmp_path_factory):
    root = tmp_path_factory.mktemp("a4")
    start = time.perf_counter()
    make_dataset(20, root / "data", seed=1, holdout=5)
    test_pairs = identity_pairs(load_dataset(root / "data", "test"))
    runs = {}
    for name, extra in {"default": {}, **A4_ABLATIONS}.items():
        cfg = TrainConfig(dataset=str(root / "data"), out_dir=str(root / name.replace(" ", "_")),
                          **{**A4_CONFIG, **extra})
        ckpt = Trainer(cfg).run()
        runs[name] = (ckpt, evaluate_matching(Model.from_checkpoint(ckpt), test_pairs))
    return dict(root=root, runs=runs, n_pairs=len(test_pairs), elapsed=time.perf_counter() - start)


def test_A4_generalization(generalization):
    runs = generalization["runs"]
    default = runs["default"][1]
    rand = default.summary()["random_expectation"]
    ok_err = default.mean_error < 0.10 and default.mean_error < rand
    ratios = {name: runs[name][1].mean_error / default.mean_error for name in A4_ABLATIONS}
    ok_abl = all(r >= 1.5 for r in ratios.values())
    ok_time = generalization["elapsed"] < 45 * 60
    abl = "; ".join(f"{name} {runs[name][1].mean_error:.4f} ({r:.2f}x, >= 1.5)" for name, r in ratios.items())
    record("A4", ok_err and ok_abl and ok_time,
           f"held-out error {default.mean_error:.4f} < 0.10 over {generalization['n_pairs']} pairs "
           f"(random matching {rand:.3f}); {abl}; {generalization['elapsed'] / 60:.1f} min < 45 min")


def test_cli_self_match_with_trained_model(generalization, tmp_path):
    from morphmatch.cli import main
    ckpt = generalization["runs"]["default"][0]
    mesh = generalization["root"] / "data" / "pose_017.off"
    out = tmp_path / "self.csv"
    assert main(["match", "--checkpoint", str(ckpt), "--source", str(mesh), "--target", str(mesh),
                 "--out", str(out)]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    frac = float(np.mean(rows[:, 0] == rows[:, 1]))
    record("CLI match", frac >= 0.95, f"self-pair identity fraction {frac:.3f} >= 0.95")


def test_cli_puppeteer_self_target(generalization, tmp_path):
    from morphmatch.cli import main
    from morphmatch.mesh import load_mesh
    ckpt = generalization["runs"]["default"][0]
    mesh = generalization["root"] / "data" / "pose_017.off"
    seq = tmp_path / "seq"
    seq.mkdir()
    (seq / "frame.off").write_bytes(mesh.read_bytes())
    assert main(["puppeteer", "--checkpoint", str(ckpt), "--identity", str(mesh), "--sequence", str(seq),
                 "--out-dir", str(tmp_path / "out")]) == 0
    m = load_mesh(mesh)
    c = chamfer(load_mesh(tmp_path / "out" / "frame_0000.off").vertices, m.vertices)
    soft = chamfer(Model.from_checkpoint(ckpt).correspond(m, m).matrix @ m.vertices, m.vertices)
    record("CLI puppeteer", c < 1e-6, f"self-target Chamfer {c:.2e} < 1e-6 (soft target Pi Y alone: {soft:.2e})")
