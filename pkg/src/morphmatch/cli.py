"""Command-line entry point: ``morphmatch <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, synthgen
from .mesh import FORMATS, Mesh, decimate, load_mesh, save_mesh
from .nets import Model
from .training import TrainConfig, train

log = logging.getLogger("morphmatch")


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers

def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> TrainConfig:
    over = _overrides(args.set)
    for key in ("dataset", "out_dir", "epochs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = str(val)
    if args.config:
        return TrainConfig.from_file(args.config, over)
    return TrainConfig.from_strings(over)


def _time_tag(t: float) -> str:
    return f"t{t:.4f}"


def _write_states(mesh_x: Mesh, states, times, out_dir: Path, stem: str, fmt: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, s in zip(times, states):
        p = out_dir / f"{stem}_{_time_tag(t)}.{fmt}"
        save_mesh(mesh_x.with_vertices(s), p)
        paths.append(p)
    return paths


def interpolate_pair(model: Model, mesh_x: Mesh, mesh_y: Mesh, steps: int, out_dir, stem: str = "interp",
                     fmt: str = "off") -> list[Path]:
    """Write ``X(t)`` for ``t = 0, 1/steps, ..., 1``; file names encode ``t``."""
    if steps < 1:
        raise CommandError("--steps must be at least 1")
    times = [k / steps for k in range(steps + 1)]
    return _write_states(mesh_x, model.interpolate(mesh_x, mesh_y, times), times, Path(out_dir), stem, fmt)


def _eval_pairs(config: TrainConfig, split: str, keep: float | None, seed: int) -> list[evaluation.Pair]:
    root = Path(config.dataset)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise CommandError(f"{root}: no manifest.json, so no ground truth is available")
    info = json.loads(manifest.read_text(encoding="utf-8"))
    if info.get("ground_truth") != "identity":
        raise CommandError(f"{manifest}: unsupported ground truth {info.get('ground_truth')!r}")
    entries = [e for e in info["meshes"] if e.get("split", "train") == split]
    if len(entries) < 2:
        entries = info["meshes"]
    meshes = [load_mesh(root / e["file"]) for e in entries]
    pairs = evaluation.identity_pairs(meshes, [Path(e["file"]).stem for e in entries])
    if keep is None or keep >= 1.0:
        return pairs
    rng = np.random.default_rng(seed)
    out = []
    for p in pairs:
        sx, mx = decimate(p.source, keep, int(rng.integers(2 ** 31)))
        sy, my = decimate(p.target, keep, int(rng.integers(2 ** 31)))
        out.append(evaluation.Pair(sx, sy, evaluation.transfer_ground_truth(p.gt, mx, my), p.name))
    return out


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = _config(args)
    path = train(cfg)
    print(path)
    return 0


def cmd_match(args) -> int:
    model = Model.from_checkpoint(args.checkpoint)
    src, tgt = load_mesh(args.source), load_mesh(args.target)
    corr = model.correspond(src, tgt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("source_index", "target_index", "softmax_confidence"))
        for i, (j, c) in enumerate(zip(corr.hard, corr.confidence)):
            w.writerow((i, int(j), f"{float(c):.6f}"))
    return 0


def cmd_interpolate(args) -> int:
    model = Model.from_checkpoint(args.checkpoint)
    src, tgt = load_mesh(args.source), load_mesh(args.target)
    for p in interpolate_pair(model, src, tgt, args.steps, args.out_dir, args.stem, args.format):
        print(p)
    return 0


def cmd_augment(args) -> int:
    """Add interpolated poses between every ordered pair of training shapes."""
    dataset = Path(args.dataset)
    if args.generate:
        synthgen.make_dataset(args.generate, dataset, rings=args.rings, seed=args.seed)
    model = Model.from_checkpoint(args.checkpoint)
    manifest = dataset / "manifest.json"
    if manifest.exists():
        entries = [e for e in json.loads(manifest.read_text(encoding="utf-8"))["meshes"]
                   if e.get("split", "train") == "train"]
        files = [dataset / e["file"] for e in entries]
    else:
        files = sorted(p for p in dataset.iterdir() if p.suffix.lstrip(".") in FORMATS)
    meshes = [load_mesh(f) for f in files]
    out_dir = Path(args.out_dir)
    count = 0
    for i, j in itertools.permutations(range(len(meshes)), 2):
        times = [k / (args.steps + 1) for k in range(1, args.steps + 1)]
        states = model.interpolate(meshes[i], meshes[j], times)
        count += len(_write_states(meshes[i], states, times, out_dir,
                                   f"{files[i].stem}_to_{files[j].stem}", args.format))
    print(f"wrote {count} interpolated meshes to {out_dir}")
    return 0


def cmd_eval_match(args) -> int:
    cfg = _config(args)
    model = Model.from_checkpoint(args.checkpoint)
    pairs = _eval_pairs(cfg, args.split, args.keep, cfg.seed)
    report = evaluation.evaluate_matching(model, pairs, out_dir=args.out_dir)
    for k, v in report.summary().items():
        print(f"{k}: {v}")
    return 0


def cmd_eval_interp(args) -> int:
    cfg = _config(args)
    model = Model.from_checkpoint(args.checkpoint)
    pairs = _eval_pairs(cfg, args.split, None, cfg.seed)
    report = evaluation.evaluate_interpolation(model, pairs, T=args.steps, penalty=args.penalty,
                                               out_dir=args.out_dir)
    for k, v in report.summary().items():
        print(f"{k}: {v}")
    return 0


def cmd_synthgen(args) -> int:
    manifest = synthgen.make_dataset(args.n_poses, args.out_dir, rings=args.rings, seed=args.seed,
                                     segments=args.segments, max_angle=args.max_angle,
                                     holdout=args.holdout, taper=args.taper, bulge=args.bulge,
                                     fmt=args.format)
    print(f"wrote {len(manifest['meshes'])} poses to {args.out_dir} (manifest {manifest['sha256'][:12]})")
    return 0


def cmd_puppeteer(args) -> int:
    model = Model.from_checkpoint(args.checkpoint)
    ident = load_mesh(args.identity)
    seq = Path(args.sequence)
    frames = sorted(p for p in seq.iterdir() if p.suffix.lstrip(".") in FORMATS)
    if not frames:
        raise CommandError(f"{seq}: pose sequence is empty")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        x1 = model.interpolate(ident, load_mesh(frame), [1.0])[0]
        save_mesh(ident.with_vertices(x1), out_dir / f"frame_{k:04d}.{args.format}")
    print(f"wrote {len(frames)} frames to {out_dir}")
    return 0


# --------------------------------------------------------------------------
# parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphmatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    _add_config_flags(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="hard correspondences between two meshes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("interpolate", help="write the deformation path between two meshes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stem", default="interp")
    p.add_argument("--format", choices=FORMATS, default="off")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("augment", help="interpolate between all training pairs of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=3, help="intermediate poses per pair")
    p.add_argument("--generate", type=int, default=0, metavar="N",
                   help="first write an N-pose synthetic dataset into --dataset")
    p.add_argument("--rings", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=FORMATS, default="off")
    p.set_defaults(func=cmd_augment)

    for name, func in (("eval-match", cmd_eval_match), ("eval-interp", cmd_eval_interp)):
        p = sub.add_parser(name, help="evaluate a checkpoint on a dataset with ground truth")
        _add_config_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out-dir")
        if name == "eval-match":
            p.add_argument("--keep", type=float, help="decimate every pair to this fraction first")
        else:
            p.add_argument("--steps", type=int, default=8)
            p.add_argument("--penalty", type=float, default=evaluation.INVERTED_PENALTY)
        p.set_defaults(func=func)

    p = sub.add_parser("synthgen", help="write a synthetic posed-capsule dataset")
    p.add_argument("--n-poses", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rings", type=int, default=30)
    p.add_argument("--segments", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=int, default=0)
    p.add_argument("--max-angle", type=float, default=1.2)
    p.add_argument("--taper", type=float, default=1.0)
    p.add_argument("--bulge", type=float, default=0.0, help="one-sided swelling of the middle segment")
    p.add_argument("--format", choices=FORMATS, default="off")
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("puppeteer", help="transfer each pose of a sequence onto an identity mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--sequence", required=True, help="directory of target poses, read in name order")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=FORMATS, default="off")
    p.set_defaults(func=cmd_puppeteer)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"morphmatch {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
