"""Unsupervised training: pair sampling, augmentation, schedules and the optimizer loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .geodesic import DenseDistances, geodesic_matrix
from .losses import LossWeights
from .mesh import Mesh, decimate, load_mesh, rotate_azimuth, FORMATS
from .ndiff import save_checkpoint
from .nets import Model, NetConfig, trajectory

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "l_reg", "l_arap", "l_geo", "total", "T", "lambda_geo")


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    epochs: int = 10
    steps_per_epoch: int = 0
    lr: float = 1e-4
    seed: int = 0
    lambda_reg: float = 100.0
    lambda_arap: float = 1.0
    lambda_geo: float = 1.0
    t_init: int = 1
    t_max: int = 8
    t_interval: int = 10
    geo_decay_epoch: int = -1
    keep_min: float = 0.7
    keep_max: float = 1.0
    rotate: bool = True
    independent_rotation: bool = False
    fixed_pair: bool = False
    accumulate: int = 1
    checkpoint_every: int = 0
    phi_widths: tuple[int, ...] = (64, 96, 128)
    feat_dim: int = 352
    psi_widths: tuple[int, ...] = (128, 128)
    sigma: float = 7.0
    hidden: int = 0
    global_append: bool = True
    edge_transform: str = "edge"

    def __post_init__(self):
        self.phi_widths = tuple(int(w) for w in self.phi_widths)
        self.psi_widths = tuple(int(w) for w in self.psi_widths)
        if self.t_init < 1:
            raise ValueError("t_init must be at least 1")
        ratio = self.t_max / self.t_init
        if self.t_max % self.t_init or ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError("t_max must be a power-of-two multiple of t_init")
        if self.t_interval < 1:
            raise ValueError("t_interval must be at least 1 epoch")
        if self.decay_epoch > self.epochs:
            raise ValueError("geo_decay_epoch cannot exceed epochs")
        if not 0 < self.keep_min <= self.keep_max <= 1:
            raise ValueError("keep fractions must satisfy 0 < keep_min <= keep_max <= 1")
        if self.accumulate < 1:
            raise ValueError("accumulate must be at least 1")
        self.net_config()
        self.weights()

    @property
    def decay_epoch(self) -> int:
        """Epoch from which lambda_geo is 0; a negative setting means 60% of the run."""
        if self.geo_decay_epoch < 0:
            return int(round(0.6 * self.epochs))
        return self.geo_decay_epoch

    def net_config(self) -> NetConfig:
        return NetConfig(phi_widths=self.phi_widths, feat_dim=self.feat_dim,
                         psi_widths=self.psi_widths, sigma=self.sigma, hidden=self.hidden,
                         global_append=self.global_append, edge_transform=self.edge_transform)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_reg, self.lambda_arap, self.lambda_geo)

    def echo(self) -> dict:
        """Settings recorded in checkpoints; output locations are left out."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "out_dir"}
        d["phi_widths"] = list(self.phi_widths)
        d["psi_widths"] = list(self.psi_widths)
        return d

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        values.update(overrides or {})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key]) if isinstance(raw, str) else raw
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(raw: str, typ) -> object:
    typ = str(typ)
    if typ.startswith("bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    if typ.startswith("tuple"):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


# --------------------------------------------------------------------------
# schedules

def schedule_T(epoch: int, config: TrainConfig) -> int:
    return min(config.t_max, config.t_init * 2 ** (epoch // config.t_interval))


def schedule_lambda_geo(epoch: int, config: TrainConfig) -> float:
    return config.lambda_geo if epoch < config.decay_epoch else 0.0


# --------------------------------------------------------------------------
# data

def load_dataset(path, split: str | None = "train") -> list[Mesh]:
    """Meshes listed in ``path/manifest.json`` (optionally one split) or all mesh files in ``path``."""
    path = Path(path)
    manifest = path / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text(encoding="utf-8"))["meshes"]
        if split is not None:
            entries = [e for e in entries if e.get("split", "train") == split]
        return [load_mesh(path / e["file"]) for e in entries]
    files = sorted(p for p in path.iterdir() if p.suffix.lstrip(".").lower() in FORMATS)
    return [load_mesh(p) for p in files]


def sample_pair(dataset: Sequence[Mesh], rng: np.random.Generator) -> tuple[Mesh, Mesh]:
    if len(dataset) < 2:
        raise ValueError("pair sampling needs at least two shapes")
    i, j = rng.choice(len(dataset), size=2, replace=False)
    return dataset[int(i)], dataset[int(j)]


def augment_pair(pair: tuple[Mesh, Mesh], config: TrainConfig,
                 rng: np.random.Generator) -> tuple[Mesh, Mesh]:
    """Decimate each mesh independently, then rotate both about the vertical axis."""
    out = []
    for mesh in pair:
        keep = rng.uniform(config.keep_min, config.keep_max)
        seed = int(rng.integers(2 ** 31))
        out.append(decimate(mesh, keep, seed)[0] if keep < 1.0 else mesh)
    if config.rotate:
        angle = rng.uniform(0.0, 2 * np.pi)
        other = rng.uniform(0.0, 2 * np.pi) if config.independent_rotation else angle
        out = [rotate_azimuth(out[0], angle), rotate_azimuth(out[1], other)]
    return out[0], out[1]


class GeodesicCache:
    """Bounded in-memory map from mesh content hash to its distance matrix."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self._store: OrderedDict[str, DenseDistances] = OrderedDict()

    def __call__(self, mesh: Mesh) -> DenseDistances:
        key = mesh.content_hash()
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        d = geodesic_matrix(mesh)
        self._store[key] = d
        if len(self._store) > self.capacity:
            self._store.popitem(last=False)
        return d


# --------------------------------------------------------------------------
# optimization

def train_step(model: Model, pair: tuple[Mesh, Mesh], T: int, weights: LossWeights, lr: float,
               geodesics: Callable[[Mesh], DenseDistances], update: bool = True) -> dict:
    """Forward the pair, back-propagate the weighted loss and (optionally) apply Adam.

    Returns the unweighted components and the weighted total.
    """
    mesh_x, mesh_y = pair
    corr, traj = trajectory(mesh_x, mesh_y, model.params, model.config, T)
    comps = {
        "reg": losses.registration_loss(traj.states[-1], corr.pi, mesh_y.vertices),
        "arap": losses.arap_sequence_loss(traj, mesh_x.edges),
        "geo": losses.geodesic_loss(corr.pi, geodesics(mesh_x), geodesics(mesh_y)),
    }
    total, values = losses.total_loss(comps, weights)
    if total.requires_grad:
        total.backward()
    if update:
        model.params.adam_step(lr)
        model.params.zero_grad()
    return values


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Sequence[Mesh] | None = None):
        self.config = config
        self.dataset = list(dataset) if dataset is not None else load_dataset(config.dataset)
        if len(self.dataset) < 2:
            raise ValueError("training needs at least two shapes")
        self.model = Model.create(config.net_config(), seed=config.seed)
        self.rng = np.random.default_rng(config.seed + 1)
        self.geodesics = GeodesicCache()
        self.history: list[dict] = []
        self.out_dir = Path(config.out_dir)

    @property
    def steps_per_epoch(self) -> int:
        return self.config.steps_per_epoch or len(self.dataset)

    def next_pair(self) -> tuple[Mesh, Mesh]:
        cfg = self.config
        pair = ((self.dataset[0], self.dataset[1]) if cfg.fixed_pair
                else sample_pair(self.dataset, self.rng))
        if cfg.keep_min < 1.0 or cfg.rotate:
            pair = augment_pair(pair, cfg, self.rng)
        return pair

    def checkpoint(self, name: str, epoch: int) -> Path:
        return save_checkpoint(
            self.out_dir / name, self.model.params,
            {"net": self.model.config.to_dict(), "train": self.config.echo()},
            {"epoch": epoch})

    def run_epoch(self, epoch: int, writer=None) -> None:
        cfg = self.config
        T = schedule_T(epoch, cfg)
        w = cfg.weights()
        w.geo = schedule_lambda_geo(epoch, cfg)
        for _ in range(self.steps_per_epoch):
            acc = []
            for k in range(cfg.accumulate):
                acc.append(train_step(self.model, self.next_pair(), T, w, cfg.lr,
                                      self.geodesics, update=k == cfg.accumulate - 1))
            row = {"step": len(self.history) + 1, "epoch": epoch,
                   "l_reg": _mean(acc, "reg"), "l_arap": _mean(acc, "arap"),
                   "l_geo": _mean(acc, "geo"), "total": _mean(acc, "total"),
                   "T": T, "lambda_geo": w.geo}
            self.history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])

    def run(self) -> Path:
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        with open(self.out_dir / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for epoch in range(cfg.epochs):
                self.run_epoch(epoch, writer)
                fh.flush()
                last = self.history[-1]
                log.info("epoch %d T=%d total=%.4g reg=%.4g arap=%.4g geo=%.4g", epoch,
                         last["T"], last["total"], last["l_reg"], last["l_arap"], last["l_geo"])
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    self.checkpoint(f"epoch_{epoch + 1:04d}.mmck", epoch + 1)
        return self.checkpoint("final.mmck", cfg.epochs)


def _mean(rows: list[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows]))


def train(config: TrainConfig, dataset: Sequence[Mesh] | None = None) -> Path:
    """Run a full training and return the final checkpoint path."""
    return Trainer(config, dataset).run()
