"""Feature extractor, correspondence layer and interpolator networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff as nd
from .mesh import EdgeSet, Mesh
from .ndiff import ParamStore, Value

FEATURE_INPUT_DIM = 6   # xyz + vertex normal
INTERP_INPUT_DIM = 7    # xyz + soft offset + time


@dataclass
class NetConfig:
    """Architecture of both networks.

    ``edge_transform="vertex"`` swaps the edge function for a per-vertex MLP and
    ``global_append=False`` drops the global max feature; both exist for ablations.
    """

    phi_widths: tuple[int, ...] = (64, 96, 128)
    feat_dim: int = 352
    psi_widths: tuple[int, ...] = (128, 128)
    sigma: float = 7.0
    hidden: int = 0
    global_append: bool = True
    edge_transform: str = "edge"
    phi_in_dim: int = FEATURE_INPUT_DIM
    psi_in_dim: int = INTERP_INPUT_DIM

    def __post_init__(self):
        self.phi_widths = tuple(int(w) for w in self.phi_widths)
        self.psi_widths = tuple(int(w) for w in self.psi_widths)
        if any(w <= 0 for w in self.phi_widths + self.psi_widths) or self.feat_dim <= 0:
            raise ValueError("all network widths must be positive")
        if self.global_append and self.feat_dim % 2:
            raise ValueError("feat_dim must be even when the global feature is appended")
        if self.edge_transform not in ("edge", "vertex"):
            raise ValueError(f"edge_transform must be 'edge' or 'vertex', got {self.edge_transform!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.phi_in_dim != FEATURE_INPUT_DIM or self.psi_in_dim != INTERP_INPUT_DIM:
            raise ValueError(
                f"input conventions mismatch: expected phi_in_dim={FEATURE_INPUT_DIM}, "
                f"psi_in_dim={INTERP_INPUT_DIM}, got {self.phi_in_dim}, {self.psi_in_dim}")

    def phi_stages(self) -> list[tuple[int, bool]]:
        """(local width, appends global feature) for each stage of the extractor."""
        app = self.global_append
        last = self.feat_dim // 2 if app else self.feat_dim
        return [(w, app) for w in self.phi_widths] + [(last, app)]

    def psi_stages(self) -> list[tuple[int, bool]]:
        return [(w, self.global_append) for w in self.psi_widths] + [(3, False)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi_widths"] = list(self.phi_widths)
        d["psi_widths"] = list(self.psi_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# parameters

def _init_block(store: ParamStore, prefix: str, d_in: int, width: int, hidden: int,
                mode: str, rng: np.random.Generator) -> None:
    dt = store.dtype
    w1 = nd.xavier_uniform(rng, 2 * d_in if mode == "edge" else d_in, hidden, dt)
    skip = nd.xavier_uniform(rng, 2 * d_in if mode == "edge" else d_in, width, dt)
    store.add(f"{prefix}.w_self", w1[:d_in])
    if mode == "edge":
        store.add(f"{prefix}.w_edge", w1[d_in:])
    store.bias(f"{prefix}.b1", hidden)
    store.weight(f"{prefix}.w_out", hidden, width, rng)
    store.bias(f"{prefix}.b_out", width)
    store.add(f"{prefix}.skip_self", skip[:d_in])
    if mode == "edge":
        store.add(f"{prefix}.skip_edge", skip[d_in:])


def init_params(config: NetConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for net, d_in, stages in (("phi", config.phi_in_dim, config.phi_stages()),
                              ("psi", config.psi_in_dim, config.psi_stages())):
        for k, (width, append) in enumerate(stages):
            _init_block(store, f"{net}.{k}", d_in, width, config.hidden or width,
                        config.edge_transform, rng)
            d_in = 2 * width if append else width
    return store


# --------------------------------------------------------------------------
# layers

def edgeconv_block(features: Value, edges: EdgeSet, params: ParamStore, prefix: str,
                   append: bool = True, mode: str = "edge") -> Value:
    """One EdgeConv stage followed (optionally) by the global max append.

    The residual edge function is
    ``h(a, e) = relu(a W_self + e W_edge + b1) W_out + b_out + a S_self + e S_edge``
    with ``a = x_i`` and ``e = x_j - x_i``. Linear terms are evaluated per
    vertex before gathering; the ``x_i``-only part is constant over a
    neighborhood and is added after the max.
    """
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    x = features
    if mode == "vertex":
        hid = nd.relu(nd.affine(x, p("w_self"), p("b1")))
        local = nd.affine(hid, p("w_out"), p("b_out")) + x @ p("skip_self")
    else:
        q = x @ p("w_edge")
        base = x @ p("w_self") - q + p("b1")
        s = x @ p("skip_edge")

        def edge_fn(_, e: EdgeSet) -> Value:
            pre = nd.gather_rows(base, e.src, e.scatter_src) + nd.gather_rows(q, e.dst, e.scatter_dst)
            return nd.relu(pre) @ p("w_out") + nd.gather_rows(s, e.dst, e.scatter_dst)

        local = nd.neighborhood_max(x, edges, edge_fn) + (x @ p("skip_self") - s + p("b_out"))
    if not append:
        return local
    return nd.concat([local, nd.broadcast_rows(nd.global_max(local), local.shape[0])])


def _run_stages(x: Value, edges: EdgeSet, params: ParamStore, net: str,
                stages: list[tuple[int, bool]], mode: str) -> Value:
    for k, (_, append) in enumerate(stages):
        x = edgeconv_block(x, edges, params, f"{net}.{k}", append, mode)
    return x


def extract_features(mesh: Mesh, params: ParamStore, config: NetConfig) -> Value:
    """Per-vertex features from positions and normals, shape ``(n, feat_dim)``."""
    inp = np.concatenate([mesh.vertices, mesh.normals], axis=1).astype(params.dtype)
    if inp.shape[1] != config.phi_in_dim:
        raise ValueError(f"mesh features have width {inp.shape[1]}, model expects {config.phi_in_dim}")
    return _run_stages(Value(inp), mesh.edges, params, "phi", config.phi_stages(),
                       config.edge_transform)


@dataclass
class Correspondence:
    """Soft assignment ``pi`` (row-stochastic) and its per-row argmax."""

    pi: Value

    @property
    def matrix(self) -> np.ndarray:
        return self.pi.data

    @property
    def hard(self) -> np.ndarray:
        return np.argmax(self.pi.data, axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return np.max(self.pi.data, axis=1)


def correspondence(feat_x: Value, feat_y: Value, sigma: float) -> Correspondence:
    return Correspondence(nd.row_softmax(nd.cosine_matrix(feat_x, feat_y), sigma))


def interpolator_input(x: np.ndarray, pi, y: np.ndarray, t: float) -> Value:
    """``Z = (X, pi Y - X, t)`` of shape ``(n, 7)``."""
    pi = nd.as_value(pi)
    x = np.asarray(x, dtype=pi.dtype)
    offset = pi @ Value(np.asarray(y, dtype=pi.dtype)) - Value(x)
    return _stack_input(x, offset, t)


def _stack_input(x: np.ndarray, offset: Value, t: float) -> Value:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return nd.concat([Value(x), offset, Value(np.full((len(x), 1), t, dtype=x.dtype))])


def displacement(mesh_x: Mesh, z: Value, params: ParamStore, config: NetConfig, t: float) -> Value:
    """``Delta(t) = t * V`` where ``V`` is the interpolator output for input ``z``."""
    v = _run_stages(z, mesh_x.edges, params, "psi", config.psi_stages(), config.edge_transform)
    return v * t


@dataclass
class Trajectory:
    times: list[float]
    states: list[Value] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        return [s.data for s in self.states]

    def __len__(self) -> int:
        return len(self.states)


def trajectory(mesh_x: Mesh, mesh_y: Mesh, params: ParamStore, config: NetConfig,
               T: int) -> tuple[Correspondence, Trajectory]:
    """Correspondence plus states ``X(k/T)`` for ``k = 0..T``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    corr = correspondence(extract_features(mesh_x, params, config),
                          extract_features(mesh_y, params, config), config.sigma)
    return corr, rollout(mesh_x, mesh_y, corr.pi, params, config, [k / T for k in range(T + 1)])


def rollout(mesh_x: Mesh, mesh_y: Mesh, pi, params: ParamStore, config: NetConfig,
            times: list[float]) -> Trajectory:
    """States ``X + Delta(t)`` for each ``t`` in ``times``; ``t = 0`` yields ``X`` exactly."""
    pi = nd.as_value(pi)
    x = np.asarray(mesh_x.vertices, dtype=pi.dtype)
    y = np.asarray(mesh_y.vertices, dtype=pi.dtype)
    offset = pi @ Value(y) - Value(x)
    traj = Trajectory(list(times))
    for t in times:
        if t == 0:
            traj.states.append(Value(x))
            continue
        z = _stack_input(x, offset, t)
        traj.states.append(Value(x) + displacement(mesh_x, z, params, config, t))
    return traj


class Model:
    """Parameters bound to an architecture, with inference helpers."""

    def __init__(self, config: NetConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: NetConfig | None = None, seed: int = 0, dtype=np.float32) -> "Model":
        config = config or NetConfig()
        return cls(config, init_params(config, seed, dtype))

    @classmethod
    def from_checkpoint(cls, path) -> "Model":
        params, header = nd.load_checkpoint(path)
        config = NetConfig.from_dict(header["config"]["net"])
        expected = init_params(config, 0, np.float32)
        for name, p in expected.items():
            if name not in params or params[name].shape != p.shape:
                raise ValueError(f"{path}: parameter {name!r} does not match the stored config")
        return cls(config, params)

    def correspond(self, mesh_x: Mesh, mesh_y: Mesh) -> Correspondence:
        return correspondence(extract_features(mesh_x, self.params, self.config),
                              extract_features(mesh_y, self.params, self.config),
                              self.config.sigma)

    def match(self, mesh_x: Mesh, mesh_y: Mesh) -> np.ndarray:
        return self.correspond(mesh_x, mesh_y).hard

    def trajectory(self, mesh_x: Mesh, mesh_y: Mesh, T: int) -> tuple[Correspondence, Trajectory]:
        return trajectory(mesh_x, mesh_y, self.params, self.config, T)

    def interpolate(self, mesh_x: Mesh, mesh_y: Mesh, times) -> list[np.ndarray]:
        """Deformed vertex sets in float64; the ``t = 0`` entry is the source exactly."""
        corr = self.correspond(mesh_x, mesh_y)
        traj = rollout(mesh_x, mesh_y, corr.pi, self.params, self.config, list(times))
        out = []
        for t, s in zip(times, traj.states):
            if t == 0:
                out.append(mesh_x.vertices.copy())
            else:
                disp = s.data.astype(np.float64) - mesh_x.vertices.astype(self.params.dtype)
                out.append(mesh_x.vertices + disp)
        return out
