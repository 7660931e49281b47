"""Per-timestep joint graphs, their stacked spatial-temporal form, and the
GCN encoder producing the robot-structure embedding.

Nodes are movable joints; spatial edges follow link adjacency (fixed
joints collapsed) and are configuration-independent. Node features are
[normalized coordinates (3) || distances to all joints (m) || body
one-hot (2)], so the feature width is always 3 + m + 2. Temporal edges
connect the same joint at consecutive timesteps; an all-pairs option
exists but is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import InconsistentSlices, LengthMismatch, ShapeMismatch
from .kinematics import fk_joint_positions
from .urdf import RobotModel

GCN_HIDDEN = 128
GCN_LAYERS = 4


@dataclass(frozen=True)
class Box:
    """Axis-aligned workspace box used to normalize joint coordinates."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if not np.all(hi > lo):
            raise ValueError("workspace box needs positive extent per axis")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    def normalize(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return 2.0 * (points - lo) / (hi - lo) - 1.0

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


def default_workspace(model: RobotModel) -> Box:
    if model.name == "planar_bimanual_3dof":
        return Box((-0.8, -0.8, -0.2), (0.8, 0.8, 0.2))
    return Box((-1.5, -1.5, -0.5), (1.5, 1.5, 2.0))


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    nodes: tuple[str, ...]          # movable joint names, model order
    edges: tuple[tuple[int, int], ...]
    features: np.ndarray            # (m, 3 + m + 2)


@dataclass(frozen=True, eq=False)
class STGraph:
    T: int
    m: int
    nodes: int                      # m * T
    spatial_edges: tuple[tuple[int, int], ...]   # replicated per slice
    temporal_edges: tuple[tuple[int, int], ...]
    features: np.ndarray            # (m * T, D_f), oldest slice first

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return self.spatial_edges + self.temporal_edges


def feature_width(model: RobotModel) -> int:
    return 3 + model.m + 2


def spatial_edges(model: RobotModel) -> tuple[tuple[int, int], ...]:
    """Movable-joint adjacency through the link tree, fixed joints collapsed."""
    cached = getattr(model, "_spatial_edges", None)
    if cached is not None:
        return cached
    movable = model.movable_joints
    index = {j.name: i for i, j in enumerate(movable)}
    child_of = {j.child_link: j for j in model.joints}
    edges = []
    for j in movable:
        # nearest movable ancestor, walking up through fixed joints
        link = j.parent_link
        while link in child_of:
            up = child_of[link]
            if up.movable:
                edges.append((index[up.name], index[j.name]))
                break
            link = up.parent_link
    edges = tuple(sorted(edges))
    object.__setattr__(model, "_spatial_edges", edges)
    return edges


def node_features(model: RobotModel, theta, workspace: Box) -> np.ndarray:
    """Per-joint feature rows at one configuration.

    Coordinates are normalized per axis to [-1, 1] by the workspace box;
    distances stay in raw meters between unnormalized joint positions;
    the body one-hot is [1, 0] for the left arm, [0, 1] for the right.
    """
    positions = fk_joint_positions(model, theta)  # raises LengthMismatch
    m = model.m
    feats = np.zeros((m, feature_width(model)))
    feats[:, :3] = workspace.normalize(positions)
    diff = positions[:, None, :] - positions[None, :, :]
    feats[:, 3:3 + m] = np.sqrt((diff * diff).sum(axis=2))
    left = set(model.arms[0])
    for i, j in enumerate(model.movable_joints):
        feats[i, 3 + m + (0 if j.name in left else 1)] = 1.0
    return feats


def build_spatial_graph(model: RobotModel, theta, workspace: Box) -> SpatialGraph:
    return SpatialGraph(
        nodes=tuple(j.name for j in model.movable_joints),
        edges=spatial_edges(model),
        features=node_features(model, theta, workspace),
    )


def build_st_graph(history: list[SpatialGraph], T: int,
                   temporal_all_pairs: bool = False) -> STGraph:
    """Stack per-timestep graphs (oldest first) and add same-joint edges.

    Temporal edges link consecutive timesteps by default; the all-pairs
    variant connects every timestep pair.
    """
    if T != len(history):
        raise InconsistentSlices(f"T={T} but {len(history)} slices given")
    if not history:
        raise InconsistentSlices("empty history")
    first = history[0]
    m = len(first.nodes)
    for g in history:
        if g.nodes != first.nodes or g.edges != first.edges:
            raise InconsistentSlices("slices disagree on nodes or edges")
        if g.features.shape != first.features.shape:
            raise InconsistentSlices("slices disagree on feature shape")

    sp = tuple((t * m + a, t * m + b) for t in range(T) for a, b in first.edges)
    if temporal_all_pairs:
        tmp = tuple((t1 * m + i, t2 * m + i)
                    for i in range(m) for t1 in range(T) for t2 in range(t1 + 1, T))
    else:
        tmp = tuple((t * m + i, (t + 1) * m + i) for t in range(T - 1) for i in range(m))
    return STGraph(
        T=T, m=m, nodes=m * T,
        spatial_edges=sp, temporal_edges=tmp,
        features=np.vstack([g.features for g in history]),
    )


def normalized_adjacency(n_nodes: int, edges) -> np.ndarray:
    """Symmetric GCN propagation matrix D^-1/2 (A + I) D^-1/2."""
    a = np.eye(n_nodes)
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    d = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(d)
    return a * dinv[:, None] * dinv[None, :]


@dataclass
class GCNParams:
    """Per-layer weights and biases; layer 0 maps D_f to the hidden width."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def create(input_dim: int, hidden: int = GCN_HIDDEN, layers: int = GCN_LAYERS,
               rng: np.random.Generator | None = None) -> "GCNParams":
        rng = rng or np.random.default_rng(0)
        dims = [input_dim] + [hidden] * layers
        ws, bs = [], []
        for i in range(layers):
            scale = np.sqrt(2.0 / dims[i])
            ws.append(rng.normal(0.0, scale, (dims[i], dims[i + 1])))
            bs.append(np.zeros(dims[i + 1]))
        return GCNParams(ws, bs)

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]


def gcn_forward(graph: STGraph | SpatialGraph, params: GCNParams,
                tape: Tape | None = None,
                features: Var | None = None,
                weights: list[Var] | None = None,
                biases: list[Var] | None = None) -> Var:
    """Encode a graph to a single embedding on the tape.

    Per layer H <- leaky_relu(A_hat H W + b) with self-loop symmetric
    normalization; the embedding is the mean over all node rows of the
    last layer, so its width never depends on the node count. Vars for
    features/weights may be supplied to share a caller's tape; otherwise
    constants are created on a fresh tape.
    """
    if isinstance(graph, SpatialGraph):
        n_nodes, edges, feats = len(graph.nodes), graph.edges, graph.features
    else:
        n_nodes, edges, feats = graph.nodes, graph.edges, graph.features
    if params.weights[0].shape[0] != feats.shape[1]:
        raise ShapeMismatch(
            f"layer 0 expects width {params.weights[0].shape[0]}, features have {feats.shape[1]}")
    tape = tape or (features.tape if features is not None else Tape())
    h = features if features is not None else tape.const(feats)
    a_hat = tape.const(normalized_adjacency(n_nodes, edges))
    for li in range(len(params.weights)):
        w = weights[li] if weights is not None else tape.const(params.weights[li])
        b = biases[li] if biases is not None else tape.const(params.biases[li])
        h = ad.leaky_relu(ad.matmul(ad.matmul(a_hat, h), w) + b)
    return ad.mean(h, axis=0)
