"""Object-level scene graphs: Delaunay connectivity with squared-distance edges.

A view is a set of detected objects, each with a 3D position in the
observer's frame and an appearance feature vector.  Nodes are connected
by the Delaunay triangulation of their ground-plane (x, y) projection;
each edge carries the squared 3D distance between its endpoints.  The
observer's GPS pose maps node positions into world coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError


@dataclass(frozen=True)
class Pose:
    """Rigid ground pose: translation in meters plus heading (yaw) in radians."""

    t: np.ndarray
    yaw: float

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), 0.0)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def inverse(self) -> "Pose":
        rt = self.rotation().T
        return Pose(-rt @ np.asarray(self.t, dtype=float), -self.yaw)


@dataclass
class SceneGraph:
    """One agent's observation as a graph.

    positions: (n, 3) object positions in the agent frame [m].
    features:  (n, d) appearance feature vectors.
    edges:     (m, 2) int array of undirected node pairs, i < j.
    edge_attr: (m,) squared 3D distances [m^2], aligned with ``edges``.
    pose:      the agent's (noisy GPS) pose.
    """

    positions: np.ndarray
    features: np.ndarray
    edges: np.ndarray
    edge_attr: np.ndarray
    pose: Pose
    world_positions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.world_positions = to_world(self)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]


def _path_edges(order: np.ndarray) -> list[tuple[int, int]]:
    return [(int(order[k]), int(order[k + 1])) for k in range(len(order) - 1)]


def _triangulate_xy(points_xy: np.ndarray) -> list[tuple[int, int]]:
    """Delaunay edge set of 2D points, with degenerate fallbacks.

    n < 3 gives the complete graph; collinear inputs give a path in
    coordinate-sorted order (Delaunay is undefined there but the matcher
    needs a connected graph).
    """
    n = points_xy.shape[0]
    if n <= 1:
        return []
    if n == 2:
        return [(0, 1)]
    try:
        tri = Delaunay(points_xy)
    except QhullError:
        order = np.lexsort((points_xy[:, 1], points_xy[:, 0]))
        return _path_edges(order)
    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = int(simplex[a]), int(simplex[b])
                edges.add((i, j) if i < j else (j, i))
    return sorted(edges)


def build_graph(positions: np.ndarray, features: np.ndarray, pose: Pose) -> SceneGraph:
    """Build the graph representation of one view.

    Triangulation runs on the (x, y) projection; edge attributes are
    squared 3D distances.  Raises on non-finite coordinates.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(positions.shape[0], -1)
    if not np.all(np.isfinite(positions)):
        raise ValueError("invalid coordinates")
    if features.shape[0] != positions.shape[0]:
        raise ValueError(
            f"features rows {features.shape[0]} != positions rows {positions.shape[0]}")

    n = positions.shape[0]
    if n < 3:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        pairs = _triangulate_xy(positions[:, :2])
    edges = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if edges.shape[0]:
        diff = positions[edges[:, 0]] - positions[edges[:, 1]]
        attr = np.einsum("ij,ij->i", diff, diff)
    else:
        attr = np.zeros(0)
    return SceneGraph(positions=positions, features=features,
                      edges=edges, edge_attr=attr, pose=pose)


def to_world(graph: SceneGraph) -> np.ndarray:
    """Map node positions through the agent pose: p_i = R(yaw) v_i + t."""
    rot = graph.pose.rotation()
    t = np.asarray(graph.pose.t, dtype=np.float64)
    return graph.positions @ rot.T + t


def adjacency_matrix(graph: SceneGraph) -> np.ndarray:
    """Dense symmetric matrix of squared distances, zero where unconnected."""
    n = graph.n_nodes
    a = np.zeros((n, n))
    if graph.edges.shape[0]:
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        a[i, j] = graph.edge_attr
        a[j, i] = graph.edge_attr
    return a


# ------------------------------------------------------------------ JSON I/O


def graph_to_json(graph: SceneGraph) -> dict:
    return {
        "positions": graph.positions.tolist(),
        "features": graph.features.tolist(),
        "edges": [[int(i), int(j), float(a)]
                  for (i, j), a in zip(graph.edges, graph.edge_attr)],
        "pose": {"t": np.asarray(graph.pose.t, dtype=float).tolist(),
                 "yaw_deg": math.degrees(graph.pose.yaw)},
    }


def graph_from_json(doc: dict) -> SceneGraph:
    positions = np.asarray(doc["positions"], dtype=np.float64).reshape(-1, 3)
    features = np.asarray(doc["features"], dtype=np.float64)
    if features.size == 0:
        features = features.reshape(positions.shape[0], 0)
    pose = Pose(np.asarray(doc["pose"]["t"], dtype=np.float64),
                math.radians(doc["pose"]["yaw_deg"]))
    raw = doc.get("edges", [])
    if raw:
        edges = np.asarray([[e[0], e[1]] for e in raw], dtype=np.intp)
        attr = np.asarray([e[2] for e in raw], dtype=np.float64)
    else:
        edges = np.zeros((0, 2), dtype=np.intp)
        attr = np.zeros(0)
    graph = SceneGraph.__new__(SceneGraph)
    graph.positions = positions
    graph.features = features
    graph.edges = edges
    graph.edge_attr = attr
    graph.pose = pose
    graph.world_positions = to_world(graph)
    return graph


def load_graph(path) -> SceneGraph:
    with open(path, "r", encoding="utf-8") as f:
        return graph_from_json(json.load(f))
