"""Static world: Manhattan road grid, RSU and fog placement, routing tables."""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .._validation import stream
from ..exceptions import ConfigError

# Stream keys keep independent randomness apart (common random numbers).
STREAM_WORLD = 1
STREAM_TRIPS = 2
STREAM_CHANNEL = 3
STREAM_LINK = 4
STREAM_DECISION = 5
STREAM_CLOUD = 6
STREAM_INCIDENT = 7
STREAM_PLANS = 8


@dataclass
class World:
    """Immutable geometry shared by all variants of a scenario/seed pair.

    Attributes
    ----------
    node_xy : ndarray of shape (n_nodes, 2)
    edges : ndarray of shape (n_edges, 2)
        Directed edges as ``(tail, head)`` node pairs.
    edge_capacity, edge_free_speed : ndarray of shape (n_edges,)
    next_hop : ndarray of shape (n_nodes, n_nodes)
        Next node on the free-flow shortest path, -1 on the diagonal.
    edge_index : ndarray of shape (n_nodes, n_nodes)
        Edge id for every adjacent node pair, -1 otherwise.
    rsu_xy : ndarray of shape (n_rsus, 2)
    rsu_up : ndarray of bool
    rsu_fog : ndarray of int
        Home fog of every RSU.
    fog_xy : ndarray of shape (n_fogs, 2)
    fog_capacity : ndarray
        Service rate of every fog node in packets per second.
    fog_memory : ndarray
        Largest share of the fleet's context a fog node can hold.
    backhaul_s : ndarray of shape (n_fogs, n_rsus)
        One-way backhaul delay from an RSU to a fog node.
    """

    node_xy: np.ndarray
    edges: np.ndarray
    edge_capacity: np.ndarray
    edge_free_speed: np.ndarray
    edge_length: np.ndarray
    next_hop: np.ndarray
    edge_index: np.ndarray
    rsu_xy: np.ndarray
    rsu_up: np.ndarray
    rsu_fog: np.ndarray
    rsu_nr: np.ndarray
    fog_xy: np.ndarray
    fog_capacity: np.ndarray
    fog_memory: np.ndarray
    backhaul_s: np.ndarray
    vehicle_origin: np.ndarray

    @property
    def n_nodes(self):
        return self.node_xy.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def digest(self):
        h = hashlib.sha256()
        for name in self.__dataclass_fields__:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def _grid(rows, cols, spacing):
    ij = np.array([(r, c) for r in range(rows) for c in range(cols)])
    xy = ij[:, ::-1].astype(float) * spacing
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                edges += [(u, u + 1), (u + 1, u)]
            if r + 1 < rows:
                edges += [(u, u + cols), (u + cols, u)]
    return xy, np.array(edges, dtype=np.int64).reshape(-1, 2)


def _spread_points(n, width, height):
    """Deterministic near-uniform layout: a balanced lattice of n cells."""
    if n == 0:
        return np.zeros((0, 2))
    cols = int(np.ceil(np.sqrt(n * max(width, 1.0) / max(height, 1.0))))
    rows = int(np.ceil(n / cols))
    pts = []
    for k in range(n):
        r, c = divmod(k, cols)
        in_row = min(cols, n - r * cols)
        pts.append(((c + 0.5) * width / in_row, (r + 0.5) * height / rows))
    return np.array(pts)


def build_world(cfg):
    """Deterministically build the static world for ``cfg``."""
    issues = cfg.validate()
    if issues:
        raise ConfigError("; ".join(f"{f}: {m}" for f, m in issues), [(None, f, m) for f, m in issues])
    rng = stream(cfg.seed, STREAM_WORLD)
    rows, cols = int(cfg.grid_rows), int(cfg.grid_cols)
    node_xy, edges = _grid(rows, cols, cfg.edge_length_m)
    n_nodes = rows * cols
    n_edges = len(edges)
    closed = {tuple(e) for e in cfg.closures}

    edge_length = np.full(n_edges, float(cfg.edge_length_m))
    edge_free_speed = cfg.free_flow_mps * rng.uniform(0.85, 1.15, n_edges) if n_edges else np.zeros(0)
    edge_capacity = np.full(n_edges, float(cfg.edge_capacity))
    keep = np.array([tuple(e) not in closed for e in edges.tolist()], dtype=bool) if n_edges else np.zeros(0, bool)

    edge_index = -np.ones((n_nodes, n_nodes), dtype=np.int64)
    if n_edges:
        edge_index[edges[:, 0], edges[:, 1]] = np.arange(n_edges)
    next_hop = -np.ones((n_nodes, n_nodes), dtype=np.int64)
    if n_edges and keep.any():
        travel = edge_length[keep] / edge_free_speed[keep]
        G = csr_matrix((travel, (edges[keep, 0], edges[keep, 1])), shape=(n_nodes, n_nodes))
        _, pred = shortest_path(G, directed=True, return_predecessors=True)
        # pred[s, t] is the node before t on the path from s; walk back to get
        # the first hop out of s.
        for s in range(n_nodes):
            for t in range(n_nodes):
                if s == t or pred[s, t] < 0:
                    continue
                v = t
                while pred[s, v] != s:
                    v = pred[s, v]
                next_hop[s, t] = v

    width = (cols - 1) * cfg.edge_length_m
    height = (rows - 1) * cfg.edge_length_m
    R = int(cfg.rsus)
    F = int(cfg.fog_nodes)
    rsu_xy = _spread_points(R, width, height)
    fog_xy = _spread_points(F, width, height) if F else np.zeros((0, 2))
    if R and F:
        d = np.linalg.norm(rsu_xy[:, None, :] - fog_xy[None, :, :], axis=2)
        rsu_fog = np.argmin(d, axis=1)
        backhaul = 1e-3 + 0.5e-6 * d.T
    else:
        rsu_fog = np.zeros(R, dtype=np.int64)
        backhaul = np.zeros((F, R))
    n_out = int(round(cfg.rsu_outage_frac * R))
    rsu_up = np.ones(R, dtype=bool)
    if n_out:
        rsu_up[rng.choice(R, size=n_out, replace=False)] = False
    rsu_nr = np.zeros(R, dtype=bool)
    n_nr = int(round(cfg.nr_fraction * R))
    if n_nr:
        rsu_nr[rng.choice(R, size=n_nr, replace=False)] = True
    if F:
        spread = np.linspace(1.3, 0.7, F) if F > 1 else np.ones(1)
        fog_capacity = cfg.fog_service_pps * cfg.fog_cpu_frac * spread / spread.mean()
        # Context memory as the largest share of the fleet a fog can hold; the
        # biggest CPU is paired with a comparatively small memory.
        headroom = np.full(F, 1.4)
        headroom[0] = 0.9
        fog_memory = np.minimum(headroom * spread / spread.sum(), 1.0) if F > 1 else np.ones(1)
    else:
        fog_capacity = np.zeros(0)
        fog_memory = np.zeros(0)
    vehicle_origin = rng.integers(0, n_nodes, int(cfg.vehicles)) if n_nodes else np.zeros(0, np.int64)
    return World(
        node_xy=node_xy,
        edges=edges,
        edge_capacity=edge_capacity,
        edge_free_speed=edge_free_speed,
        edge_length=edge_length,
        next_hop=next_hop,
        edge_index=edge_index,
        rsu_xy=rsu_xy,
        rsu_up=rsu_up,
        rsu_fog=rsu_fog,
        rsu_nr=rsu_nr,
        fog_xy=fog_xy,
        fog_capacity=fog_capacity,
        fog_memory=fog_memory,
        backhaul_s=backhaul,
        vehicle_origin=vehicle_origin,
    )
