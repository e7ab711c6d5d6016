"""Fixed node layout on the unit sphere and the k-NN graph built over it.

The lighting model keeps N lobe axes frozen at evenly distributed positions
with one shared sharpness, so everything here is deterministic geometry:
golden-angle placement, the shared-bandwidth formula, and the symmetrically
normalized adjacency consumed by the graph network.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def place_nodes(n):
    """Place ``n`` near-uniform unit axes via a golden-angle spiral.

    Latitude is stratified at band midpoints along +Y (the panorama's up
    axis); azimuth advances by the golden angle. Deterministic in ``n``.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * GOLDEN_ANGLE
    axes = np.stack([np.cos(phi) * r, y, np.sin(phi) * r], axis=1)
    return axes


def bandwidth(n):
    """Shared lobe sharpness: neighboring lobes cross at 0.6 of peak.

    Solves exp(lam * (cos(arctan(2/sqrt(n))) - 1)) = 0.6 for lam.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    return math.log(0.6) / (math.cos(math.atan(2.0 / math.sqrt(n))) - 1.0)


@dataclass(frozen=True)
class NodeLayout:
    """N fixed unit axes sharing one sharpness value."""

    n: int
    axes: np.ndarray  # (n, 3) unit vectors
    sharpness: float = field(init=False)

    def __post_init__(self):
        axes = np.array(self.axes, dtype=np.float64, order="C")
        if axes.shape != (self.n, 3):
            raise ValueError(f"axes shape {axes.shape} does not match n={self.n}")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("axes must be unit vectors")
        dots = axes @ axes.T
        np.fill_diagonal(dots, -2.0)
        if dots.max() >= 1.0 - 1e-12:
            raise ValueError("axes must be pairwise distinct")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "sharpness", bandwidth(self.n))
        self.axes.setflags(write=False)


def build_layout(n):
    """Standard layout: golden-angle axes plus the shared bandwidth."""
    return NodeLayout(n=n, axes=place_nodes(n))


def directed_knn(axes, k):
    """Directed k-NN adjacency by angular distance, self excluded.

    Row i marks the k nearest axes to axis i; exact distance ties resolve
    to the lower index (stable sort on descending dot product).
    """
    n = axes.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    dots = axes @ axes.T
    np.fill_diagonal(dots, -np.inf)
    order = np.argsort(-dots, axis=1, kind="stable")
    adj = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), k)
    adj[rows, order[:, :k].ravel()] = 1
    return adj


def normalize_adjacency(adj):
    """Symmetric renormalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[0]
    if adj.shape != (n, n) or not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be square and symmetric")
    if np.any(np.diag(adj) != 0):
        raise ValueError("adjacency diagonal must be zero")
    hat = adj + np.eye(n)
    inv_sqrt_deg = 1.0 / np.sqrt(hat.sum(axis=1))
    return hat * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


@dataclass(frozen=True)
class GraphSpec:
    """Layout plus its symmetrized k-NN adjacency and normalized operator."""

    layout: NodeLayout
    k: int
    adjacency: np.ndarray   # (n, n) binary, symmetric, zero diagonal
    normalized: np.ndarray  # (n, n) real symmetric, spectral radius <= 1


def knn_adjacency(layout, k):
    """Build the graph over ``layout``: directed k-NN, symmetrized, normalized."""
    directed = directed_knn(layout.axes, k)
    sym = np.maximum(directed, directed.T)
    return GraphSpec(layout=layout, k=k, adjacency=sym,
                     normalized=normalize_adjacency(sym))


def layout_to_json(layout):
    """Layout export consumed by the lighting model and the predictor."""
    return {
        "n": layout.n,
        "lambda": layout.sharpness,
        "nodes": [{"index": i, "axis": [float(c) for c in axis]}
                  for i, axis in enumerate(layout.axes)],
    }


def layout_from_json(obj):
    n = int(obj["n"])
    axes = np.zeros((n, 3))
    for node in obj["nodes"]:
        axes[int(node["index"])] = node["axis"]
    layout = NodeLayout(n=n, axes=axes)
    lam = float(obj["lambda"])
    if not math.isclose(layout.sharpness, lam, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(f"lambda {lam} does not match bandwidth({n})")
    return layout


def graph_spec_hash(graph):
    """Stable digest of the graph geometry; guards checkpoint/layout mismatch."""
    h = hashlib.sha256()
    h.update(f"n={graph.layout.n};k={graph.k};".encode())
    h.update(graph.layout.axes.tobytes())
    h.update(np.asarray(graph.adjacency, dtype=np.int64).tobytes())
    return h.hexdigest()
