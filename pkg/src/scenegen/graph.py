"""Scene graphs, the normalized graph Laplacian, and spectral node encodings.

A scene graph is a directed multigraph: nodes carry object category ids,
edges carry predicate ids. For spectral purposes edges are symmetrized into
a binary adjacency (direction still matters to the attention encoder, which
reads the edge list itself). All functions here are pure and safe to call
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ZERO_EIG_TOL = 1e-8


@dataclass(frozen=True)
class SceneGraph:
    """Object category ids plus directed, predicate-labeled edges."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...]
    n_obj_types: int
    n_pred_types: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(c) for c in self.nodes))
        object.__setattr__(self, "edges", tuple((int(s), int(d), int(p)) for s, d, p in self.edges))
        if len(self.nodes) < 1:
            raise ValueError("scene graph needs at least one node")
        for c in self.nodes:
            if not 0 <= c < self.n_obj_types:
                raise ValueError(f"node category {c} outside [0, {self.n_obj_types})")
        n = len(self.nodes)
        for s, d, p in self.edges:
            if not (0 <= s < n and 0 <= d < n):
                raise ValueError(f"edge ({s},{d}) references a missing node")
            if s == d:
                raise ValueError(f"self-loop on node {s}")
            if not 0 <= p < self.n_pred_types:
                raise ValueError(f"predicate {p} outside [0, {self.n_pred_types})")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def normalized_laplacian(g: SceneGraph) -> np.ndarray:
    """Symmetrically normalized Laplacian I - D^{-1/2} A D^{-1/2} (float64).

    Edges are treated as undirected and binary (parallel edges count once).
    Degree-0 nodes keep an identity row, i.e. D^{-1/2} is taken as 0 there;
    the result is exactly symmetric by construction.
    """
    n = g.n_nodes
    adj = np.zeros((n, n), dtype=np.float64)
    for s, d, _ in g.edges:
        adj[s, d] = 1.0
        adj[d, s] = 1.0
    deg = adj.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
    lap = -(dinv[:, None] * adj * dinv[None, :])
    np.fill_diagonal(lap, 1.0)
    return lap


def symmetric_eig(m: np.ndarray, sym_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues ascending and the matching orthonormal eigenvectors
    as columns, each sign-canonicalized so its first nonzero entry is
    positive. Raises on asymmetry beyond ``sym_tol``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    if np.abs(m - m.T).max() > sym_tol:
        raise ValueError(f"matrix is not symmetric within {sym_tol}")
    n = m.shape[0]
    a = 0.5 * (m + m.T)
    v = np.eye(n)
    if n > 1:
        scale = max(np.abs(a).max(), 1e-300)
        stop = 1e-15 * scale
        for _ in range(64):
            off = 0.0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) <= stop:
                        continue
                    off = max(off, abs(apq))
                    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    rot_p = c * a[:, p] - s * a[:, q]
                    rot_q = s * a[:, p] + c * a[:, q]
                    a[:, p], a[:, q] = rot_p, rot_q
                    rot_p = c * a[p, :] - s * a[q, :]
                    rot_q = s * a[p, :] + c * a[q, :]
                    a[p, :], a[q, :] = rot_p, rot_q
                    rot_p = c * v[:, p] - s * v[:, q]
                    rot_q = s * v[:, p] + c * v[:, q]
                    v[:, p], v[:, q] = rot_p, rot_q
            if off <= stop:
                break
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    for k in range(n):
        col = vecs[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            vecs[:, k] = -col
    return vals, vecs


def lap_pe(g: SceneGraph, width: int) -> np.ndarray:
    """Laplacian positional encoding: the ``width`` smallest non-trivial
    eigenvectors of the normalized Laplacian, zero-padded on the right.

    Non-trivial means eigenvalue > 1e-8, which on disconnected graphs drops
    every zero-eigenvalue vector (they only encode component membership in
    an arbitrary basis). Columns come out sign-canonicalized; apply
    ``sign_flip`` for the training-time augmentation.
    """
    if width < 1:
        raise ValueError("encoding width must be >= 1")
    vals, vecs = symmetric_eig(normalized_laplacian(g))
    keep = np.nonzero(vals > ZERO_EIG_TOL)[0][:width]
    pe = np.zeros((g.n_nodes, width), dtype=np.float32)
    pe[:, : keep.size] = vecs[:, keep].astype(np.float32)
    return pe


def sign_flip(pe: np.ndarray, rng: int | np.random.Generator) -> np.ndarray:
    """Multiply each encoding column by an independent random sign.

    Training-time augmentation only; deterministic for a fixed seed, and
    absolute values are preserved exactly.
    """
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    signs = gen.choice(np.array([-1.0, 1.0], dtype=np.float32), size=pe.shape[1])
    return pe * signs[None, :]


# ---------------------------------------------------------------------------
# scene-graph text format: one JSON document per scene with "objects"
# (category names or ids) and "relationships" ([subject, predicate, object]
# triples, predicates as names or ids). An optional "boxes" field carries a
# ground-truth layout for tooling that wants to bypass layout prediction.


class SceneGraphFormatError(ValueError):
    pass


def parse_scene_graph(
    text: str,
    obj_names: list[str],
    pred_names: list[str],
    source: str = "<string>",
) -> tuple[SceneGraph, np.ndarray | None]:
    """Parse the scene-graph text format; returns the graph and optional
    ground-truth boxes. Errors carry the source name and line number."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneGraphFormatError(f"{source}:{e.lineno}: invalid scene graph document: {e.msg}") from None
    if not isinstance(doc, dict) or "objects" not in doc or "relationships" not in doc:
        raise SceneGraphFormatError(f"{source}:1: expected fields 'objects' and 'relationships'")
    obj_index = {name: i for i, name in enumerate(obj_names)}
    pred_index = {name: i for i, name in enumerate(pred_names)}

    def resolve(entry, table, kind, limit):
        if isinstance(entry, str):
            if entry not in table:
                raise SceneGraphFormatError(f"{source}:1: unknown {kind} {entry!r}")
            return table[entry]
        if isinstance(entry, int) and 0 <= entry < limit:
            return entry
        raise SceneGraphFormatError(f"{source}:1: bad {kind} entry {entry!r}")

    nodes = [resolve(o, obj_index, "object", len(obj_names)) for o in doc["objects"]]
    edges = []
    for rel in doc["relationships"]:
        if not isinstance(rel, (list, tuple)) or len(rel) != 3:
            raise SceneGraphFormatError(f"{source}:1: relationship must be [subject, predicate, object], got {rel!r}")
        s, p, d = rel
        edges.append((int(s), int(d), resolve(p, pred_index, "predicate", len(pred_names))))
    try:
        graph = SceneGraph(tuple(nodes), tuple(edges), len(obj_names), len(pred_names))
    except ValueError as e:
        raise SceneGraphFormatError(f"{source}:1: {e}") from None
    boxes = None
    if "boxes" in doc:
        boxes = np.asarray(doc["boxes"], dtype=np.float32)
        if boxes.shape != (graph.n_nodes, 4):
            raise SceneGraphFormatError(f"{source}:1: boxes must be {graph.n_nodes}x4")
    return graph, boxes


def scene_graph_to_json(
    g: SceneGraph,
    obj_names: list[str],
    pred_names: list[str],
    boxes: np.ndarray | None = None,
) -> str:
    doc = {
        "objects": [obj_names[c] for c in g.nodes],
        "relationships": [[s, pred_names[p], d] for s, d, p in g.edges],
    }
    if boxes is not None:
        doc["boxes"] = [[round(float(x), 6) for x in row] for row in boxes]
    return json.dumps(doc, indent=1)
