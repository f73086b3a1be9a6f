"""Graph-transformer layout predictor.

Stacked edge-conditioned attention over graph neighborhoods: each node
attends the nodes it shares an edge with (either direction, one attention
slot per directed edge), and per head the pre-softmax score vector is the
elementwise product of query, key, and a projected edge feature, summed over
the head width. Those same pre-softmax vectors update the edge features.
Nodes with no incident edge attend themselves so no softmax is ever empty.
Two MLP heads read the final node states: a sigmoid box head and a class
logit head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import SceneGraph
from .layout import Layout, sanitize_boxes
from .tensor import Tensor


@dataclass(frozen=True)
class SgtConfig:
    num_layers: int = 3
    num_heads: int = 4
    embed_dim: int = 64
    edge_dim: int = 32
    lap_pe_width: int = 8
    n_obj_types: int = 12
    n_pred_types: int = 6
    use_edges: bool = True       # "+E" ablation switch
    use_lap_pe: bool = True      # "+LapPE" ablation switch

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


# slot kinds: 0 = this node is the edge's subject, 1 = it is the object,
# 2 = self slot (only for nodes with no incident edge)
SLOT_FWD, SLOT_BWD, SLOT_SELF = 0, 1, 2


def attention_slots(g: SceneGraph) -> list[list[tuple[int, int, int]]]:
    """Per node: (key node, edge index, kind) attention slots.

    The number of score evaluations per layer is the total slot count,
    which is 2 * n_edges plus one per edgeless node - linear in edges,
    never quadratic in nodes.
    """
    slots: list[list[tuple[int, int, int]]] = [[] for _ in g.nodes]
    for m, (s, d, _) in enumerate(g.edges):
        slots[s].append((d, m, SLOT_FWD))
        slots[d].append((s, m, SLOT_BWD))
    for i, lst in enumerate(slots):
        if not lst:
            lst.append((i, -1, SLOT_SELF))
    return slots


def init_sgt_params(cfg: SgtConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, de = cfg.embed_dim, cfg.edge_dim
    p: dict[str, Tensor] = {}
    p["node_emb"] = T.normal(rng, (cfg.n_obj_types, d), std=0.05)
    p["pe_proj"] = T.normal(rng, (cfg.lap_pe_width, d), std=0.1)
    p["pred_emb"] = T.normal(rng, (cfg.n_pred_types, de), std=0.5)
    for i in range(cfg.num_layers):
        pre = f"l{i}."
        for name in ("w_q", "w_k", "w_v", "w_oh"):
            p[pre + name] = T.normal(rng, (d, d), std=0.02 * math.sqrt(64 / d))
        p[pre + "b_oh"] = T.zeros((d,), requires_grad=True)
        p[pre + "gate"] = T.normal(rng, (de, d), std=1.0 / math.sqrt(de))
        p[pre + "dir"] = T.normal(rng, (2, de), std=0.5)
        p[pre + "w_oe"] = T.normal(rng, (d, de), std=0.02)
        p[pre + "b_oe"] = T.zeros((de,), requires_grad=True)
        p[pre + "w1"] = T.normal(rng, (d, 4 * d), std=0.02)
        p[pre + "b1"] = T.zeros((4 * d,), requires_grad=True)
        p[pre + "w2"] = T.normal(rng, (4 * d, d), std=0.02)
        p[pre + "b2"] = T.zeros((d,), requires_grad=True)
        for g_, b_ in (("ln1g", "ln1b"), ("ln2g", "ln2b")):
            p[pre + g_] = T.ones((d,), requires_grad=True)
            p[pre + b_] = T.zeros((d,), requires_grad=True)
        p[pre + "lneg"] = T.ones((de,), requires_grad=True)
        p[pre + "lneb"] = T.zeros((de,), requires_grad=True)
    for head, width in (("box", 4), ("label", cfg.n_obj_types)):
        p[head + ".w1"] = T.normal(rng, (d, d), std=0.05)
        p[head + ".b1"] = T.zeros((d,), requires_grad=True)
        p[head + ".w2"] = T.normal(rng, (d, width), std=0.05)
        p[head + ".b2"] = T.zeros((width,), requires_grad=True)
    return p


def edge_attention_layer(
    h: Tensor,
    e: Tensor,
    g: SceneGraph,
    params: dict[str, Tensor],
    cfg: SgtConfig,
    prefix: str,
) -> tuple[Tensor, Tensor]:
    """One block: neighborhood attention + MLP on nodes, score-driven update
    on edges. Returns the new node and edge states."""
    n = g.n_nodes
    nh, dk, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim
    slots = attention_slots(g)
    smax = max(len(s) for s in slots)
    key_idx = np.zeros((n, smax), dtype=np.int64)
    gate_idx = np.zeros((n, smax), dtype=np.int64)
    invalid = np.ones((n, smax, 1), dtype=bool)
    m = len(g.edges)
    for i, lst in enumerate(slots):
        for s_, (j, em, kind) in enumerate(lst):
            key_idx[i, s_] = j
            gate_idx[i, s_] = 2 * m if kind == SLOT_SELF else em + kind * m
            invalid[i, s_, 0] = False

    q = T.matmul(h, params[prefix + "w_q"])
    k = T.matmul(h, params[prefix + "w_k"])
    v = T.matmul(h, params[prefix + "w_v"])

    gates = None
    if cfg.use_edges and m > 0:
        dir_emb = params[prefix + "dir"]
        fwd = T.matmul(e + T.take_rows(dir_emb, [0]), params[prefix + "gate"])
        bwd = T.matmul(e + T.take_rows(dir_emb, [1]), params[prefix + "gate"])
        gates = T.concat([fwd, bwd, T.ones((1, d))], axis=0)

    q_s = q.reshape(n, 1, nh, dk)
    k_s = T.take_rows(k, key_idx).reshape(n, smax, nh, dk)
    scores = q_s * k_s
    if gates is not None:
        scores = scores * T.take_rows(gates, gate_idx).reshape(n, smax, nh, dk)
    scores = scores * (1.0 / math.sqrt(dk))
    logits = scores.sum(axis=3)                       # (n, smax, nh)
    logits = T.masked_fill(logits, invalid, -1e9)
    alpha = T.softmax(logits, axis=1)
    v_s = T.take_rows(v, key_idx).reshape(n, smax, nh, dk)
    ctx = (alpha.reshape(n, smax, nh, 1) * v_s).sum(axis=1)
    attn = T.matmul(ctx.reshape(n, d), params[prefix + "w_oh"]) + params[prefix + "b_oh"]
    h = T.layer_norm(h + attn, params[prefix + "ln1g"], params[prefix + "ln1b"])
    mid = T.gelu(T.matmul(h, params[prefix + "w1"]) + params[prefix + "b1"])
    h = T.layer_norm(h + T.matmul(mid, params[prefix + "w2"]) + params[prefix + "b2"],
                     params[prefix + "ln2g"], params[prefix + "ln2b"])

    if cfg.use_edges and m > 0:
        src = np.array([s for s, _, _ in g.edges], dtype=np.int64)
        dst = np.array([d_ for _, d_, _ in g.edges], dtype=np.int64)
        fwd_gate = T.take_rows(gates, np.arange(m))
        escore = T.take_rows(q, src) * T.take_rows(k, dst) * fwd_gate * (1.0 / math.sqrt(dk))
        eproj = T.matmul(escore, params[prefix + "w_oe"]) + params[prefix + "b_oe"]
        e = T.layer_norm(e + eproj, params[prefix + "lneg"], params[prefix + "lneb"])
    return h, e


def sgt_encode(g: SceneGraph, pe: np.ndarray, params: dict[str, Tensor], cfg: SgtConfig) -> Tensor:
    """Embed nodes (+ projected positional encoding) and run the stack;
    returns the final node states (N, embed_dim)."""
    for c in g.nodes:
        if c >= cfg.n_obj_types:
            raise ValueError(f"node category {c} >= configured {cfg.n_obj_types}")
    if pe.shape != (g.n_nodes, cfg.lap_pe_width):
        raise ValueError(f"positional encoding shape {pe.shape} != ({g.n_nodes}, {cfg.lap_pe_width})")
    h = T.embedding(params["node_emb"], list(g.nodes))
    if cfg.use_lap_pe:
        h = h + T.matmul(Tensor(pe), params["pe_proj"])
    e = T.embedding(params["pred_emb"], [p for _, _, p in g.edges]) if g.edges else T.zeros((0, cfg.edge_dim))
    for i in range(cfg.num_layers):
        h, e = edge_attention_layer(h, e, g, params, cfg, f"l{i}.")
    return h


def sgt_forward(
    g: SceneGraph, pe: np.ndarray, params: dict[str, Tensor], cfg: SgtConfig
) -> tuple[Tensor, Tensor]:
    """Predict (boxes in [0,1], class logits) for every node."""
    h = sgt_encode(g, pe, params, cfg)
    bmid = T.gelu(T.matmul(h, params["box.w1"]) + params["box.b1"])
    boxes = T.sigmoid(T.matmul(bmid, params["box.w2"]) + params["box.b2"])
    lmid = T.gelu(T.matmul(h, params["label.w1"]) + params["label.b1"])
    logits = T.matmul(lmid, params["label.w2"]) + params["label.b2"]
    return boxes, logits


def predict_layout(g: SceneGraph, pe: np.ndarray, params: dict[str, Tensor], cfg: SgtConfig) -> Layout:
    """Inference-time layout: predicted boxes (clamped, corners ordered) with
    the graph's own category ids."""
    with T.no_grad():
        boxes, _ = sgt_forward(g, pe, params, cfg)
    return Layout(g.nodes, sanitize_boxes(boxes.data))


# ---------------------------------------------------------------------------
# losses


def diou_loss(box_a, box_b) -> float:
    """Distance-IoU loss between two corner-form boxes.

    1 - IoU + (center distance)^2 / (enclosing-box diagonal)^2, in [0, 2).
    Degenerate inputs are allowed; two identical point boxes return 0.
    """
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    ex1, ey1 = min(ax1, bx1), min(ay1, by1)
    ex2, ey2 = max(ax2, bx2), max(ay2, by2)
    c2 = (ex2 - ex1) ** 2 + (ey2 - ey1) ** 2
    if c2 == 0.0:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    iou = inter / union if union > 0.0 else 0.0
    # centers first: keeps the value exactly symmetric in (a, b)
    rho2 = ((ax1 + ax2) / 2.0 - (bx1 + bx2) / 2.0) ** 2 + ((ay1 + ay2) / 2.0 - (by1 + by2) / 2.0) ** 2
    return 1.0 - iou + rho2 / c2


def _col(t: Tensor, j: int, n: int) -> Tensor:
    return T.take_rows(t.transpose(1, 0), [j]).reshape(n)


def diou_terms(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable per-node DIoU loss vector (pred (N,4) vs constant gt)."""
    n = pred.shape[0]
    px1, py1, px2, py2 = (_col(pred, j, n) for j in range(4))
    g = np.asarray(gt, dtype=np.float32)
    gx1, gy1, gx2, gy2 = (Tensor(g[:, j]) for j in range(4))
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / (union + 1e-9)
    rho2 = ((px1 + px2) * 0.5 - (gx1 + gx2) * 0.5) ** 2 + ((py1 + py2) * 0.5 - (gy1 + gy2) * 0.5) ** 2
    ex = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ey = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = ex * ex + ey * ey
    return 1.0 - iou + rho2 / (c2 + 1e-9)


def layout_loss(
    pred_boxes: Tensor, pred_logits: Tensor, gt: Layout
) -> tuple[Tensor, dict[str, float]]:
    """Box squared-error + label cross-entropy + DIoU, each averaged over
    nodes, summed with unit weights."""
    if pred_boxes.shape[0] != gt.n_objects:
        raise ValueError(f"prediction covers {pred_boxes.shape[0]} nodes, layout has {gt.n_objects}")
    l_box = ((pred_boxes - Tensor(gt.boxes)) ** 2).mean()
    l_label = T.cross_entropy(pred_logits, np.array(gt.classes, dtype=np.int64))
    l_iou = diou_terms(pred_boxes, gt.boxes).mean()
    total = l_box + l_label + l_iou
    parts = {"box": l_box.item(), "label": l_label.item(), "iou": l_iou.item()}
    return total, parts
