import dataclasses
import math

import numpy as np
import pytest

from scenegen import tensor as T
from scenegen.gradcheck import grad_check
from scenegen.graph import SceneGraph, lap_pe
from scenegen.layout import Layout
from scenegen.sgt import (
    SgtConfig,
    attention_slots,
    diou_loss,
    diou_terms,
    edge_attention_layer,
    init_sgt_params,
    layout_loss,
    sgt_forward,
)
from scenegen.tensor import Tensor, backward

CFG = SgtConfig(num_layers=2, num_heads=2, embed_dim=16, edge_dim=8, lap_pe_width=4, n_obj_types=7)


def rand_boxes(rng, n=1):
    xs = np.sort(rng.uniform(0, 1, size=(n, 2)), axis=1)
    ys = np.sort(rng.uniform(0, 1, size=(n, 2)), axis=1)
    out = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)
    return out[0] if n == 1 else out


def make_graph(nodes, edges, n_obj=7):
    return SceneGraph(tuple(nodes), tuple(edges), n_obj, 6)


def random_simple_graph(rng, max_nodes=8):
    # at most one edge per unordered pair, so a dense N x N mask is exact
    n = int(rng.integers(2, max_nodes + 1))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                s, d = (i, j) if rng.random() < 0.5 else (j, i)
                edges.append((s, d, int(rng.integers(0, 6))))
    nodes = [int(c) for c in rng.integers(0, 7, size=n)]
    return make_graph(nodes, edges)


def dense_masked_oracle(h, e, g, params, cfg, prefix="l0."):
    """Dense full-attention layer with non-neighbor logits forced to -1e9.

    Same score formula and ops, but computed over the full N x N grid with
    masking instead of per-neighborhood slot gathering.
    """
    n = g.n_nodes
    nh, dk, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim
    q = T.matmul(h, params[prefix + "w_q"]).reshape(n, 1, nh, dk)
    k = T.matmul(h, params[prefix + "w_k"])
    v = T.matmul(h, params[prefix + "w_v"])
    dir_emb = params[prefix + "dir"]
    gate_f = T.matmul(e + T.take_rows(dir_emb, [0]), params[prefix + "gate"]) if g.edges else None
    gate_b = T.matmul(e + T.take_rows(dir_emb, [1]), params[prefix + "gate"]) if g.edges else None

    gate_grid = np.ones((n, n, d), dtype=np.float32)
    allowed = np.zeros((n, n), dtype=bool)
    for m, (s, dd, _) in enumerate(g.edges):
        allowed[s, dd] = allowed[dd, s] = True
        gate_grid[s, dd] = gate_f.data[m]
        gate_grid[dd, s] = gate_b.data[m]
    for i in range(n):
        if not allowed[i].any():
            allowed[i, i] = True

    k_grid = k.reshape(1, n, nh, dk)
    scores = q * k_grid * Tensor(gate_grid.reshape(n, n, nh, dk)) * (1.0 / math.sqrt(dk))
    logits = T.masked_fill(scores.sum(axis=3), ~allowed[:, :, None], -1e9)
    alpha = T.softmax(logits, axis=1)
    ctx = (alpha.reshape(n, n, nh, 1) * v.reshape(1, n, nh, dk)).sum(axis=1)
    attn = T.matmul(ctx.reshape(n, d), params[prefix + "w_oh"]) + params[prefix + "b_oh"]
    hh = T.layer_norm(h + attn, params[prefix + "ln1g"], params[prefix + "ln1b"])
    mid = T.gelu(T.matmul(hh, params[prefix + "w1"]) + params[prefix + "b1"])
    hh = T.layer_norm(hh + T.matmul(mid, params[prefix + "w2"]) + params[prefix + "b2"],
                      params[prefix + "ln2g"], params[prefix + "ln2b"])
    return hh, alpha


def embed_inputs(g, cfg, params, rng):
    h = Tensor(rng.normal(0, 0.5, size=(g.n_nodes, cfg.embed_dim)).astype(np.float32))
    e = Tensor(rng.normal(0, 0.5, size=(len(g.edges), cfg.edge_dim)).astype(np.float32))
    return h, e


def test_singleton_node_attends_itself_with_weight_one():
    g = make_graph([0], [])
    rng = np.random.default_rng(0)
    params = init_sgt_params(CFG, rng)
    h, e = embed_inputs(g, CFG, params, rng)
    # a node whose neighborhood is just one slot puts weight 1 on it per head
    n, nh, dk = 1, CFG.num_heads, CFG.head_dim
    q = T.matmul(h, params["l0.w_q"]).data.reshape(n, nh, dk)
    logits = Tensor((q * T.matmul(h, params["l0.w_k"]).data.reshape(n, nh, dk)).sum(-1))
    alpha = T.softmax(logits.reshape(1, 1, nh), axis=1)
    assert np.array_equal(alpha.data, np.ones((1, 1, nh), dtype=np.float32))
    out, _ = edge_attention_layer(h, e, g, params, CFG, "l0.")
    assert out.shape == (1, CFG.embed_dim)


def test_two_identical_slots_split_weight_evenly():
    # node 0 sees nodes 1 and 2 through identical keys and edge features
    g = make_graph([0, 1, 1], [(0, 1, 2), (0, 2, 2)])
    rng = np.random.default_rng(1)
    params = init_sgt_params(CFG, rng)
    h = rng.normal(0, 0.5, size=(3, CFG.embed_dim)).astype(np.float32)
    h[2] = h[1]
    e = rng.normal(0, 0.5, size=(2, CFG.edge_dim)).astype(np.float32)
    e[1] = e[0]
    ht, et = Tensor(h), Tensor(e)
    _, alpha = dense_oracle_weights(ht, et, g, params, CFG)
    assert np.allclose(alpha[0, 1], alpha[0, 2])
    assert np.allclose(alpha[0, 1] + alpha[0, 2], 1.0, atol=1e-6)


def dense_oracle_weights(h, e, g, params, cfg):
    out, alpha = dense_masked_oracle(h, e, g, params, cfg)
    return out, alpha.data.transpose(2, 0, 1).mean(axis=0)


def test_layer_matches_dense_masked_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        g = random_simple_graph(rng)
        params = init_sgt_params(CFG, rng)
        h, e = embed_inputs(g, CFG, params, rng)
        got_h, _ = edge_attention_layer(h, e, g, params, CFG, "l0.")
        want_h, _ = dense_masked_oracle(h, e, g, params, CFG)
        assert np.abs(got_h.data - want_h.data).max() < 1e-6


def test_sgt_forward_boxes_in_unit_square():
    rng = np.random.default_rng(3)
    params = init_sgt_params(CFG, rng)
    for name in params:
        params[name].data *= 3.0  # exaggerate weights; sigmoid still bounds
    g = random_simple_graph(rng)
    boxes, logits = sgt_forward(g, lap_pe(g, CFG.lap_pe_width), params, CFG)
    assert boxes.data.min() >= 0.0 and boxes.data.max() <= 1.0
    assert logits.shape == (g.n_nodes, CFG.n_obj_types)


def test_sgt_forward_permutation_equivariant():
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = random_simple_graph(rng, max_nodes=6)
        params = init_sgt_params(CFG, rng)
        pe = lap_pe(g, CFG.lap_pe_width)
        boxes, logits = sgt_forward(g, pe, params, CFG)
        perm = rng.permutation(g.n_nodes)
        inv = np.argsort(perm)
        pg = SceneGraph(
            tuple(g.nodes[i] for i in inv),
            tuple((int(perm[s]), int(perm[d]), p) for s, d, p in g.edges),
            g.n_obj_types,
            g.n_pred_types,
        )
        pboxes, plogits = sgt_forward(pg, pe[inv], params, CFG)
        assert np.abs(pboxes.data - boxes.data[inv]).max() < 1e-5
        assert np.abs(plogits.data - logits.data[inv]).max() < 1e-5


def test_zero_pe_equals_no_pe_ablation():
    rng = np.random.default_rng(5)
    g = random_simple_graph(rng)
    params = init_sgt_params(CFG, rng)
    zero_pe = np.zeros((g.n_nodes, CFG.lap_pe_width), dtype=np.float32)
    a = sgt_forward(g, zero_pe, params, CFG)
    b = sgt_forward(g, zero_pe, params, dataclasses.replace(CFG, use_lap_pe=False))
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_attention_cost_is_linear_on_star_graph():
    # star with n leaves: sum of neighborhood sizes is 2n, not (n+1)^2
    n = 20
    g = make_graph([0] * (n + 1), [(0, i, 0) for i in range(1, n + 1)])
    slots = attention_slots(g)
    assert sum(len(s) for s in slots) == 2 * n


def test_layer_gradcheck_small():
    cfg = SgtConfig(num_layers=1, num_heads=2, embed_dim=8, edge_dim=4, lap_pe_width=2, n_obj_types=4)
    g = make_graph([0, 1, 2], [(0, 1, 1), (2, 1, 4)], n_obj=4)
    rng = np.random.default_rng(6)
    params = init_sgt_params(cfg, rng)
    h, e = embed_inputs(g, cfg, params, rng)

    def fn(hh, ee):
        oh, oe = edge_attention_layer(hh, ee, g, params, cfg, "l0.")
        return oh.mean() + oe.mean()

    assert grad_check(fn, [h, e]) < 1e-3


# --- DIoU -------------------------------------------------------------------


def test_diou_identity_zero():
    assert abs(diou_loss((0.1, 0.2, 0.7, 0.9), (0.1, 0.2, 0.7, 0.9))) < 1e-7


def test_diou_worked_pair():
    # independent direct evaluation: IoU 1/7, centers sqrt(2) apart,
    # enclosing diagonal^2 = 18 -> 1 - 1/7 + 2/18
    want = 1.0 - 1.0 / 7.0 + 2.0 / 18.0
    got = diou_loss((0, 0, 2, 2), (1, 1, 3, 3))
    assert abs(got - want) < 1e-4
    assert abs(got - 0.9683) < 1e-3


def test_diou_symmetry_exact_and_disjoint_exceeds_one():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b = rand_boxes(rng), rand_boxes(rng)
        assert diou_loss(a, b) == diou_loss(b, a)
        assert 0.0 <= diou_loss(a, b) < 2.0
    assert diou_loss((0, 0, 0.1, 0.1), (0.8, 0.8, 0.9, 0.9)) > 1.0
    # both boxes the same single point: defined as 0
    assert diou_loss((0.3, 0.3, 0.3, 0.3), (0.3, 0.3, 0.3, 0.3)) == 0.0


def test_diou_matches_shapely_oracle():
    from shapely.geometry import box as shapely_box

    rng = np.random.default_rng(8)
    for _ in range(100):
        a, b = rand_boxes(rng), rand_boxes(rng)
        pa, pb = shapely_box(a[0], a[1], a[2], a[3]), shapely_box(b[0], b[1], b[2], b[3])
        iou = pa.intersection(pb).area / pa.union(pb).area
        ca, cb = np.array(pa.centroid.coords[0]), np.array(pb.centroid.coords[0])
        ex1, ey1 = min(a[0], b[0]), min(a[1], b[1])
        ex2, ey2 = max(a[2], b[2]), max(a[3], b[3])
        want = 1 - iou + ((ca - cb) ** 2).sum() / ((ex2 - ex1) ** 2 + (ey2 - ey1) ** 2)
        assert abs(diou_loss(a, b) - want) < 1e-9


def test_diou_tensor_matches_scalar():
    rng = np.random.default_rng(9)
    pred = rand_boxes(rng, 6)
    gt = rand_boxes(rng, 6)
    vec = diou_terms(Tensor(pred.astype(np.float32)), gt).data
    for i in range(6):
        assert abs(vec[i] - diou_loss(pred[i], gt[i])) < 1e-5


# --- layout loss -------------------------------------------------------------


def test_layout_loss_perfect_prediction():
    gt = Layout((0, 2), np.array([[0.1, 0.1, 0.5, 0.6], [0.2, 0.3, 0.9, 0.8]]))
    logits = np.full((2, 7), -20.0, dtype=np.float32)
    logits[0, 0] = 20.0
    logits[1, 2] = 20.0
    loss, parts = layout_loss(Tensor(gt.boxes), Tensor(logits), gt)
    assert parts["box"] == 0.0
    assert parts["iou"] == 0.0
    assert parts["label"] <= 1e-3
    assert loss.item() <= 1e-3


def test_layout_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    gt = Layout((1, 3, 0), rand_boxes(rng, 3))
    pred = Tensor(rand_boxes(rng, 3).astype(np.float32))
    logits = Tensor(rng.normal(size=(3, 7)).astype(np.float32))

    def fn(p, lg):
        return layout_loss(p, lg, gt)[0]

    assert grad_check(fn, [pred, logits]) < 1e-3


def test_layout_loss_permutation_invariant():
    rng = np.random.default_rng(11)
    gt_boxes = rand_boxes(rng, 4)
    gt = Layout((0, 1, 2, 3), gt_boxes)
    pred = rng.uniform(0.1, 0.9, size=(4, 4)).astype(np.float32)
    logits = rng.normal(size=(4, 7)).astype(np.float32)
    loss, _ = layout_loss(Tensor(pred), Tensor(logits), gt)
    perm = np.array([2, 0, 3, 1])
    gt_p = Layout(tuple(np.array(gt.classes)[perm]), gt_boxes[perm])
    loss_p, _ = layout_loss(Tensor(pred[perm]), Tensor(logits[perm]), gt_p)
    assert loss.item() == loss_p.item()


def test_layout_loss_length_mismatch():
    gt = Layout((0,), np.array([[0, 0, 1, 1]], dtype=np.float32))
    with pytest.raises(ValueError, match="nodes"):
        layout_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 7))), gt)


def test_sgt_forward_rejects_out_of_range_category():
    g = make_graph([6], [], n_obj=7)
    cfg = dataclasses.replace(CFG, n_obj_types=5)
    params = init_sgt_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="category"):
        sgt_forward(g, np.zeros((1, cfg.lap_pe_width), dtype=np.float32), params, cfg)
