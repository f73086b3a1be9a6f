"""Layout-conditioned autoregressive transformer over discrete image tokens.

One shared vocabulary covers codebook indices, object classes, position
bins, and the BOS/PAD specials, laid out in contiguous ranges. A sequence is
the layout prefix (one class/top-left/bottom-right triplet per object, PAD
filled), then BOS, then the image tokens in raster order. Self-attention is
masked by a convolutional causal mask: an image token sees the whole prefix
plus the raster-preceding tokens inside a 2-D window. Loss and sampling both
restrict the output distribution to the codebook range.

The cross-attention variant inserts an extra sublayer per block that attends
graph-encoder node states instead of taking a layout prefix.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layout import Layout
from .tensor import Tensor


@dataclass(frozen=True)
class TokenVocab:
    """Unified token id layout: [codebook | classes | P*P positions | BOS, PAD]."""

    codebook_size: int
    n_obj_types: int
    pos_bins: int

    @property
    def class_base(self) -> int:
        return self.codebook_size

    @property
    def pos_base(self) -> int:
        return self.codebook_size + self.n_obj_types

    @property
    def bos(self) -> int:
        return self.pos_base + self.pos_bins**2

    @property
    def pad(self) -> int:
        return self.bos + 1

    @property
    def size(self) -> int:
        return self.pad + 1


@dataclass(frozen=True)
class ImtConfig:
    num_layers: int = 4
    num_heads: int = 4
    embed_dim: int = 128
    kernel: int = 7
    context_len: int = 96
    max_objects: int = 4
    codebook_size: int = 64
    n_obj_types: int = 12
    pos_bins: int = 16

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def vocab(self) -> TokenVocab:
        return TokenVocab(self.codebook_size, self.n_obj_types, self.pos_bins)

    @property
    def prefix_len(self) -> int:
        """Layout triplets plus the BOS slot."""
        return 3 * self.max_objects + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


# ---------------------------------------------------------------------------
# layout triplets


def _cell(x: float, y: float, bins: int) -> int:
    col = min(int(x * bins), bins - 1)
    row = min(int(y * bins), bins - 1)
    return row * bins + col


def encode_layout(layout: Layout, vocab: TokenVocab, max_objects: int) -> np.ndarray:
    """Layout to (class, top-left cell, bottom-right cell) token triplets.

    Objects are canonically ordered by (class id, tl cell, br cell); unused
    capacity is PAD-filled. Corner coordinates at exactly 1.0 clamp into the
    last bin.
    """
    if layout.n_objects > max_objects:
        raise ValueError(f"{layout.n_objects} objects exceed capacity {max_objects}")
    p = vocab.pos_bins
    triplets = []
    for cls, box in zip(layout.classes, layout.boxes):
        if not 0 <= cls < vocab.n_obj_types:
            raise ValueError(f"class {cls} outside vocabulary")
        x1, y1, x2, y2 = (float(v) for v in box)
        triplets.append((cls, _cell(x1, y1, p), _cell(x2, y2, p)))
    triplets.sort()
    tokens = np.full(3 * max_objects, vocab.pad, dtype=np.int64)
    for i, (cls, tl, br) in enumerate(triplets):
        tokens[3 * i] = vocab.class_base + cls
        tokens[3 * i + 1] = vocab.pos_base + tl
        tokens[3 * i + 2] = vocab.pos_base + br
    return tokens


def decode_layout(tokens: np.ndarray, vocab: TokenVocab) -> Layout:
    """Invert encode_layout up to cell resolution (cell centers)."""
    p = vocab.pos_bins
    classes, boxes = [], []
    toks = [int(t) for t in tokens]
    for i in range(0, len(toks), 3):
        if toks[i] == vocab.pad:
            break
        cls = toks[i] - vocab.class_base
        tl = toks[i + 1] - vocab.pos_base
        br = toks[i + 2] - vocab.pos_base
        if not (0 <= cls < vocab.n_obj_types and 0 <= tl < p * p and 0 <= br < p * p):
            raise ValueError(f"triplet {toks[i:i+3]} outside vocabulary ranges")
        classes.append(cls)
        boxes.append([(tl % p + 0.5) / p, (tl // p + 0.5) / p, (br % p + 0.5) / p, (br // p + 0.5) / p])
    return Layout(tuple(classes), np.array(boxes, dtype=np.float32).reshape(len(classes), 4))


# ---------------------------------------------------------------------------
# convolutional causal mask


def conv_mask(h: int, w: int, kernel: int, prefix_len: int) -> np.ndarray:
    """Boolean (S, S) attention mask for S = prefix_len + h*w.

    Prefix positions are causal among themselves; every image position sees
    the whole prefix plus raster-preceding image positions within a
    (kernel x kernel) window centered on its own grid cell.
    """
    if kernel % 2 == 0:
        raise ValueError(f"kernel must be odd, got {kernel}")
    half = kernel // 2
    s = prefix_len + h * w
    mask = np.zeros((s, s), dtype=bool)
    for i in range(prefix_len):
        mask[i, : i + 1] = True
    for r in range(h):
        for c in range(w):
            i = prefix_len + r * w + c
            mask[i, :prefix_len] = True
            for rr in range(max(0, r - half), r + 1):
                lo = max(0, c - half)
                hi = min(w - 1, c + half)
                for cc in range(lo, hi + 1):
                    if rr * w + cc <= r * w + c:
                        mask[i, prefix_len + rr * w + cc] = True
    return mask


# ---------------------------------------------------------------------------
# parameters and forward pass


def init_imt_params(cfg: ImtConfig, rng: np.random.Generator, cross_dim: int | None = None) -> dict[str, Tensor]:
    d = cfg.embed_dim
    v = cfg.vocab.size
    p: dict[str, Tensor] = {}
    p["tok_emb"] = T.normal(rng, (v, d), std=0.02)
    p["pos_emb"] = T.normal(rng, (cfg.context_len, d), std=0.02)
    scale = 0.02 / math.sqrt(2 * cfg.num_layers)
    for i in range(cfg.num_layers):
        pre = f"b{i}."
        for name in ("w_q", "w_k", "w_v"):
            p[pre + name] = T.normal(rng, (d, d), std=0.02)
        p[pre + "w_o"] = T.normal(rng, (d, d), std=scale)
        p[pre + "b_o"] = T.zeros((d,), requires_grad=True)
        p[pre + "w1"] = T.normal(rng, (d, 4 * d), std=0.02)
        p[pre + "b1"] = T.zeros((4 * d,), requires_grad=True)
        p[pre + "w2"] = T.normal(rng, (4 * d, d), std=scale)
        p[pre + "b2"] = T.zeros((d,), requires_grad=True)
        for g_, b_ in (("ln1g", "ln1b"), ("ln2g", "ln2b")):
            p[pre + g_] = T.ones((d,), requires_grad=True)
            p[pre + b_] = T.zeros((d,), requires_grad=True)
        if cross_dim is not None:
            p[pre + "cq"] = T.normal(rng, (d, d), std=0.02)
            p[pre + "ck"] = T.normal(rng, (cross_dim, d), std=0.02)
            p[pre + "cv"] = T.normal(rng, (cross_dim, d), std=0.02)
            p[pre + "co"] = T.normal(rng, (d, d), std=scale)
            p[pre + "cb"] = T.zeros((d,), requires_grad=True)
            p[pre + "lncg"] = T.ones((d,), requires_grad=True)
            p[pre + "lncb"] = T.zeros((d,), requires_grad=True)
    p["lnfg"] = T.ones((d,), requires_grad=True)
    p["lnfb"] = T.zeros((d,), requires_grad=True)
    p["head"] = T.normal(rng, (d, v), std=0.02)
    return p


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    bsz, s, d = x.shape
    out = T.matmul(x.reshape(bsz * s, d), w)
    if b is not None:
        out = out + b
    return out.reshape(bsz, s, w.shape[1])


def _heads(x: Tensor, nh: int, dk: int) -> Tensor:
    bsz, s, _ = x.shape
    return x.reshape(bsz, s, nh, dk).transpose(0, 2, 1, 3)


def imt_forward(
    tokens: np.ndarray,
    params: dict[str, Tensor],
    cfg: ImtConfig,
    mask: np.ndarray,
    memory: Tensor | None = None,
) -> Tensor:
    """Token ids (B, S) or (S,) to next-token logits of the same leading shape.

    ``mask`` is the (S, S) boolean attention mask. When ``memory`` (N, d_mem)
    is given and the parameters carry cross weights, each block also
    cross-attends the memory after its masked self-attention.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    squeeze = toks.ndim == 1
    if squeeze:
        toks = toks[None]
    bsz, s = toks.shape
    if s > cfg.context_len:
        raise ValueError(f"sequence length {s} exceeds context {cfg.context_len}")
    if mask.shape != (s, s):
        raise ValueError(f"mask shape {mask.shape} does not match sequence {s}")
    nh, dk, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim
    x = T.embedding(params["tok_emb"], toks) + T.take_rows(params["pos_emb"], np.arange(s))
    blocked = ~mask[None, None]
    inv_sqrt = 1.0 / math.sqrt(dk)
    for i in range(cfg.num_layers):
        pre = f"b{i}."
        a = T.layer_norm(x, params[pre + "ln1g"], params[pre + "ln1b"])
        q = _heads(_linear(a, params[pre + "w_q"]), nh, dk)
        k = _heads(_linear(a, params[pre + "w_k"]), nh, dk)
        v = _heads(_linear(a, params[pre + "w_v"]), nh, dk)
        att = T.bmm(q, k.transpose(0, 1, 3, 2)) * inv_sqrt
        att = T.masked_fill(att, blocked, -1e9)
        ctx = T.bmm(T.softmax(att, axis=3), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(bsz, s, d)
        x = x + _linear(ctx, params[pre + "w_o"], params[pre + "b_o"])
        if memory is not None and pre + "cq" in params:
            c = T.layer_norm(x, params[pre + "lncg"], params[pre + "lncb"])
            qc = _heads(_linear(c, params[pre + "cq"]), nh, dk)
            kc = T.matmul(memory, params[pre + "ck"]).reshape(1, -1, nh, dk).transpose(0, 2, 1, 3)
            vc = T.matmul(memory, params[pre + "cv"]).reshape(1, -1, nh, dk).transpose(0, 2, 1, 3)
            catt = T.softmax(T.bmm(qc, kc.transpose(0, 1, 3, 2)) * inv_sqrt, axis=3)
            cctx = T.bmm(catt, vc).transpose(0, 2, 1, 3).reshape(bsz, s, d)
            x = x + _linear(cctx, params[pre + "co"], params[pre + "cb"])
        m = T.layer_norm(x, params[pre + "ln2g"], params[pre + "ln2b"])
        mid = T.gelu(_linear(m, params[pre + "w1"], params[pre + "b1"]))
        x = x + _linear(mid, params[pre + "w2"], params[pre + "b2"])
    x = T.layer_norm(x, params["lnfg"], params["lnfb"])
    logits = _linear(x, params["head"])
    return logits.reshape(s, cfg.vocab.size) if squeeze else logits


def cross_att_forward(
    graph_encoding: Tensor,
    tokens: np.ndarray,
    params: dict[str, Tensor],
    cfg: ImtConfig,
    mask: np.ndarray,
) -> Tensor:
    """Cross-attention variant: graph node states as key/value memory, image
    tokens only in the masked self path."""
    return imt_forward(tokens, params, cfg, mask, memory=graph_encoding)


def _image_column_mask(vocab: TokenVocab) -> np.ndarray:
    m = np.zeros(vocab.size, dtype=bool)
    m[vocab.codebook_size :] = True
    return m


def nll_loss(logits: Tensor, targets: np.ndarray, cfg: ImtConfig, prefix_len: int) -> Tensor:
    """Mean next-token cross-entropy over the image positions only.

    Non-codebook vocabulary columns are masked out of the softmax, so the
    model is scored strictly on the image-code range.
    """
    tg = np.asarray(targets, dtype=np.int64)
    squeeze = tg.ndim == 1
    if squeeze:
        tg = tg[None]
    lg = logits if logits.ndim == 3 else logits.reshape(1, *logits.shape)
    bsz, s, v = lg.shape
    hw = tg.shape[1]
    rows = lg.reshape(bsz * s, v)
    pick = (np.arange(bsz)[:, None] * s + prefix_len + np.arange(hw)[None, :]).reshape(-1)
    sel = T.take_rows(rows, pick)
    sel = T.masked_fill(sel, _image_column_mask(cfg.vocab)[None, :], -1e9)
    return T.cross_entropy(sel, tg.reshape(-1))


def teacher_forced_accuracy(logits: Tensor, targets: np.ndarray, cfg: ImtConfig, prefix_len: int) -> float:
    tg = np.asarray(targets, dtype=np.int64)
    if tg.ndim == 1:
        tg = tg[None]
    lg = logits.data if logits.ndim == 3 else logits.data[None]
    hw = tg.shape[1]
    rows = lg[:, prefix_len : prefix_len + hw, : cfg.vocab.codebook_size]
    return float((rows.argmax(axis=2) == tg).mean())


def sample(
    layout_tokens: np.ndarray,
    params: dict[str, Tensor],
    cfg: ImtConfig,
    h: int,
    w: int,
    temperature: float = 1.0,
    top_k: int = 32,
    seed: int = 0,
    memory: Tensor | None = None,
) -> np.ndarray:
    """Draw an (h, w) grid of codebook indices in raster order.

    Only the codebook range can ever be sampled. Temperature 0 is argmax;
    a fixed seed fixes the draw.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    kk = cfg.vocab.codebook_size
    if not 1 <= top_k:
        raise ValueError("top_k must be >= 1")
    top_k = min(top_k, kk)
    rng = np.random.default_rng(seed)
    prefix = list(np.asarray(layout_tokens, dtype=np.int64)) + [cfg.vocab.bos]
    full_mask = conv_mask(h, w, cfg.kernel, len(prefix))
    seq = list(prefix)
    out = []
    with T.no_grad():
        for _ in range(h * w):
            s = len(seq)
            logits = imt_forward(np.array(seq), params, cfg, full_mask[:s, :s], memory=memory)
            img_logits = logits.data[-1, :kk].astype(np.float64)
            if temperature == 0.0 or top_k == 1:
                tok = int(img_logits.argmax())
            else:
                scaled = img_logits / temperature
                order = np.argsort(scaled)[::-1][:top_k]
                probs = np.exp(scaled[order] - scaled[order].max())
                probs /= probs.sum()
                tok = int(order[rng.choice(top_k, p=probs)])
            out.append(tok)
            seq.append(tok)
    return np.array(out, dtype=np.int64).reshape(h, w)


# ---------------------------------------------------------------------------
# token sequence files: 8-byte header (magic, version) + flat LE uint32s

TOKEN_MAGIC = b"SGTK"
TOKEN_VERSION = 1


def save_tokens(path, tokens: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(tokens).reshape(-1), dtype="<u4")
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<I", TOKEN_VERSION))
        f.write(arr.tobytes())


def load_tokens(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8 or head[:4] != TOKEN_MAGIC:
            raise ValueError(f"{path}: not a token file")
        (version,) = struct.unpack("<I", head[4:])
        if version != TOKEN_VERSION:
            raise ValueError(f"{path}: unsupported token file version {version}")
        payload = f.read()
    if len(payload) % 4:
        raise ValueError(f"{path}: truncated token payload")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)
