"""Vector-quantized convolutional autoencoder.

The encoder downsamples by stride-2 convolutions (log2(f) of them for
compression factor f), the decoder mirrors with nearest-neighbor upsampling,
and the bottleneck snaps each latent cell to its nearest codebook row.
Gradients cross the quantization step by the straight-through rule: the
decoder input *is* the gathered codebook rows bit-for-bit, and its gradient
is copied onto the encoder output unchanged. The codebook itself learns only
from the quantization loss, the encoder additionally from the commitment
term.

Images are (B, 3, H, W) float32 in [-1, 1]; latents are channel-first
(B, n_z, h, w) with h = H/f, w = W/f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class VqConfig:
    f: int = 8
    channels: tuple[int, ...] = (32, 48, 64)   # width after each stride-2 stage
    codebook_size: int = 64                    # K
    latent_dim: int = 32                       # n_z
    beta: float = 0.25                         # commitment weight
    restart_epochs: int = 3                    # reset rows unused this many epochs

    def __post_init__(self):
        stages = int(math.log2(self.f))
        if 2**stages != self.f or self.f < 2:
            raise ValueError(f"compression factor must be a power of 2 >= 2, got {self.f}")
        if len(self.channels) != stages:
            raise ValueError(f"need one channel width per stride-2 stage ({stages}), got {len(self.channels)}")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 vectors")

    @property
    def stages(self) -> int:
        return int(math.log2(self.f))


def _conv_init(rng, out_ch, in_ch, k):
    std = math.sqrt(2.0 / (in_ch * k * k))
    w = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(np.float32), requires_grad=True)
    b = T.zeros((out_ch,), requires_grad=True)
    return w, b


def init_vq_params(cfg: VqConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    ch = cfg.channels

    def conv(name, out_ch, in_ch, k=3):
        p[name + ".w"], p[name + ".b"] = _conv_init(rng, out_ch, in_ch, k)

    conv("enc.stem", ch[0], 3)
    for i in range(cfg.stages):
        conv(f"enc.down{i}", ch[i], ch[i - 1] if i > 0 else ch[0])
    conv("enc.res1", ch[-1], ch[-1])
    conv("enc.res2", ch[-1], ch[-1])
    conv("enc.out", cfg.latent_dim, ch[-1])

    conv("dec.stem", ch[-1], cfg.latent_dim)
    conv("dec.res1", ch[-1], ch[-1])
    conv("dec.res2", ch[-1], ch[-1])
    for i in reversed(range(cfg.stages)):
        conv(f"dec.up{i}", ch[i - 1] if i > 0 else ch[0], ch[i])
    conv("dec.out", 3, ch[0])

    p["codebook"] = T.uniform(rng, (cfg.codebook_size, cfg.latent_dim), -0.5, 0.5)
    return p


def _res_block(x: Tensor, params, name: str) -> Tensor:
    h = T.gelu(T.conv2d(x, params[name + "1.w"], params[name + "1.b"], pad=1))
    return x + T.conv2d(h, params[name + "2.w"], params[name + "2.b"], pad=1)


def vq_encode(x: Tensor, params: dict[str, Tensor], cfg: VqConfig) -> Tensor:
    """Image batch (B,3,H,W) to latent grid (B, n_z, H/f, W/f)."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B,3,H,W) images, got {x.shape}")
    if x.shape[2] % cfg.f or x.shape[3] % cfg.f:
        raise ValueError(f"image size {x.shape[2]}x{x.shape[3]} not divisible by f={cfg.f}")
    h = T.gelu(T.conv2d(x, params["enc.stem.w"], params["enc.stem.b"], pad=1))
    for i in range(cfg.stages):
        h = T.gelu(T.conv2d(h, params[f"enc.down{i}.w"], params[f"enc.down{i}.b"], stride=2, pad=1))
    h = _res_block(h, params, "enc.res")
    return T.conv2d(h, params["enc.out.w"], params["enc.out.b"], pad=1)


def vq_decode(z: Tensor, params: dict[str, Tensor], cfg: VqConfig) -> Tensor:
    """Latent grid (B, n_z, h, w) to image batch in [-1, 1] (tanh output)."""
    h = T.gelu(T.conv2d(z, params["dec.stem.w"], params["dec.stem.b"], pad=1))
    h = _res_block(h, params, "dec.res")
    for i in reversed(range(cfg.stages)):
        h = T.upsample_nearest2d(h, 2)
        h = T.gelu(T.conv2d(h, params[f"dec.up{i}.w"], params[f"dec.up{i}.b"], pad=1))
    return T.tanh(T.conv2d(h, params["dec.out.w"], params["dec.out.b"], pad=1))


def quantize(z_cells: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook row per cell (channel-last input, any leading shape).

    Distances are Euclidean with float64 accumulation; ties break to the
    lowest index. The returned values are gathered codebook rows, so every
    output cell is bit-identical to a codebook entry.
    """
    z_cells = np.asarray(z_cells)
    cb = np.asarray(codebook)
    if z_cells.shape[-1] != cb.shape[1]:
        raise ValueError(f"cell width {z_cells.shape[-1]} != codebook width {cb.shape[1]}")
    flat = z_cells.reshape(-1, cb.shape[1])
    diff = flat[:, None, :].astype(np.float64) - cb[None, :, :].astype(np.float64)
    d2 = np.einsum("lkc,lkc->lk", diff, diff)
    idx = d2.argmin(axis=1)
    vals = cb[idx].reshape(z_cells.shape)
    return idx.reshape(z_cells.shape[:-1]), vals


def straight_through(z: Tensor, codebook: Tensor) -> tuple[np.ndarray, Tensor, Tensor, Tensor]:
    """Quantize a latent grid and wire the three gradient paths.

    Returns (indices (B,h,w), quantized grid for the decoder, gathered
    codebook rows (L, n_z) on the codebook's tape, encoder cells (L, n_z) on
    the encoder's tape). The decoder-facing tensor carries the exact
    codebook values and hands its gradient to ``z`` untouched.
    """
    b, nz, hh, ww = z.shape
    cells = np.moveaxis(z.data, 1, 3)                        # (B,h,w,n_z)
    idx, _ = quantize(cells, codebook.data)
    rows = T.take_rows(codebook, idx.reshape(-1))            # codebook gradient path
    zq_data = np.moveaxis(rows.data.reshape(b, hh, ww, nz), 3, 1)
    zq = T.replace_values(z, zq_data)                        # straight-through copy
    z_cells = z.transpose(0, 2, 3, 1).reshape(b * hh * ww, nz)
    return idx, zq, rows, z_cells


def vq_loss(x: Tensor, params: dict[str, Tensor], cfg: VqConfig) -> tuple[Tensor, dict, np.ndarray]:
    """Reconstruction (L1) + quantization + beta * commitment.

    The quantization term moves only the codebook (encoder side is
    stop-gradiented), the commitment term only the encoder. Returns the
    total, per-term diagnostics, and the chosen codebook indices.
    """
    z = vq_encode(x, params, cfg)
    idx, zq, rows, z_cells = straight_through(z, params["codebook"])
    xhat = vq_decode(zq, params, cfg)
    l_r = T.absolute(x - xhat).mean()
    l_q = ((rows - z_cells.detach()) ** 2).mean()
    l_c = ((z_cells - rows.detach()) ** 2).mean()
    total = l_r + l_q + cfg.beta * l_c
    parts = {"recon": l_r.item(), "quant": l_q.item(), "commit": l_c.item()}
    return total, parts, idx


def decode_indices(indices: np.ndarray, params: dict[str, Tensor], cfg: VqConfig) -> np.ndarray:
    """Decode a grid of codebook indices to images (inference path)."""
    idx = np.asarray(indices, dtype=np.int64)
    cb = params["codebook"].data
    if idx.min() < 0 or idx.max() >= cb.shape[0]:
        raise ValueError(f"codebook index out of range [0, {cb.shape[0]})")
    grid = np.moveaxis(cb[idx], 3, 1) if idx.ndim == 3 else np.moveaxis(cb[idx[None]], 3, 1)
    with T.no_grad():
        return vq_decode(Tensor(grid), params, cfg).data
