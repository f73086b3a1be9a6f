import numpy as np
import pytest

from scenegen import tensor as T
from scenegen.tensor import Tensor, backward
from scenegen.vq import (
    VqConfig,
    decode_indices,
    init_vq_params,
    quantize,
    straight_through,
    vq_decode,
    vq_encode,
    vq_loss,
)

CFG = VqConfig(f=8, channels=(8, 12, 16), codebook_size=16, latent_dim=8)


@pytest.fixture(scope="module")
def params():
    return init_vq_params(CFG, np.random.default_rng(0))


def rand_image(rng, n=1, size=32):
    return Tensor(rng.uniform(-1, 1, size=(n, 3, size, size)).astype(np.float32))


def test_encode_shapes(params):
    rng = np.random.default_rng(1)
    assert vq_encode(rand_image(rng, 2, 32), params, CFG).shape == (2, 8, 4, 4)
    assert vq_encode(rand_image(rng, 1, 16), params, CFG).shape == (1, 8, 2, 2)


def test_encode_rejects_indivisible(params):
    with pytest.raises(ValueError, match="divisible"):
        vq_encode(Tensor(np.zeros((1, 3, 20, 20), dtype=np.float32)), params, CFG)


def test_encode_deterministic(params):
    rng = np.random.default_rng(2)
    x = rand_image(rng)
    a = vq_encode(x, params, CFG).data
    b = vq_encode(x, params, CFG).data
    assert np.array_equal(a, b)


def test_quantize_simple_cases():
    cb = np.array([[0.0, 0.0], [1.0, 1.0]], dtype=np.float32)
    idx, vals = quantize(np.array([[0.2, 0.1]], dtype=np.float32), cb)
    assert idx[0] == 0
    assert np.array_equal(vals[0], cb[0])
    # exact tie: lowest index wins
    idx, _ = quantize(np.array([[0.5, 0.5]], dtype=np.float32), cb)
    assert idx[0] == 0


def test_quantize_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    cb = rng.normal(size=(17, 6)).astype(np.float32)
    cells = rng.normal(size=(10_000, 6)).astype(np.float32)
    idx, vals = quantize(cells, cb)
    import math

    for i in range(cells.shape[0]):
        best, best_d = -1, float("inf")
        for k in range(cb.shape[0]):
            d = math.fsum((float(cells[i, c]) - float(cb[k, c])) ** 2 for c in range(6))
            if d < best_d:
                best, best_d = k, d
        assert idx[i] == best
        assert np.array_equal(vals[i], cb[best])


def test_quantized_values_are_codebook_rows(params):
    rng = np.random.default_rng(4)
    z = vq_encode(rand_image(rng), params, CFG)
    _, zq, _, _ = straight_through(z, params["codebook"])
    cb_rows = {r.tobytes() for r in params["codebook"].data}
    for cell in np.moveaxis(zq.data, 1, 3).reshape(-1, CFG.latent_dim):
        assert cell.tobytes() in cb_rows


def test_straight_through_gradient_copied_exactly(params):
    rng = np.random.default_rng(5)
    z = Tensor(rng.normal(size=(1, 8, 2, 2)).astype(np.float32), requires_grad=True)
    _, zq, _, _ = straight_through(z, params["codebook"])
    w = Tensor(rng.normal(size=(1, 8, 2, 2)).astype(np.float32))
    backward(((zq * w) * (zq * w)).sum())
    assert zq.grad is not None
    assert np.array_equal(z.grad, zq.grad)


def test_stop_gradient_routing_is_exact(params):
    rng = np.random.default_rng(6)
    x = rand_image(rng)
    cb = params["codebook"]

    z = vq_encode(x, params, CFG)
    _, _, rows, z_cells = straight_through(z, cb)
    # quantization term: codebook moves, encoder does not
    cb.zero_grad()
    l_q = ((rows - z_cells.detach()) ** 2).mean()
    backward(l_q)
    assert z.grad is None
    assert np.abs(cb.grad).max() > 0
    # commitment term: encoder moves, codebook does not
    cb.zero_grad()
    for p in params.values():
        p.zero_grad()
    l_c = ((z_cells - rows.detach()) ** 2).mean()
    backward(l_c)
    assert cb.grad is None
    assert z.grad is not None and np.abs(z.grad).max() > 0


def test_vq_loss_zero_terms_when_encoder_hits_codebook(params):
    # cells exactly on codebook vectors: both latent losses vanish
    rng = np.random.default_rng(7)
    cb = params["codebook"]
    idx = rng.integers(0, CFG.codebook_size, size=(1, 3, 3))
    cells = cb.data[idx]
    z = Tensor(np.moveaxis(cells, 3, 1), requires_grad=True)
    _, zq, rows, z_cells = straight_through(z, cb)
    assert ((rows - z_cells.detach()) ** 2).mean().item() == 0.0
    assert ((z_cells - rows.detach()) ** 2).mean().item() == 0.0
    assert np.array_equal(zq.data, z.data)


def test_perfect_reconstruction_gives_zero_l1():
    x = np.random.default_rng(8).uniform(-1, 1, size=(2, 3, 8, 8)).astype(np.float32)
    assert T.absolute(Tensor(x) - Tensor(x.copy())).mean().item() == 0.0


def test_decode_range_and_shape(params):
    rng = np.random.default_rng(9)
    x = rand_image(rng, 2, 32)
    z = vq_encode(x, params, CFG)
    _, zq, _, _ = straight_through(z, params["codebook"])
    out = vq_decode(zq, params, CFG)
    assert out.shape == x.shape
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_decode_indices_validates_range(params):
    with pytest.raises(ValueError, match="index out of range"):
        decode_indices(np.full((1, 2, 2), CFG.codebook_size, dtype=np.int64), params, CFG)


def test_vq_loss_returns_terms_and_indices(params):
    rng = np.random.default_rng(10)
    total, parts, idx = vq_loss(rand_image(rng), params, CFG)
    assert set(parts) == {"recon", "quant", "commit"}
    assert idx.shape == (1, 4, 4)
    assert total.item() > 0


def test_translation_consistency_at_stride_granularity(params):
    # shifting the input by f pixels shifts the latent by one cell wherever
    # the receptive field stays clear of the padded border
    rng = np.random.default_rng(11)
    base = rng.uniform(-1, 1, size=(1, 3, 128 + CFG.f, 128)).astype(np.float32)
    a = Tensor(base[:, :, : 128, :])
    b = Tensor(base[:, :, CFG.f :, :])
    with T.no_grad():
        za = vq_encode(a, params, CFG).data
        zb = vq_encode(b, params, CFG).data
    margin = 6  # cells; covers the encoder's receptive field at f=8
    inner_a = za[:, :, 1 + margin : -margin, margin:-margin]
    inner_b = zb[:, :, margin : -1 - margin, margin:-margin]
    assert np.abs(inner_a - inner_b).max() < 1e-5


def test_gradcheck_tiny_encoder_decoder():
    from scenegen.gradcheck import grad_check

    cfg = VqConfig(f=2, channels=(4,), codebook_size=4, latent_dim=3)
    params = init_vq_params(cfg, np.random.default_rng(12))
    x = Tensor(np.random.default_rng(13).uniform(-1, 1, size=(1, 3, 4, 4)).astype(np.float32))

    def enc_fn(xx):
        return vq_encode(xx, params, cfg).mean()

    assert grad_check(enc_fn, [x]) < 1e-3

    z = Tensor(np.random.default_rng(14).uniform(-1, 1, size=(1, 3, 2, 2)).astype(np.float32))

    def dec_fn(zz):
        return vq_decode(zz, params, cfg).mean()

    assert grad_check(dec_fn, [z]) < 1e-3
