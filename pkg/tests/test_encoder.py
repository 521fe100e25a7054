import numpy as np
import pytest

from minimm.encoder import EncoderConfig, VisionEncoder, interpolate_pos_embed
from minimm.errors import ConfigError, ContractError
from minimm.tensor import Tensor


def make_encoder(seed=0, **kw):
    cfg = EncoderConfig(**kw)
    return VisionEncoder(cfg, np.random.default_rng(seed))


def random_image(rng, h, w):
    return rng.uniform(0, 1, size=(h, w, 3)).astype(np.float32)


def test_patchify_grid_arithmetic(rng):
    enc = make_encoder()
    g = enc.patchify(random_image(rng, 28, 28))
    assert (g.rows, g.cols, g.tokens.shape[0]) == (2, 2, 4)
    g = enc.patchify(random_image(rng, 70, 42))
    assert (g.rows, g.cols, g.tokens.shape[0]) == (5, 3, 15)


def test_patchify_native_resolution(rng):
    # patch 14 at 448x448 -> the 32x32 = 1024-token native grid
    enc = make_encoder(layers=1, hidden_dim=32, heads=2)
    g = enc.patchify(random_image(rng, 448, 448))
    assert (g.rows, g.cols, g.tokens.shape[0]) == (32, 32, 1024)


def test_patchify_rejects_non_multiple(rng):
    enc = make_encoder()
    with pytest.raises(ContractError):
        enc.patchify(random_image(rng, 30, 28))


def test_patchify_tokens_are_patch_projections(rng):
    enc = make_encoder()
    img = random_image(rng, 28, 42)
    g = enc.patchify(img)
    # token (r, c) is the projection of exactly that 14x14 patch
    patch = img[14:28, 28:42].reshape(-1)
    expected = patch @ enc.patch_proj.w.data + enc.patch_proj.b.data
    assert np.allclose(g.tokens.data[1 * 3 + 2], expected, atol=1e-6)


def test_config_invariant():
    with pytest.raises(ConfigError):
        EncoderConfig(hidden_dim=130, heads=4)


# -- positional interpolation ---------------------------------------------------


def test_interpolation_identity_at_base_grid(rng):
    base = Tensor(rng.standard_normal((9, 5)).astype(np.float32))
    out = interpolate_pos_embed(base, 3, 3)
    assert out is base  # bitwise identity by construction


def test_interpolation_of_constant_grid(rng):
    base = Tensor(np.full((16, 3), 2.5, dtype=np.float64))
    out = interpolate_pos_embed(base, 7, 5)
    assert np.allclose(out.data, 2.5, atol=1e-12)


def test_interpolation_hand_bilinear_center():
    # 2x2 base per channel: [[0, 1], [1, 2]]; 3x3 target center = mean = 1
    base = Tensor(np.array([[0.0], [1.0], [1.0], [2.0]]))
    out = interpolate_pos_embed(base, 3, 3).data.reshape(3, 3)
    assert abs(out[1, 1] - 1.0) < 1e-12
    # corners stay exact (corner-aligned resampling)
    assert out[0, 0] == 0.0 and out[2, 2] == 2.0
    assert abs(out[0, 1] - 0.5) < 1e-12


def test_interpolation_gradients_flow(rng):
    from minimm.nn import Parameter

    base = Parameter(rng.standard_normal((16, 4)).astype(np.float64))
    (interpolate_pos_embed(base, 5, 3) ** 2).sum().backward()
    assert base.grad is not None and np.abs(base.grad).sum() > 0


# -- packed encoding ------------------------------------------------------------------


def test_encode_empty_batch_rejected():
    enc = make_encoder()
    with pytest.raises(ContractError):
        enc.encode([])


def test_packed_lengths(rng):
    enc = make_encoder(layers=1)
    seq = enc.encode([random_image(rng, 28, 28), random_image(rng, 56, 42)])
    assert seq.lengths == [4, 12]


def test_batch_of_one_equals_solo_bitwise(rng):
    enc = make_encoder(layers=2)
    img = random_image(rng, 42, 28)
    solo = enc.encode([img])
    grid = enc.encode_one(img)
    assert np.array_equal(solo.data.data, grid.tokens.data)


def test_packed_batch_equals_solo_encodes(rng):
    # per-image outputs are independent of batch composition
    enc = make_encoder(layers=2)
    images = [random_image(rng, 28, 28), random_image(rng, 56, 42), random_image(rng, 14, 70)]
    batch = enc.encode(images)
    for i, img in enumerate(images):
        alone = enc.encode([img])
        assert np.abs(batch.item(i).data - alone.data.data).max() < 1e-5


def test_packing_equivalence_randomized_mixes(rng):
    enc = make_encoder(layers=1, hidden_dim=32, heads=2)
    sizes = [14, 28, 42, 56]
    for _ in range(10):
        images = [
            random_image(rng, sizes[rng.integers(4)], sizes[rng.integers(4)])
            for _ in range(int(rng.integers(2, 5)))
        ]
        batch = enc.encode(images)
        for i, img in enumerate(images):
            alone = enc.encode([img])
            assert np.abs(batch.item(i).data - alone.data.data).max() < 1e-5


def test_resolution_independence(rng):
    enc = make_encoder(layers=1, hidden_dim=32, heads=2)
    for h, w in [(14, 14), (14, 140), (126, 14), (448, 14)]:
        seq = enc.encode([random_image(rng, h, w)])
        assert seq.lengths == [(h // 14) * (w // 14)]


def test_resize_policy_nearest_multiple(rng):
    enc = make_encoder()
    img = enc.prepare(random_image(rng, 64, 64))
    assert img.shape[:2] == (70, 70)  # 70 is the nearest multiple of 14 to 64
    img = enc.prepare(random_image(rng, 20, 34))
    assert img.shape[:2] == (14, 28)
