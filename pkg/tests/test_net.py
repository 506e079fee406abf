import numpy as np
import pytest

from mvksr import tensor as T
from mvksr.net import (
    NetworkConfig,
    ViewOptions,
    build_views,
    count_params,
    forward_views,
    init_params,
    mce_forward,
    mcl_forward,
    mcl_shapes,
    mff_forward,
    mrb_forward,
    mrb_shapes,
    mvksr_forward,
    param_shapes,
)
from mvksr.physics import gen_clean_scene
from mvksr.tensor import Tensor


def block_params(shapes, rng, scale=0.2):
    P = {}
    for name, shape, kind in shapes:
        if kind == "conv":
            data = rng.uniform(-scale, scale, shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "slope":
            data = np.full(shape, 0.25)
        else:
            data = np.zeros(shape)
        P[name] = Tensor(data, requires_grad=True)
    return P


@pytest.fixture(scope="module")
def default_params():
    return init_params(NetworkConfig(), seed=0)


def test_config_invariants():
    with pytest.raises(ValueError):
        NetworkConfig(level_channels=(16, 16, 64))
    with pytest.raises(ValueError):
        NetworkConfig(level_atrous_rates=(3, 6, 12))
    with pytest.raises(ValueError):
        NetworkConfig(kernel=4)


def test_mcl_shape_and_branch_split(rng):
    P = block_params(mcl_shapes("m", 16, 16), rng)
    assert P["m.dil.w"].shape == (8, 16, 3, 3) and P["m.std.w"].shape == (8, 16, 3, 3)
    out = mcl_forward(Tensor(rng.normal(size=(1, 16, 32, 32))), P, "m", 12)
    assert out.shape == (1, 16, 32, 32)


def test_mcl_odd_width_rejected():
    with pytest.raises(ValueError):
        mcl_shapes("m", 4, 7)


def test_mcl_zero_input_gives_zero(rng):
    P = block_params(mcl_shapes("m", 6, 6), rng)
    out = mcl_forward(Tensor(np.zeros((1, 6, 10, 10))), P, "m", 2)
    assert np.all(out.data == 0.0)


def test_mrb_shape(rng):
    P = block_params(mrb_shapes("b", 32), rng)
    assert mrb_forward(Tensor(rng.normal(size=(2, 32, 16, 16))), P, "b", 6).shape == (2, 32, 16, 16)


def test_mrb_channel_mismatch(rng):
    P = block_params(mrb_shapes("b", 8), rng)
    with pytest.raises(T.ShapeError):
        mrb_forward(Tensor(np.zeros((1, 6, 8, 8))), P, "b", 2)


def test_mrb_receptive_field_from_impulse(rng, monkeypatch):
    """Linear rig: identity norm, unit slopes, zero biases; the block becomes a conv stack."""
    monkeypatch.setattr(T, "layer_norm", lambda x, g, b, eps=1e-5: x)
    c, r, size = 4, 12, 81
    P = block_params(mrb_shapes("b", c), rng)
    for name in P:
        if name.endswith(".act"):
            P[name] = Tensor(np.ones(P[name].shape))
    x = np.zeros((1, c, size, size))
    mid = size // 2
    x[0, :, mid, mid] = 1.0
    out = mrb_forward(Tensor(x), P, "b", r).data
    rows = np.nonzero(np.abs(out).sum(axis=(0, 1, 3)) > 1e-12)[0]
    cols = np.nonzero(np.abs(out).sum(axis=(0, 1, 2)) > 1e-12)[0]
    span = (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    assert min(span) >= 49
    # two dilated convs (+-24) and one standard 3x3 (+-1) bound it from above
    assert max(span) <= 2 * (2 * r + 1) + 1


def test_param_shapes_are_oikk():
    cfg = NetworkConfig()
    for name, shape, kind in param_shapes(cfg):
        if kind == "conv":
            assert len(shape) == 4 and shape[2] == shape[3]
            assert shape[2] in (1, cfg.kernel)


def test_param_count_band(default_params):
    n = count_params(default_params)
    assert 500_000 <= n <= 3_000_000


def test_init_deterministic():
    a = init_params(NetworkConfig(), seed=3)
    b = init_params(NetworkConfig(), seed=3)
    c = init_params(NetworkConfig(), seed=4)
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_mce_shapes(default_params, rng):
    feats, skips = mce_forward(Tensor(rng.uniform(0, 1, (1, 9, 64, 64))), default_params, NetworkConfig())
    assert feats.shape == (1, 16, 64, 64)
    assert [s.shape for s in skips] == [(1, 16, 64, 64), (1, 32, 32, 32)]


def test_mce_requires_multiple_of_four(default_params):
    with pytest.raises(T.ShapeError, match="pad"):
        mce_forward(Tensor(np.zeros((1, 9, 30, 32))), default_params, NetworkConfig())


def test_mce_wrong_channel_count(default_params):
    with pytest.raises(T.ShapeError):
        mce_forward(Tensor(np.zeros((1, 7, 32, 32))), default_params, NetworkConfig())


def test_mff_shapes_and_range(default_params, rng):
    cfg = NetworkConfig()
    feats = Tensor(rng.normal(0, 50, (1, 16, 64, 64)))
    views = Tensor(rng.uniform(0, 1, (1, 9, 64, 64)))
    out = mff_forward(feats, views, default_params, cfg)
    assert out.gray_f.shape == out.high_f.shape == out.low_f.shape == (1, 1, 64, 64)
    assert out.restored.shape == (1, 3, 64, 64)
    for t in (out.gray_f, out.low_f, out.restored):
        assert t.data.min() >= 0 and t.data.max() <= 1
    # additive highs are signed
    assert out.high_f.data.min() >= -1 and out.high_f.data.max() <= 1


def test_mff_complement_mode_heads_in_unit_range(default_params, rng):
    cfg = NetworkConfig(decomposition_mode="complement")
    out = mff_forward(Tensor(rng.normal(size=(1, 16, 8, 8))), Tensor(rng.uniform(0, 1, (1, 9, 8, 8))), default_params, cfg)
    assert out.high_f.data.min() >= 0


def test_mff_shape_mismatch(default_params):
    with pytest.raises(T.ShapeError):
        mff_forward(Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 9, 4, 8))), default_params, NetworkConfig())


def test_end_to_end_shape_and_determinism(default_params):
    img = gen_clean_scene(64, 48, 1)
    a = mvksr_forward(img, default_params, NetworkConfig())
    b = mvksr_forward(img, default_params, NetworkConfig())
    assert a.restored.shape == (1, 3, 64, 48)
    assert a.restored.data.tobytes() == b.restored.data.tobytes()
    assert a.restored.data.min() >= 0 and a.restored.data.max() <= 1


@pytest.mark.parametrize("h,w", [(16, 16), (20, 36), (32, 8)])
def test_shape_preserved_for_multiples_of_four(default_params, rng, h, w):
    out = forward_views(Tensor(rng.uniform(0, 1, (1, 9, h, w))), default_params, NetworkConfig())
    assert out.restored.shape == (1, 3, h, w)


def test_no_dead_parameters(rng):
    cfg = NetworkConfig()
    P = init_params(cfg, seed=0)
    views = Tensor(rng.uniform(0, 1, (1, 9, 16, 16)))
    out = forward_views(views, P, cfg)
    probe = (
        (out.restored * Tensor(rng.normal(size=out.restored.shape))).sum()
        + (out.gray_f * Tensor(rng.normal(size=out.gray_f.shape))).sum()
        + (out.high_f * Tensor(rng.normal(size=out.high_f.shape))).sum()
        + (out.low_f * Tensor(rng.normal(size=out.low_f.shape))).sum()
    )
    T.backward(probe)
    dead = [k for k, p in P.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_views_layout():
    img = gen_clean_scene(24, 24, 0)
    v = build_views(img)
    assert v.shape == (9, 24, 24)
    np.testing.assert_array_equal(v[:3], img.transpose(2, 0, 1))
    ablated = build_views(img, ViewOptions(use_high=False, use_low=False))
    assert not ablated[3:].any()
    np.testing.assert_array_equal(ablated[:3], v[:3])
