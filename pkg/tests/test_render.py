"""Texel-to-pixel map, enhancer forward/backward, compositing."""

import numpy as np
import pytest

from camotex.render import (GRAY, EnhancerModel, RenderMap, TextureMap,
                            composite, enhance, enhance_backward,
                            enhancer_stack, normalize_depth, oracle_enhanced,
                            render_loss, render_raw, retexture,
                            shading_from_gray, train_enhancer)
from camotex.scene import (CameraPose, ShadingField, build_truck_mesh,
                           make_procedural_textures, rasterize)

from fdcheck import numeric_grad, numeric_grad_sampled, rel_err, sample_coords


@pytest.fixture(scope="module")
def mesh():
    return build_truck_mesh()


@pytest.fixture(scope="module")
def pool():
    return make_procedural_textures(3, 16, seed=5)


@pytest.fixture(scope="module")
def samples(mesh, pool):
    shading = ShadingField.from_angles(200.0, 45.0)
    views = [(20, 25, 12), (95, 40, 14), (160, 30, 16),
             (250, 55, 13), (310, 20, 15), (45, 65, 18)]
    out = []
    for i, (az, el, d) in enumerate(views):
        cam = CameraPose(azimuth=float(az), elevation=float(el),
                         distance=float(d), image_size=64)
        s = rasterize(mesh, cam, pool[i % len(pool)], shading)
        s.texture_index = i % len(pool)
        s.sample_id = f"t{i}"
        out.append(s)
    return out


@pytest.fixture(scope="module")
def sample(samples):
    return samples[0]


# ---------------------------------------------------------------------------
# texture container

def test_texture_map_validates_shape():
    with pytest.raises(ValueError):
        TextureMap(np.zeros((4, 4), np.float32))
    with pytest.raises(ValueError):
        TextureMap(np.zeros((4, 4, 4), np.float32))


def test_texture_map_validates_range():
    with pytest.raises(ValueError):
        TextureMap(np.full((4, 4, 3), 1.5, np.float32))
    with pytest.raises(ValueError):
        TextureMap(np.full((4, 4, 3), -0.1, np.float32))


def test_texture_map_casts_to_float32():
    t = TextureMap(np.full((2, 2, 3), 0.5))
    assert t.values.dtype == np.float32


# ---------------------------------------------------------------------------
# render map

def test_render_map_is_linear(sample):
    rm = sample.render_map
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, rm.texture_shape + (3,))
    b = rng.uniform(0, 1, rm.texture_shape + (3,))
    lhs = rm.apply(2.0 * a + 3.0 * b)
    rhs = 2.0 * rm.apply(a) + 3.0 * rm.apply(b)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_render_map_partition_of_unity(sample):
    rm = sample.render_map
    const = np.full(rm.texture_shape + (3,), 0.37)
    out = rm.apply(const)
    body = rm.body_mask
    assert np.allclose(out[body], 0.37, atol=1e-6)
    assert np.all(out[~body] == 0.0)


def test_render_map_adjoint(sample):
    # <A t, g> == <t, A^T g> pins transpose_apply against apply
    rm = sample.render_map
    rng = np.random.default_rng(2)
    t = rng.standard_normal(rm.texture_shape + (3,))
    g = rng.standard_normal(rm.image_shape + (3,))
    lhs = float((rm.apply(t) * g).sum())
    rhs = float((t * rm.transpose_apply(g)).sum())
    assert rel_err(lhs, rhs) < 1e-10


def test_from_uv_corners_hit_border_texels():
    uv = np.array([[[0, 0], [1, 0]],
                   [[0, 1], [1, 1]]], np.float64)
    mask = np.ones((2, 2), bool)
    rm = RenderMap.from_uv(uv, mask, (4, 5))
    rng = np.random.default_rng(3)
    tex = rng.uniform(0, 1, (4, 5, 3))
    out = rm.apply(tex)
    assert np.allclose(out[0, 0], tex[0, 0], atol=1e-7)
    assert np.allclose(out[0, 1], tex[0, 4], atol=1e-7)
    assert np.allclose(out[1, 0], tex[3, 0], atol=1e-7)
    assert np.allclose(out[1, 1], tex[3, 4], atol=1e-7)


def test_render_map_rejects_inconsistent_taps():
    with pytest.raises(ValueError):
        RenderMap(np.zeros(3, np.int64), np.zeros(0, np.int64),
                  np.zeros(0, np.float32), (2, 2), (2, 2))
    with pytest.raises(ValueError):
        RenderMap(np.array([1, 0, 0, 0]), np.zeros(2, np.int64),
                  np.zeros(2, np.float32), (2, 2), (2, 2))
    with pytest.raises(IndexError):
        RenderMap(np.array([1, 0, 0, 0]), np.array([9]),
                  np.ones(1, np.float32), (2, 2), (2, 2))


def test_render_raw_unwraps_texture_map(sample):
    t = TextureMap(np.full((16, 16, 3), 0.25, np.float32))
    assert np.array_equal(render_raw(sample.render_map, t),
                          sample.render_map.apply(t.values))


# ---------------------------------------------------------------------------
# depth and stacking

def test_normalize_depth_peak_and_background():
    rng = np.random.default_rng(4)
    d = np.zeros((8, 8), np.float32)
    d[2:6, 2:6] = rng.uniform(5, 20, (4, 4)).astype(np.float32)
    out = normalize_depth(d)
    assert out.max() == pytest.approx(1.0)
    assert np.all(out[d == 0] == 0.0)
    assert np.all(out >= 0.0)


def test_normalize_depth_all_zero_stays_zero():
    assert np.all(normalize_depth(np.zeros((4, 4), np.float32)) == 0.0)


def test_normalize_depth_is_per_image():
    d = np.zeros((2, 4, 4), np.float32)
    d[0, 1, 1] = 10.0
    d[1, 2, 2] = 40.0
    out = normalize_depth(d)
    assert out[0].max() == pytest.approx(1.0)
    assert out[1].max() == pytest.approx(1.0)


def test_enhancer_stack_channel_order(sample):
    xr = render_raw(sample.render_map, np.full((16, 16, 3), 0.5, np.float32))
    st = enhancer_stack(xr, sample.x_gray, sample.x_d)
    assert st.shape == xr.shape[:2] + (7,)
    assert np.array_equal(st[..., :3], xr)
    assert np.array_equal(st[..., 3:6], sample.x_gray)
    assert np.array_equal(st[..., 6], normalize_depth(sample.x_d))


def test_enhancer_stack_shape_mismatch():
    with pytest.raises(ValueError):
        enhancer_stack(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)),
                       np.zeros((5, 5)))


# ---------------------------------------------------------------------------
# enhancer forward

def test_identity_enhancer_returns_raw(sample):
    xr = render_raw(sample.render_map, np.full((16, 16, 3), 0.6, np.float32))
    out = enhance(xr, sample.x_gray, sample.x_d, EnhancerModel.identity())
    assert np.allclose(out, xr, atol=1e-5)


def test_gain_stays_positive():
    rng = np.random.default_rng(6)
    model = EnhancerModel.init(4, rng)
    stack = rng.uniform(-2, 2, (1, 8, 8, 7)).astype(np.float32)
    gain, _, _ = model.forward(stack)
    assert gain.min() > 0.0


def test_enhance_batch_matches_single(samples):
    model = EnhancerModel.init(4, np.random.default_rng(7))
    xr = np.stack([render_raw(s.render_map,
                              np.full((16, 16, 3), 0.4, np.float32))
                   for s in samples[:2]])
    xg = np.stack([s.x_gray for s in samples[:2]])
    xd = np.stack([s.x_d for s in samples[:2]])
    batched = enhance(xr, xg, xd, model)
    for i in range(2):
        one = enhance(xr[i], xg[i], xd[i], model)
        assert np.allclose(batched[i], one, atol=1e-7)


# ---------------------------------------------------------------------------
# enhancer backward

def _f64_model(rng, hidden=4):
    m = EnhancerModel.init(hidden, rng)
    return EnhancerModel(m.w1.astype(np.float64), m.b1.astype(np.float64),
                         m.w2.astype(np.float64), m.b2.astype(np.float64),
                         m.leaky_slope)


def test_enhance_backward_input_gradient():
    rng = np.random.default_rng(8)
    model = _f64_model(rng)
    xg = rng.uniform(0, 1, (6, 6, 3))
    xd = rng.uniform(1, 3, (6, 6))
    proj = rng.standard_normal((6, 6, 3))

    def loss(xr):
        return float((enhance(xr, xg, xd, model) * proj).sum())

    xr0 = rng.uniform(0.1, 0.9, (6, 6, 3))
    _, cache = enhance(xr0, xg, xd, model, want_cache=True)
    d_x_raw, _ = enhance_backward(cache, model, proj)
    num = numeric_grad(loss, xr0, h=1e-6)
    assert rel_err(d_x_raw, num, floor=1e-4) < 1e-5


@pytest.mark.parametrize("name", ["w1", "b1", "w2", "b2"])
def test_enhance_backward_param_gradients(name):
    rng = np.random.default_rng(9)
    model = _f64_model(rng)
    xr = rng.uniform(0.1, 0.9, (6, 6, 3))
    xg = rng.uniform(0, 1, (6, 6, 3))
    xd = rng.uniform(1, 3, (6, 6))
    proj = rng.standard_normal((6, 6, 3))
    _, cache = enhance(xr, xg, xd, model, want_cache=True)
    _, grads = enhance_backward(cache, model, proj)

    base = getattr(model, name)
    coords = sample_coords(rng, base.size, 24)

    def loss(p):
        probe = EnhancerModel(**{**{"w1": model.w1, "b1": model.b1,
                                    "w2": model.w2, "b2": model.b2},
                                 name: p},
                              leaky_slope=model.leaky_slope)
        return float((enhance(xr, xg, xd, probe) * proj).sum())

    num = numeric_grad_sampled(loss, base, coords, h=1e-6)
    assert rel_err(grads[name].reshape(-1)[coords], num, floor=1e-4) < 1e-5


def test_enhance_backward_has_direct_product_path():
    # with an identity model the conv path is dead, so the input gradient
    # collapses to gain * upstream = upstream
    rng = np.random.default_rng(10)
    xr = rng.uniform(0.1, 0.9, (5, 5, 3)).astype(np.float32)
    xg = rng.uniform(0, 1, (5, 5, 3)).astype(np.float32)
    xd = rng.uniform(1, 2, (5, 5)).astype(np.float32)
    proj = rng.standard_normal((5, 5, 3)).astype(np.float32)
    _, cache = enhance(xr, xg, xd, EnhancerModel.identity(),
                       want_cache=True)
    d_x_raw, _ = enhance_backward(cache, EnhancerModel.identity(), proj)
    assert np.allclose(d_x_raw, proj, atol=1e-5)


# ---------------------------------------------------------------------------
# compositing and losses

def test_composite_partition(sample):
    rng = np.random.default_rng(11)
    enh = rng.uniform(0, 1, sample.x_ref.shape).astype(np.float32)
    out = composite(enh, sample.x_ref, sample.mask)
    on = sample.mask > 0
    assert np.array_equal(out[on], enh[on])
    assert np.array_equal(out[~on], sample.x_ref[~on])


def test_composite_identity(sample):
    x = sample.x_ref
    assert np.allclose(composite(x, x, sample.mask), x, atol=1e-7)


def test_composite_rejects_bad_mask():
    x = np.zeros((3, 3, 3), np.float32)
    with pytest.raises(ValueError):
        composite(x, x, np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        composite(x, np.zeros((4, 4, 3), np.float32), np.zeros((3, 3)))


def test_render_loss_value_and_gradient():
    rng = np.random.default_rng(12)
    ref = rng.uniform(0, 1, (4, 4, 3))
    adv = ref + rng.choice([-0.2, 0.2], ref.shape)
    value, grad = render_loss(adv, ref)
    assert value == pytest.approx(0.2, rel=1e-6)
    num = numeric_grad(lambda x: render_loss(x, ref)[0], adv, h=1e-6)
    assert rel_err(grad, num, floor=1e-6) < 1e-4


# ---------------------------------------------------------------------------
# retexturing and the enhancer target

def test_shading_recovered_from_gray(sample):
    s = shading_from_gray(sample.x_gray, sample.render_map.body_mask)
    body = sample.render_map.body_mask
    assert np.all(s[body] > 0.0) and np.all(s[body] <= 1.0 + 1e-6)
    assert np.all(s[~body] == 0.0)


def test_retexture_reproduces_reference(sample, pool):
    out = retexture(sample, pool[sample.texture_index])
    assert np.allclose(out, sample.x_ref, atol=1e-5)


def test_retexture_changes_only_body(sample):
    other = TextureMap(np.full((16, 16, 3), 0.9, np.float32))
    out = retexture(sample, other)
    body = sample.render_map.body_mask
    assert np.array_equal(out[~body], sample.x_ref[~body])
    assert np.abs(out[body] - sample.x_ref[body]).max() > 0.05


def test_oracle_enhanced_reapplies_shading():
    rng = np.random.default_rng(13)
    xr = rng.uniform(0, 1, (6, 6, 3)).astype(np.float32)
    s = rng.uniform(0.3, 1.0, (6, 6, 1)).astype(np.float32)
    x_gray = (GRAY * s).repeat(3, axis=-1)
    assert np.allclose(oracle_enhanced(xr, x_gray), xr * s, atol=1e-6)


# ---------------------------------------------------------------------------
# training loop

def test_train_enhancer_learns_and_logs(samples, pool):
    model, history, state = train_enhancer(samples, pool, epochs=3, lr=2e-3,
                                           seed=0, batch_size=2)
    assert len(history) == 3
    assert history[-1]["train_loss"] <= history[0]["train_loss"]
    assert np.isfinite(history[-1]["holdout_l1"])


def test_train_enhancer_resume_matches_straight_run(samples, pool):
    full, _, _ = train_enhancer(samples, pool, epochs=2, lr=2e-3,
                                seed=1, batch_size=2)
    part, _, st = train_enhancer(samples, pool, epochs=1, lr=2e-3,
                                 seed=1, batch_size=2)
    resumed, _, _ = train_enhancer(samples, pool, epochs=2, lr=2e-3,
                                   seed=1, batch_size=2,
                                   resume=(part, st, 1))
    for key, val in full.params().items():
        assert np.array_equal(val, resumed.params()[key]), key


def test_train_enhancer_rejects_empty():
    with pytest.raises(ValueError):
        train_enhancer([], [], epochs=1, lr=1e-3, seed=0)
