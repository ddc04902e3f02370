import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isa_fss.errors import ContractError, DegenerateMaskError, DimensionError
from isa_fss.model import (
    ConvBlock,
    LayeredModel,
    ImageSample,
    Prototype,
    default_backbone,
    extract_features,
    layer_output_rms,
    load_model,
    masked_average_pool,
    mean_prototype,
    normalize_layer_scales,
    predict,
    resize_mask_nearest,
    save_model,
    segment,
)
from isa_fss.tensor import Tensor, backward, tsum

pytestmark = pytest.mark.usefixtures("backend")


def loop_conv_relu(x, w, b):
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c_out, h, wd))
    for co in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[co, i, j] = max(0.0, b[co] + np.sum(w[co] * xp[:, i : i + 3, j : j + 3]))
    return out


def loop_pool(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for k in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[k, i, j] = (x[k, 2 * i, 2 * j] + x[k, 2 * i + 1, 2 * j] + x[k, 2 * i, 2 * j + 1] + x[k, 2 * i + 1, 2 * j + 1]) / 4
    return out


def random_mask(rng, size):
    m = np.zeros(size)
    m[2:6, 1:5] = 1
    m[rng.random(size) < 0.2] = 1
    return m


def test_backbone_layout():
    m = default_backbone(0)
    assert len(m.layer_names()) == 9
    assert len(set(m.layer_names())) == 9
    assert m.layer_names()[0] == "stage1.block0.conv0"
    params = m.parameters()
    assert sum(k.endswith(".weight") for k in params) == 9
    assert sum(k.endswith(".bias") for k in params) == 9
    assert list(params)[:2] == ["stage1.block0.conv0.weight", "stage1.block0.conv0.bias"]
    assert [b.weight.shape[0] for b in m.blocks] == [8] * 3 + [16] * 3 + [32] * 3
    assert all(b.weight.shape[2:] == (3, 3) for b in m.blocks)
    assert 25_000 < m.num_parameters() < 35_000


def test_backbone_seed_determinism():
    a, b = default_backbone(7), default_backbone(7)
    for (ka, va), (kb, vb) in zip(a.parameters().items(), b.parameters().items()):
        assert ka == kb and va.data.tobytes() == vb.data.tobytes()
    assert default_backbone(8).blocks[0].weight.data.tobytes() != a.blocks[0].weight.data.tobytes()


def test_feature_shape_and_errors(rng):
    m = default_backbone(0)
    assert extract_features(m, Tensor(rng.random((3, 32, 32)))).shape == (32, 8, 8)
    with pytest.raises(DimensionError):
        extract_features(m, Tensor(rng.random((1, 32, 32))))
    with pytest.raises(DimensionError):
        extract_features(m, Tensor(rng.random((3, 30, 30))))


def test_features_deterministic_and_zero(rng):
    m = default_backbone(0)
    img = rng.random((3, 16, 16))
    np.testing.assert_array_equal(extract_features(m, Tensor(img)).data, extract_features(m, Tensor(img.copy())).data)
    assert np.all(extract_features(m, Tensor(np.zeros((3, 16, 16)))).data == 0)


def test_features_match_straight_line_oracle(rng):
    m = default_backbone(3)
    for b in m.blocks:
        b.bias.data[:] = rng.uniform(-0.1, 0.1, b.bias.shape)
    img = rng.random((3, 16, 16))
    x = img
    for si, stage in enumerate(m.stages):
        if si:
            x = loop_pool(x)
        for b in stage:
            x = loop_conv_relu(x, b.weight.data, b.bias.data)
    np.testing.assert_allclose(extract_features(m, Tensor(img)).data, x, rtol=1e-10, atol=1e-12)


def test_features_differentiable(rng):
    m = default_backbone(0)
    backward(tsum(extract_features(m, Tensor(rng.random((3, 16, 16))))))
    assert all(p.grad is not None and p.grad.shape == p.shape for p in m.parameters().values())


def test_layer_normalization_keeps_predictions(rng):
    m = default_backbone(1)
    imgs = rng.random((4, 3, 16, 16))
    norm = normalize_layer_scales(m, imgs)
    np.testing.assert_allclose(layer_output_rms(norm, imgs), 1.0, rtol=1e-10)
    sup = ImageSample(imgs[0], random_mask(rng, (16, 16)))
    q = ImageSample(imgs[1], random_mask(rng, (16, 16)))
    p0, _ = segment(m, [sup], q)
    p1, _ = segment(norm, [sup], q)
    np.testing.assert_allclose(p0.data, p1.data, atol=1e-10)


# ------------------------------------------------------------------ samples


def test_image_sample_validation():
    with pytest.raises(DimensionError):
        ImageSample(np.zeros((3, 4, 4)), np.zeros((4, 5)))
    with pytest.raises(ContractError):
        ImageSample(np.zeros((3, 4, 4)), np.full((4, 4), 0.5))


# ------------------------------------------------------------------ masked pooling


def test_map_degenerate_masks():
    f = Tensor(np.ones((2, 4, 4)))
    with pytest.raises(DegenerateMaskError):
        masked_average_pool(f, np.ones((16, 16)))
    with pytest.raises(DegenerateMaskError):
        masked_average_pool(f, np.zeros((16, 16)))
    # foreground too small to survive downsampling
    tiny = np.zeros((16, 16))
    tiny[0, 0] = 1
    with pytest.raises(DegenerateMaskError):
        masked_average_pool(f, tiny)
    with pytest.raises(ContractError):
        masked_average_pool(f, np.full((16, 16), 0.3))


def test_map_constant_features(rng):
    f = np.zeros((3, 4, 4))
    f[:] = np.array([1.5, -2.0, 0.25])[:, None, None]
    p = masked_average_pool(Tensor(f), random_mask(rng, (8, 8)))
    np.testing.assert_allclose(p.fg.data, [1.5, -2.0, 0.25], atol=1e-15)
    np.testing.assert_allclose(p.bg.data, [1.5, -2.0, 0.25], atol=1e-15)


def test_map_matches_loop_oracle(rng):
    f = rng.standard_normal((3, 4, 4))
    mask = random_mask(rng, (16, 16))
    p = masked_average_pool(Tensor(f), mask)
    fg, bg, nf, nb = np.zeros(3), np.zeros(3), 0, 0
    for i in range(4):
        for j in range(4):
            # centre sample of each 4x4 cell
            if mask[4 * i + 2, 4 * j + 2] == 1:
                fg += f[:, i, j]
                nf += 1
            else:
                bg += f[:, i, j]
                nb += 1
    np.testing.assert_allclose(p.fg.data, fg / nf, atol=1e-14)
    np.testing.assert_allclose(p.bg.data, bg / nb, atol=1e-14)


def test_nearest_resize_roundtrip():
    m = np.zeros((4, 4))
    m[1:3, 0:2] = 1
    up = resize_mask_nearest(m, (16, 16))
    assert set(np.unique(up)) <= {0.0, 1.0}
    np.testing.assert_array_equal(resize_mask_nearest(up, (4, 4)), m)


def test_prototype_duplication_invariance(rng):
    a = Prototype(Tensor(rng.random(4)), Tensor(rng.random(4)))
    b = Prototype(Tensor(rng.random(4)), Tensor(rng.random(4)))
    once = mean_prototype([a, b])
    twice = mean_prototype([a, b, a, b])
    np.testing.assert_allclose(once.fg.data, twice.fg.data, atol=1e-15)
    np.testing.assert_allclose(once.bg.data, twice.bg.data, atol=1e-15)


# ------------------------------------------------------------------ predict


def test_predict_analytic():
    fg = np.array([1.0, 0.0])
    bg = np.array([0.0, 1.0])
    f = np.zeros((2, 3, 3))
    f[0] = 2.0
    p = predict(Tensor(f), Prototype(Tensor(fg), Tensor(bg)), 10.0)
    np.testing.assert_allclose(p.data, 1 / (1 + math.exp(-10)), rtol=1e-12)
    assert p.data[0, 0] == pytest.approx(0.99995, abs=1e-5)


def test_predict_symmetric_and_errors(rng):
    v = rng.random(3)
    p = predict(Tensor(rng.random((3, 2, 2))), Prototype(Tensor(v), Tensor(v.copy())))
    np.testing.assert_array_equal(p.data, 0.5)
    with pytest.raises(ContractError):
        predict(Tensor(rng.random((3, 2, 2))), Prototype(Tensor(v), Tensor(v)), 0.0)


def test_predict_matches_scalar_oracle(rng):
    f = rng.standard_normal((4, 3, 3))
    fg, bg = rng.standard_normal(4), rng.standard_normal(4)
    p = predict(Tensor(f), Prototype(Tensor(fg), Tensor(bg)), 7.0).data
    for i in range(3):
        for j in range(3):
            v = f[:, i, j]
            cf = sum(a * b for a, b in zip(v, fg)) / (math.sqrt(sum(a * a for a in v)) * math.sqrt(sum(a * a for a in fg)))
            cb = sum(a * b for a, b in zip(v, bg)) / (math.sqrt(sum(a * a for a in v)) * math.sqrt(sum(a * a for a in bg)))
            want = math.exp(7 * cf) / (math.exp(7 * cf) + math.exp(7 * cb))
            assert p[i, j] == pytest.approx(want, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.floats(1e-3, 1e3))
def test_predict_open_interval_and_scale_invariance(seed, alpha):
    r = np.random.default_rng(seed)
    f = r.standard_normal((3, 3, 3))
    proto = Prototype(Tensor(r.standard_normal(3)), Tensor(r.standard_normal(3)))
    p = predict(Tensor(f), proto).data
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(predict(Tensor(alpha * f), proto).data, p, atol=1e-12)


# ------------------------------------------------------------------ segment


def pointwise_model(seed):
    # 1x1 convs: features at a cell depend only on that cell's pixels
    r = np.random.default_rng(seed)
    stages, c_prev = [], 3
    for si, c in enumerate((4, 6, 8), start=1):
        w = np.abs(r.standard_normal((c, c_prev, 1, 1)))  # keeps relu live
        stages.append([ConvBlock(f"stage{si}.block0.conv0", Tensor(w), Tensor(np.zeros(c)), 1, 0)])
        c_prev = c
    return LayeredModel(stages, 3)


@pytest.mark.parametrize("seed", range(5))
def test_segment_self_match_fixed_point(seed):
    r = np.random.default_rng(seed)
    m = pointwise_model(seed)
    mask = np.zeros((32, 32))
    y, x = (int(v) for v in 4 * r.integers(0, 5, 2))
    mask[y : y + 12, x : x + 16] = 1
    img = np.zeros((3, 32, 32))
    img[:, mask == 0] = r.random(3)[:, None] + 0.05
    img[:, mask == 1] = r.random(3)[:, None] + 0.05
    s = ImageSample(img, mask)
    _, pred = segment(m, [s], s)
    want = resize_mask_nearest(resize_mask_nearest(mask, (8, 8)), (32, 32))
    np.testing.assert_array_equal(pred, want)


def test_segment_duplicate_supports_and_determinism(rng):
    m = default_backbone(2)
    s = ImageSample(rng.random((3, 16, 16)), random_mask(rng, (16, 16)))
    q = ImageSample(rng.random((3, 16, 16)), random_mask(rng, (16, 16)))
    p1, m1 = segment(m, [s], q)
    p2, m2 = segment(m, [s, s], q)
    np.testing.assert_allclose(p1.data, p2.data, atol=1e-15)
    np.testing.assert_array_equal(m1, m2)
    p3, m3 = segment(m, [s], q)
    assert p1.data.tobytes() == p3.data.tobytes()
    with pytest.raises(ContractError):
        segment(m, [], q)


def test_segment_tie_is_background(monkeypatch, rng):
    import isa_fss.model as model_mod

    m = default_backbone(0)
    s = ImageSample(rng.random((3, 16, 16)), random_mask(rng, (16, 16)))
    monkeypatch.setattr(model_mod, "predict", lambda f, p, t: Tensor(np.full(f.shape[1:], 0.5)))
    _, pred = segment(m, [s], s)
    assert np.all(pred == 0)


def test_checkpoint_roundtrip(tmp_path):
    m = default_backbone(4)
    save_model(m, tmp_path / "ckpt")
    back = load_model(tmp_path / "ckpt")
    assert back.layer_names() == m.layer_names()
    for (k, a), (_, b) in zip(m.parameters().items(), back.parameters().items()):
        assert a.data.tobytes() == b.data.tobytes(), k
    with pytest.raises(ValueError):
        (tmp_path / "bad").mkdir()
        (tmp_path / "bad" / "manifest.json").write_text('{"format": "other"}')
        load_model(tmp_path / "bad")
