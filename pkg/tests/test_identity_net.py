import numpy as np
import pytest

from facefit import autodiff as ad
from facefit.identity_net import (
    AlignmentError,
    align_to_template,
    default_template,
    extract,
    init_feature_net,
    similarity_fit,
)
from facefit.losses import identity_loss


@pytest.fixture(scope="module")
def net():
    return init_feature_net(0)


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def test_identity_alignment_is_a_plain_resample(net, rng):
    img = rng.random((112, 112, 3))
    out, t = align_to_template(img, net.template, net.template)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(out.data, img, atol=1e-10)


def test_rotated_landmarks(net):
    tpl = net.template
    centre = tpl.mean(0)
    src = (tpl - centre) @ rot(np.pi / 2).T + centre
    t = similarity_fit(src, tpl)
    assert t.angle == pytest.approx(-np.pi / 2, abs=1e-10)
    assert t.residual < 1e-8


def test_scaled_landmarks(net):
    t = similarity_fit(2.0 * net.template, net.template)
    assert t.scale == pytest.approx(0.5, abs=1e-8)


def test_similarity_matches_closed_form(rng):
    src = rng.normal(size=(68, 2))
    s, theta, tr = 1.7, 0.4, np.array([3.0, -2.0])
    dst = s * src @ rot(theta).T + tr
    t = similarity_fit(src, dst)
    assert (t.scale, t.angle) == pytest.approx((s, theta), abs=1e-10)
    np.testing.assert_allclose(t.translation, tr, atol=1e-10)
    np.testing.assert_allclose(t.inverse_apply(t.apply(src)), src, atol=1e-12)


def test_degenerate_landmarks(net):
    with pytest.raises(AlignmentError):
        similarity_fit(np.ones((68, 2)), net.template)
    with pytest.raises(AlignmentError):
        similarity_fit(np.zeros((1, 2)), np.zeros((1, 2)))


def test_extract_shapes_follow_strides(net, rng):
    stack = extract(net, rng.random((112, 112, 3)))
    assert [x.shape for x in stack.intermediates] == [(56, 56, 8), (28, 28, 16), (14, 14, 32), (7, 7, 64)]
    assert net.layer_shapes() == [(56, 56, 8), (28, 28, 16), (14, 14, 32), (7, 7, 64)]
    assert stack.embedding.shape == (64,)


def test_extract_is_deterministic(net, rng):
    img = rng.random((112, 112, 3))
    a, b = extract(net, img), extract(net, img)
    assert a.embedding.data.tobytes() == b.embedding.data.tobytes()
    for x, y in zip(a.intermediates, b.intermediates):
        assert x.data.tobytes() == y.data.tobytes()


def test_zero_image_embedding_fixed_per_seed(net):
    e = extract(net, np.zeros((112, 112, 3))).embedding.data
    assert np.all(np.isfinite(e))
    again = extract(init_feature_net(0), np.zeros((112, 112, 3))).embedding.data
    other = extract(init_feature_net(1), np.zeros((112, 112, 3))).embedding.data
    assert e.tobytes() == again.tobytes()
    assert not np.array_equal(e, other)


def test_wrong_input_size(net):
    with pytest.raises(ValueError):
        extract(net, np.zeros((64, 64, 3)))


def test_embedding_pixel_gradient(net, rng):
    base = rng.random((112, 112, 3))
    picks = rng.choice(112 * 112 * 3, size=5, replace=False)
    select = np.zeros((112 * 112 * 3, 5))
    select[picks, np.arange(5)] = 1.0

    def f(x):
        img = ad.reshape(ad.add(base.reshape(-1), ad.matmul(select, x)), (112, 112, 3))
        return extract(net, img).embedding[0]

    assert ad.check_gradient(f, {"x": np.zeros(5)}, h=1e-4) < 1e-5


def test_embedding_not_flat(setup0):
    from facefit.scene import generate_scene

    embs = []
    for seed in (11, 12):
        view = generate_scene(seed, 1, setup0).views[0]
        aligned, _ = align_to_template(view.image, view.landmarks, setup0.net.template)
        embs.append(extract(setup0.net, aligned).embedding)
    assert identity_loss(*embs).item() > 0.01


def test_default_template_shape():
    tpl = default_template()
    assert tpl.shape == (68, 2)
    assert tpl.min() > 0 and tpl.max() < 112
