import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from facefit import autodiff as ad
from facefit.identity_net import FeatureStack
from facefit.losses import (
    EnergyTerms,
    LossWeights,
    content_loss,
    identity_loss,
    landmark_loss,
    pixel_loss,
    regularization,
    total_energy,
    unweighted,
)
from facefit.renderer import DEFAULT_LIGHT

vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).map(np.array)


def stack(*layers):
    return FeatureStack(ad.const(np.zeros(2)), [ad.const(np.asarray(x, dtype=float)) for x in layers])


def test_identity_loss_cases():
    a = np.array([1.0, 2.0, -0.5])
    assert identity_loss(a, a).item() == pytest.approx(0.0, abs=1e-15)
    assert identity_loss(a, -a).item() == pytest.approx(2.0, abs=1e-15)
    assert identity_loss([1.0, 0.0], [0.0, 3.0]).item() == 1.0


@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_identity_loss_range_and_scale_invariance(a, b, c):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    val = identity_loss(a, b).item()
    assert -1e-12 <= val <= 2 + 1e-12
    assert identity_loss(a, c * a).item() == pytest.approx(0.0, abs=1e-12)


def test_identity_loss_errors():
    with pytest.raises(ValueError):
        identity_loss(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        identity_loss(np.ones(3), np.ones(4))


def test_content_loss_hand_case():
    assert content_loss(stack(np.zeros((2, 2, 1))), stack(np.ones((2, 2, 1)))).item() == 0.5


def test_content_loss_identical_and_homogeneous(rng):
    layers_a = [rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 2, 3))]
    layers_b = [rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 2, 3))]
    assert content_loss(stack(*layers_a), stack(*layers_a)).item() == 0.0
    one = content_loss(stack(*layers_a), stack(*layers_b)).item()
    two = content_loss(stack(*[2 * x for x in layers_a]), stack(*[2 * x for x in layers_b])).item()
    assert two == pytest.approx(2 * one, rel=1e-14)


def test_content_loss_shape_mismatch():
    with pytest.raises(ValueError):
        content_loss(stack(np.zeros((2, 2, 1))), stack(np.zeros((2, 3, 1))))
    with pytest.raises(ValueError):
        content_loss(stack(np.zeros((2, 2, 1))), stack(np.zeros((2, 2, 1)), np.zeros(1)))


def test_pixel_loss_cases(rng):
    img = rng.random((5, 6, 3))
    assert pixel_loss(img, img).item() == 0.0
    assert pixel_loss(np.ones((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((4, 4), bool)).item() == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pixel_loss_matches_elementwise_scan(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    mask = rng.random((6, 5)) < 0.5
    mask[0, 0] = True
    total, count = 0.0, 0
    for i in range(6):
        for j in range(5):
            if mask[i, j]:
                for c in range(3):
                    total += abs(a[i, j, c] - b[i, j, c])
                    count += 1
    assert pixel_loss(a, b, mask).item() == pytest.approx(total / count, rel=1e-13)


def test_pixel_loss_empty_mask(rng):
    with pytest.raises(ValueError):
        pixel_loss(rng.random((3, 3, 3)), rng.random((3, 3, 3)), np.zeros((3, 3), bool))


def test_landmark_loss_cases(rng):
    lm = rng.normal(size=(68, 2)) * 30
    assert landmark_loss(lm, lm).item() == 0.0
    assert landmark_loss(lm, lm + [3.0, 4.0]).item() == 5.0
    moved = lm.copy()
    moved[7] += [1.0, 0.0]
    assert landmark_loss(lm, moved).item() == pytest.approx(1 / 68, rel=1e-12)


def test_regularization_cases(setup0, rng):
    m = setup0.models
    shape, light = regularization(np.zeros(40), np.zeros(10), DEFAULT_LIGHT, m)
    assert shape.item() == 0.0 and light.item() == 0.0
    shape, _ = regularization(m.shape.stdev.copy(), np.zeros(10), DEFAULT_LIGHT, m)
    assert shape.item() == pytest.approx(40.0, rel=1e-14)

    p_s, p_e, p_l = rng.normal(size=40), rng.normal(size=10), rng.normal(size=9)
    shape, light = regularization(p_s, p_e, p_l, m)
    expect_shape = sum((p_s[i] / m.shape.stdev[i]) ** 2 for i in range(40)) + \
        sum((p_e[i] / m.expression.stdev[i]) ** 2 for i in range(10))
    expect_light = sum((p_l[i] - DEFAULT_LIGHT[i]) ** 2 for i in range(9))
    assert shape.item() == pytest.approx(expect_shape, rel=1e-12)
    assert light.item() == pytest.approx(expect_light, rel=1e-12)


def _terms(*values):
    return EnergyTerms(*[ad.const(np.array(float(v))) for v in values])


def test_total_with_reference_weights():
    total, breakdown = total_energy(_terms(1, 1, 1, 1, 1, 0, 0), LossWeights())
    assert total.item() == pytest.approx(2 + 2 + 50 + 1 + 0.001, abs=1e-12)
    assert breakdown["con"] == 50.0


def test_pixel_only_weights():
    w = LossWeights(id=0, id_hat=0, con=0, pix=1, lan=0, reg_shape=0, reg_light=0)
    total, _ = total_energy(_terms(0.3, 0.2, 0.1, 0.0, 4.0, 9.0, 1.0), w)
    assert total.item() == 0.0


@given(st.lists(st.floats(0, 100), min_size=7, max_size=7), st.lists(st.floats(0, 100), min_size=7, max_size=7))
def test_breakdown_sums_to_total(values, weights):
    total, breakdown = total_energy(_terms(*values), LossWeights(*weights))
    parts = sum(v for k, v in breakdown.items() if k != "total")
    assert parts == pytest.approx(total.item(), abs=1e-12 * max(1.0, abs(total.item())))
    assert breakdown["total"] == total.item()


def test_weights_validation_and_drop():
    with pytest.raises(ValueError):
        LossWeights(id=-1.0)
    with pytest.raises(ValueError):
        LossWeights(pix=float("nan"))
    w = LossWeights().drop("id")
    assert w.id == 0.0 and w.id_hat == 2.0
    w = LossWeights().drop("reg")
    assert w.reg_shape == 0.0 and w.reg_light == 0.0
    with pytest.raises(ValueError):
        LossWeights().drop("nope")


def test_unweighted_reads_values():
    assert unweighted(_terms(1, 2, 3, 4, 5, 6, 7)) == {"id": 1, "id_hat": 2, "con": 3, "pix": 4, "lan": 5,
                                                      "reg_shape": 6, "reg_light": 7}
