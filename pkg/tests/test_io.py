import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from facefit import io
from facefit.fitter import FitConfig, FitParams
from facefit.losses import LossWeights
from facefit.morphable_model import Mesh

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def roundtrip_bytes(tmp_path, save, load, obj, name="x.txt"):
    a, b = tmp_path / ("a_" + name), tmp_path / ("b_" + name)
    save(a, obj)
    loaded = load(a)
    save(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    return loaded


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite),
       arrays(np.int64, st.integers(0, 5), elements=st.integers(-2**62, 2**62)))
def test_container_exact(a, b):
    text = io.dumps_container("thing", {"a": a, "b": b, "s": np.array(2.5)}, {"note": "hello world"})
    kind, arrs, meta = io.loads_container(text)
    assert kind == "thing" and meta == {"note": "hello world"}
    np.testing.assert_array_equal(arrs["a"], a)
    np.testing.assert_array_equal(arrs["b"], b)
    assert arrs["a"].shape == a.shape and arrs["s"].shape == ()
    assert io.dumps_container(kind, arrs, meta) == text


@pytest.mark.parametrize("text", ["", "nonsense 1\nkind x\nend\n", "facefit-container 99\nkind x\nend\n",
                                  "facefit-container 1\nend\n",
                                  "facefit-container 1\nkind x\narray a float64 1 3\n1 2\nend\n",
                                  "facefit-container 1\nkind x\nbogus\nend\n"])
def test_container_rejects_malformed(text):
    with pytest.raises(io.FormatError):
        io.loads_container(text)


def test_container_kind_mismatch(tmp_path):
    io.save_landmarks(tmp_path / "l.txt", np.zeros((3, 2)))
    with pytest.raises(io.FormatError):
        io.load_params(tmp_path / "l.txt")
    with pytest.raises(io.FormatError):
        io.load_params(tmp_path / "missing.txt")


def test_face_model_roundtrip(tmp_path, setup0):
    m = roundtrip_bytes(tmp_path, io.save_face_model, io.load_face_model, setup0.models)
    np.testing.assert_array_equal(m.shape.basis, setup0.models.shape.basis)
    np.testing.assert_array_equal(m.mesh.uv, setup0.models.mesh.uv)
    np.testing.assert_array_equal(m.mesh.landmark_indices, setup0.models.mesh.landmark_indices)
    assert m.uv_size == setup0.models.uv_size


def test_linear_model_roundtrip(tmp_path, setup0):
    m = roundtrip_bytes(tmp_path, io.save_linear_model, io.load_linear_model, setup0.models.expression)
    np.testing.assert_array_equal(m.stdev, setup0.models.expression.stdev)


def test_decoder_roundtrip(tmp_path, setup0):
    d = roundtrip_bytes(tmp_path, io.save_decoder, io.load_decoder, setup0.decoder)
    for (w0, b0), (w1, b1) in zip(setup0.decoder.layers, d.layers):
        np.testing.assert_array_equal(w0, w1)
        np.testing.assert_array_equal(b0, b1)


def test_feature_net_roundtrip(tmp_path, setup0):
    n = roundtrip_bytes(tmp_path, io.save_feature_net, io.load_feature_net, setup0.net)
    np.testing.assert_array_equal(n.head[0], setup0.net.head[0])
    np.testing.assert_array_equal(n.template, setup0.net.template)


def test_params_roundtrip(tmp_path, setup0, rng):
    ps = [FitParams.default(setup0.models, setup0.latent_dim) for _ in range(2)]
    ps[1].p_s[:] = rng.normal(size=ps[1].p_s.size)
    out = roundtrip_bytes(tmp_path, io.save_params, io.load_params, ps)
    assert len(out) == 2 and all(a.bitwise_equal(b) for a, b in zip(ps, out))


def test_float_image_and_landmarks(tmp_path, rng):
    img = rng.random((5, 4, 3))
    np.testing.assert_array_equal(roundtrip_bytes(tmp_path, io.save_float_image, io.load_float_image, img), img)
    np.testing.assert_array_equal(io.load_image(tmp_path / "a_x.txt"), img)
    lm = rng.normal(size=(68, 2))
    np.testing.assert_array_equal(roundtrip_bytes(tmp_path, io.save_landmarks, io.load_landmarks, lm, "l.txt"), lm)


@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_raster_images_are_lossless_in_uint8(tmp_path, rng, ext):
    img = rng.integers(0, 256, (7, 9, 3)) / 255.0
    # make sure pixel data that starts with whitespace bytes survives header parsing
    img[0, 0] = [10 / 255, 32 / 255, 9 / 255]
    save = io.save_png if ext == ".png" else io.save_ppm
    save(tmp_path / f"a{ext}", img)
    np.testing.assert_array_equal(io.load_image(tmp_path / f"a{ext}"), img)


def test_to_uint8_clips_and_rounds():
    np.testing.assert_array_equal(io.to_uint8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])), [0, 0, 128, 255, 255])


def test_ppm_rejects_other_types(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(io.FormatError):
        io.load_ppm(tmp_path / "a.ppm")


def test_obj_roundtrip(tmp_path, setup0):
    mesh = setup0.models.mesh
    out = roundtrip_bytes(tmp_path, io.save_obj, io.load_obj, mesh, "m.obj")
    np.testing.assert_array_equal(out.vertices, mesh.vertices)
    np.testing.assert_array_equal(out.triangles, mesh.triangles)
    np.testing.assert_array_equal(out.uv, mesh.uv)


def test_obj_fan_triangulation_and_negative_indices():
    text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -2 -1\n"
    mesh = io.loads_obj(text)
    np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3], [0, 2, 3]])
    assert mesh.uv is None


def test_obj_errors():
    with pytest.raises(io.FormatError):
        io.loads_obj("f 1 2 3\n")
    with pytest.raises(io.FormatError):
        io.loads_obj("v 0 0 x\n")


def test_trace_roundtrip(rng):
    rows = [{c: (i if c == "iter" else float(rng.normal())) for c in io.TRACE_COLUMNS} for i in range(4)]
    text = io.dumps_trace(rows, ["# a: 1", "# b: 2"])
    header, back = io.loads_trace(text)
    assert header == ["# a: 1", "# b: 2"] and back == rows
    assert io.dumps_trace(back, header) == text


def test_keyvalue_comments_and_errors():
    assert io.loads_keyvalue("a = 1 # note\n\n# only comment\nb=x = y\n") == {"a": "1", "b": "x = y"}
    with pytest.raises(io.FormatError):
        io.loads_keyvalue("just words\n")


def test_config_roundtrip(tmp_path):
    config = FitConfig(weights=LossWeights.desk(), lr=0.02, stage2_steps=7, seed=3).drop("pix")
    text = io.dumps_keyvalue(io.config_to_dict(config, {"texture": "pca"}))
    (tmp_path / "c.txt").write_text(text)
    back, extra = io.load_config(tmp_path / "c.txt")
    assert extra == {"texture": "pca"}
    assert back == config
    assert io.dumps_keyvalue(io.config_to_dict(back, extra)) == text


def test_config_partial_uses_defaults():
    config, extra = io.config_from_dict({"lr": "0.5", "weight.pix": "3"})
    assert config.lr == 0.5 and config.weights.pix == 3.0
    assert config.weights.con == LossWeights.desk().con and config.stage1_steps == FitConfig().stage1_steps


@pytest.mark.parametrize("items", [{"bogus": "1"}, {"lr": "fast"}, {"weight.nothing": "1"},
                                   {"stage2_steps": "1.5"}, {"drop": "nothing"}])
def test_config_errors(items):
    with pytest.raises(io.FormatError):
        io.config_from_dict(items)
