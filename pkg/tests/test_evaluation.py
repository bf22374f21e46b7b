import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.spatial.transform import Rotation

from facefit.evaluation import (
    EvaluationError,
    RigidTransform,
    crop_radius,
    evaluate_pair,
    icp_align,
    point_to_plane,
    point_to_plane_details,
)
from facefit.morphable_model import Mesh, synth_model


def grid_mesh(nx, ny, jitter=0.0, seed=0, z=None):
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float))
    v = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    v[:, :2] += rng.uniform(-jitter, jitter, (nx * ny, 2))
    v[:, 2] = rng.normal(0, 0.3, nx * ny) if z is None else z
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            tris += [[a, a + 1, a + nx + 1], [a, a + nx + 1, a + nx]]
    return Mesh(v, np.array(tris))


def oracle_normals(mesh):
    n = np.zeros((mesh.n_vertices, 3))
    for a, b, c in mesh.triangles:
        pa, pb, pc = mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]
        e1, e2 = pb - pa, pc - pa
        face = np.array([e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]])
        for k in (a, b, c):
            n[k] += face
    out = []
    for row in n:
        length = np.sqrt(row[0] ** 2 + row[1] ** 2 + row[2] ** 2)
        out.append(row / length if length > 0 else row)
    return np.array(out)


def oracle_one_way(a, b):
    normals = oracle_normals(b)
    total = 0.0
    for p in a.vertices:
        best, best_d = -1, np.inf
        for k, q in enumerate(b.vertices):
            d = np.sqrt(((p - q) ** 2).sum())
            if d < best_d:
                best, best_d = k, d
        n = normals[best]
        diff = p - b.vertices[best]
        total += abs(n[0] * diff[0] + n[1] * diff[1] + n[2] * diff[2]) if n.any() else best_d
    return total / a.n_vertices


def oracle_point_to_plane(a, b):
    return 0.5 * (oracle_one_way(a, b) + oracle_one_way(b, a))


@pytest.fixture(scope="module")
def face():
    return synth_model(0).mesh


# ---------------------------------------------------------------------------
# ICP

def test_icp_identity(face):
    t = icp_align(face, face)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)
    assert t.residual < 1e-12


def test_icp_recovers_known_transform(face):
    rot = Rotation.from_euler("xyz", [3.0, -2.0, 3.0], degrees=True).as_matrix()
    trans = np.array([0.02, -0.01, 0.02])
    t = icp_align(face, face.with_vertices(face.vertices @ rot.T + trans))
    angle = np.degrees(np.arccos(np.clip((np.trace(t.rotation.T @ rot) - 1) / 2, -1, 1)))
    assert angle < 0.1
    assert np.abs(t.translation - trans).max() < 1e-3


def test_icp_rotation_is_proper(face):
    rot = Rotation.from_euler("z", 10.0, degrees=True).as_matrix()
    t = icp_align(face, face.with_vertices(face.vertices @ rot.T))
    np.testing.assert_allclose(t.rotation @ t.rotation.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_icp_residual_non_increasing(seed):
    rng = np.random.default_rng(seed)
    src = grid_mesh(6, 6, 0.2, seed)
    rot = Rotation.from_rotvec(rng.normal(0, 0.1, 3)).as_matrix()
    dst = src.with_vertices(src.vertices @ rot.T + rng.normal(0, 0.2, 3) + rng.normal(0, 0.02, src.vertices.shape))
    hist = np.array(icp_align(src, dst).history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_icp_equivariance(face, rng):
    other = face.with_vertices(face.vertices + rng.normal(0, 0.01, face.vertices.shape) + [0.02, 0, 0])
    base = icp_align(face, other).residual
    r = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    rotated = icp_align(face.with_vertices(face.vertices @ r.T), other.with_vertices(other.vertices @ r.T)).residual
    assert rotated == pytest.approx(base, abs=1e-9)


def test_icp_with_scale(face):
    c = face.vertices.mean(0)
    t = icp_align(face, face.with_vertices(1.05 * (face.vertices - c) + c), with_scale=True)
    assert t.scale == pytest.approx(1.05, rel=1e-9)


def test_icp_errors(face):
    with pytest.raises(EvaluationError):
        icp_align(np.zeros((0, 3)), face)
    with pytest.raises(EvaluationError):
        icp_align(face.vertices * np.nan, face)


def test_compose():
    a = RigidTransform(Rotation.from_rotvec([0, 0, 0.3]).as_matrix(), np.array([1.0, 0, 0]))
    b = RigidTransform(Rotation.from_rotvec([0.2, 0, 0]).as_matrix(), np.array([0, 2.0, 0]))
    p = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-15)


# ---------------------------------------------------------------------------
# cropping

def test_crop_infinite_radius_keeps_everything(face):
    out = crop_radius(face, 0, np.inf)
    np.testing.assert_array_equal(out.vertices, face.vertices)
    np.testing.assert_array_equal(out.triangles, face.triangles)


def test_crop_zero_radius_is_empty(face):
    with pytest.raises(EvaluationError):
        crop_radius(face, 10, 0.0)


def test_crop_hand_enumerated_corner():
    mesh = grid_mesh(4, 4, z=np.zeros(16))
    out = crop_radius(mesh, 0, 1.5)
    # within 1.5 of (0, 0): (0,0) (1,0) (0,1) (1,1); (2,0) is at distance 2
    np.testing.assert_array_equal(out.vertices, [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    np.testing.assert_array_equal(out.triangles, [[0, 1, 3], [0, 3, 2]])


def test_crop_boundary_is_exclusive():
    mesh = grid_mesh(4, 4, z=np.zeros(16))
    assert crop_radius(mesh, 0, 1.0).n_vertices == 1
    assert crop_radius(mesh, 0, 1.0 + 1e-12).n_vertices == 3


# ---------------------------------------------------------------------------
# point to plane

def test_identical_meshes_give_zero(face):
    assert point_to_plane(face, face) == 0.0


def test_planar_offset_is_exact():
    plane = grid_mesh(5, 5, z=np.zeros(25))
    for d in (1.0, 0.25, 3.5):
        assert point_to_plane(plane, plane.with_vertices(plane.vertices + [0, 0, d])) == d


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_double_loop_oracle(seed):
    a = grid_mesh(5, 10, 0.3, seed)
    b = grid_mesh(5, 10, 0.3, seed + 1)
    assert a.n_vertices == 50
    assert point_to_plane(a, b) == pytest.approx(oracle_point_to_plane(a, b), abs=1e-12)


def test_symmetric(rng):
    a, b = grid_mesh(5, 6, 0.3, 1), grid_mesh(6, 5, 0.3, 2)
    assert point_to_plane(a, b) == pytest.approx(point_to_plane(b, a), abs=1e-12)


def test_degenerate_normals_fall_back():
    a = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 3, 1.0]]), np.array([[0, 1, 2]]))
    b = a.with_vertices(a.vertices + [0, 0, 0.5])
    res = point_to_plane_details(a, b)
    assert res.fallbacks == 2  # the isolated vertex in each direction
    assert res.distance == pytest.approx(0.5)


def test_evaluate_pair_identity(face):
    row = evaluate_pair(face, face, center_vertex=250, radius=95.0)
    assert row.distance < 1e-12 and row.residual < 1e-12
    assert row.n_pred == row.n_gt == face.n_vertices
