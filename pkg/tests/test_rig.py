import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmdface.errors import DataError
from hmdface.rig import (BASIS_NAMES, N_BASES, N_GAZE, N_KEYPOINTS, REQUIRED_REGIONS, STANDARD_LAYOUT, FaceRig,
                         GazePair, Mesh, RigidPose, check_rotation, compute_normals, evaluate, gaze_to_weights,
                         keypoint_trajectory, load_rig, orthonormalize, rig_from_dict, rig_to_dict,
                         rotation_matrix, save_rig, yaw_pitch_rotation)

angles = st.floats(-np.pi / 2, np.pi / 2, allow_nan=False)


def random_rotation(rng):
    return rotation_matrix(rng.normal(size=3))


# ---------------------------------------------------------------- evaluate

def test_identity_case_is_neutral(rig):
    mesh = evaluate(rig, np.zeros(N_BASES), GazePair(), RigidPose.identity())
    assert np.array_equal(mesh.vertices, rig.vertices_neutral)


@pytest.mark.parametrize("k", [0, 17, 52])
def test_one_hot_adds_one_delta(rig, k):
    w = np.zeros(N_BASES)
    w[k] = 1.0
    mesh = evaluate(rig, w)
    assert np.array_equal(mesh.vertices, rig.vertices_neutral + rig.expr_deltas[k])


def test_midpoint_of_two_weightings(rig, rng):
    b1, b2 = rng.uniform(size=(2, N_BASES))
    mid = evaluate(rig, 0.5 * b1 + 0.5 * b2).vertices
    expected = 0.5 * evaluate(rig, b1).vertices + 0.5 * evaluate(rig, b2).vertices
    assert np.abs(mid - expected).max() < 1e-9


@given(st.integers(0, 2**31), st.floats(0, 1))
def test_linearity_property(rig, seed, alpha):
    r = np.random.default_rng(seed)
    b1, b2 = r.uniform(size=(2, N_BASES))
    lhs = evaluate(rig, alpha * b1 + (1 - alpha) * b2).vertices
    rhs = alpha * evaluate(rig, b1).vertices + (1 - alpha) * evaluate(rig, b2).vertices
    assert np.abs(lhs - rhs).max() < 1e-9


@given(st.integers(0, 2**31))
def test_rigid_equivariance(rig, seed):
    r = np.random.default_rng(seed)
    b = r.uniform(size=N_BASES)
    gaze = r.uniform(-1, 1, size=(2, 2))
    pose = RigidPose(random_rotation(r), r.normal(scale=50, size=3))
    posed = evaluate(rig, b, gaze, pose).vertices
    base = evaluate(rig, b, gaze).vertices
    assert np.abs(posed - (base @ pose.rotation.T + pose.translation)).max() < 1e-9


def test_gaze_adds_linearly(rig):
    g = np.array([[np.pi / 8, 0.0], [0.0, -np.pi / 4]])
    c = gaze_to_weights(g)
    mesh = evaluate(rig, np.zeros(N_BASES), g)
    assert np.allclose(mesh.vertices, rig.vertices_neutral + np.tensordot(c, rig.gaze_deltas, 1), atol=1e-12)


def test_evaluate_rejects_bad_weights(rig):
    with pytest.raises(DataError):
        evaluate(rig, np.zeros(52))
    with pytest.raises(DataError):
        evaluate(rig, np.full(N_BASES, 1.5))


def test_keypoint_trajectory_matches_evaluate(rig, rng):
    W = rng.uniform(size=(4, N_BASES))
    G = rng.uniform(-0.5, 0.5, size=(4, 2, 2))
    R = np.stack([random_rotation(rng) for _ in range(4)])
    t = rng.normal(size=(4, 3))
    K = keypoint_trajectory(rig, W, G, R, t)
    for i in range(4):
        v = evaluate(rig, W[i], G[i], RigidPose(R[i], t[i])).vertices[rig.keypoint_indices]
        assert np.abs(K[i] - v).max() < 1e-9


# ---------------------------------------------------------------- gaze

def test_neutral_gaze_gives_zero_weights():
    assert np.array_equal(gaze_to_weights(GazePair()), np.zeros(N_GAZE))


def test_saturated_left_yaw():
    w = gaze_to_weights(GazePair(left=(np.pi / 4, 0.0)))
    assert w[0] == 1.0
    assert np.all(w[1:4] == 0.0)


def test_half_left_half_down():
    w = gaze_to_weights(GazePair(left=(np.pi / 8, -np.pi / 8)))
    assert w[0] == pytest.approx(0.5, abs=1e-15)
    assert w[3] == pytest.approx(0.5, abs=1e-15)
    assert w[1] == 0.0 and w[2] == 0.0


def test_gaze_out_of_range():
    with pytest.raises(DataError):
        gaze_to_weights(GazePair(left=(2.0, 0.0)))


@given(angles, angles, angles, angles)
def test_gaze_weights_bounded_and_exclusive(a, b, c, d):
    w = gaze_to_weights(np.array([[a, b], [c, d]])).reshape(2, 4)
    assert np.all((w >= 0) & (w <= 1))
    for eye in w:
        assert eye[0] == 0.0 or eye[1] == 0.0


# ---------------------------------------------------------------- normals

def test_planar_quad_normals():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    m = compute_normals(Mesh(v, np.array([[0, 1, 2], [0, 2, 3]])))
    assert np.allclose(m.normals, [0, 0, 1], atol=1e-15)
    assert not m.degenerate.any()


def test_tetrahedron_normals():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    tri = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    m = compute_normals(Mesh(v, tri))
    # hand computation: face normals of a regular tetrahedron are the negated
    # opposite vertex directions; equal areas mean each vertex normal is the
    # normalised sum of its three face normals, which points along the vertex
    face = {f: -v[3 - f] / np.sqrt(3) for f in range(4)}  # face f omits vertex 3-f
    for i in range(4):
        s = sum(face[f] for f in range(4) if 3 - f != i)
        assert np.allclose(m.normals[i], s / np.linalg.norm(s), atol=1e-12)
        assert np.allclose(m.normals[i], v[i] / np.sqrt(3), atol=1e-12)


def test_degenerate_triangle_flagged():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    m = compute_normals(Mesh(v, np.array([[0, 1, 1]])))
    assert m.degenerate.all()
    assert np.all(np.isfinite(m.normals))


def test_empty_topology():
    with pytest.raises(DataError):
        compute_normals(Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int)))


def test_rig_normals_unit(rig):
    m = compute_normals(evaluate(rig, np.full(N_BASES, 0.3)))
    n = np.linalg.norm(m.normals[~m.degenerate], axis=1)
    assert np.abs(n - 1).max() < 1e-6


# ---------------------------------------------------------------- SO(3)

@given(st.integers(0, 2**31))
def test_rotation_matrix_in_so3(seed):
    R = rotation_matrix(np.random.default_rng(seed).normal(scale=2.0, size=3))
    check_rotation(R)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


def test_orthonormalize_restores_so3(rng):
    R = random_rotation(rng) + 1e-4 * rng.normal(size=(3, 3))
    check_rotation(orthonormalize(R))


def test_pose_rejects_reflection():
    with pytest.raises(DataError):
        RigidPose(np.diag([1.0, 1.0, -1.0]))


def test_yaw_pitch_rotation_axes():
    R = yaw_pitch_rotation(np.pi / 2, 0.0)
    assert np.allclose(R @ [0, 0, 1], [1, 0, 0], atol=1e-15)


# ---------------------------------------------------------------- rig validation and files

def test_rig_schema(rig):
    assert rig.expr_deltas.shape[0] == N_BASES
    assert rig.gaze_deltas.shape[0] == N_GAZE
    assert len(rig.keypoint_indices) == N_KEYPOINTS
    assert len(set(rig.keypoint_indices.tolist())) == N_KEYPOINTS
    for name in REQUIRED_REGIONS:
        assert len(rig.regions[name]) > 0
    assert len(BASIS_NAMES) == N_BASES
    for role in ("eye_close_l", "eye_close_r", "jaw_drop", "mouth_close"):
        STANDARD_LAYOUT.designated_index(role)


def test_rig_rejects_duplicate_keypoints(rig):
    kp = rig.keypoint_indices.copy()
    kp[1] = kp[0]
    with pytest.raises(DataError):
        FaceRig(rig.vertices_neutral, rig.triangles, rig.expr_deltas, rig.gaze_deltas, kp, rig.regions)


def test_rig_rejects_wrong_basis_count(rig):
    with pytest.raises(DataError):
        FaceRig(rig.vertices_neutral, rig.triangles, rig.expr_deltas[:52], rig.gaze_deltas,
                rig.keypoint_indices, rig.regions)


def test_rig_file_roundtrip(rig, tmp_path):
    p = tmp_path / "rig.json"
    save_rig(rig, p)
    doc = json.loads(p.read_text())
    assert {"vertices", "triangles", "expr_deltas", "gaze_deltas", "keypoints", "regions"} <= set(doc)
    back = load_rig(p)
    assert np.array_equal(back.vertices_neutral, rig.vertices_neutral)
    assert np.array_equal(back.expr_deltas, rig.expr_deltas)
    assert np.array_equal(back.keypoint_indices, rig.keypoint_indices)
    assert back.basis_names == rig.basis_names


def test_rig_from_dict_missing_field(rig):
    doc = rig_to_dict(rig)
    del doc["keypoints"]
    with pytest.raises(DataError):
        rig_from_dict(doc)
