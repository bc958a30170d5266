import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pamd.rotor import (
    FRAME_DIM, ROT, TRANS, DegenerateRotation, Skeleton, axis_angle_to_matrix, axis_angle_to_quat, canonical_quat,
    forward_kinematics, frame_to_posequat, load_skeleton, matrix_to_quat, matrix_to_sixd, posequat_to_rot6d,
    quat_angle, quat_to_matrix, quat_to_sixd, save_skeleton, sixd_to_matrix,
)
from pamd.motion import standing_frame


def random_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    return quat_to_matrix(q / np.linalg.norm(q, axis=1, keepdims=True))


def set_joint(frame, j, R):
    out = frame.copy()
    out[ROT.start + 6 * j:ROT.start + 6 * j + 6] = matrix_to_sixd(R)
    return out


def test_skeleton_invariants(skel):
    assert skel.n_joints == 24
    assert sum(p < 0 for p in skel.parent) == 1
    assert all(skel.parent[i] < i for i in range(1, 24))
    assert len(set(skel.foot_joints)) == 4


def test_skeleton_rejects_bad_tree(skel):
    parent = list(skel.parent)
    parent[5] = 7
    with pytest.raises(ValueError):
        Skeleton(parent, skel.rest_offset, skel.foot_joints, skel.names)


def test_skeleton_file_round_trip(skel, tmp_path):
    save_skeleton(skel, tmp_path / "s.json")
    back = load_skeleton(tmp_path / "s.json")
    assert back.parent == skel.parent
    np.testing.assert_array_equal(back.rest_offset, skel.rest_offset)


def test_sixd_examples():
    np.testing.assert_array_equal(sixd_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(sixd_to_matrix([0, 1, 0, -1, 0, 0]), rz, atol=1e-15)
    np.testing.assert_allclose(sixd_to_matrix([2, 0, 0, 1, 1, 0]), np.eye(3), atol=1e-15)


def test_sixd_degenerate():
    with pytest.raises(DegenerateRotation):
        sixd_to_matrix([1, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateRotation):
        sixd_to_matrix([0, 0, 0, 0, 1, 0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_sixd_always_proper(r):
    a, b = r[:3], r[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * max(np.linalg.norm(b), 1e-3):
        return
    R = sixd_to_matrix(r)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)


def test_quaternion_examples():
    np.testing.assert_array_equal(matrix_to_quat(np.eye(3)), [1, 0, 0, 0])
    np.testing.assert_allclose(matrix_to_quat(axis_angle_to_matrix([math.pi, 0, 0])), [0, 1, 0, 0], atol=1e-15)


def test_thousand_round_trips(rng):
    R = random_rotations(rng, 1000)
    assert np.abs(quat_to_matrix(matrix_to_quat(R)) - R).max() < 1e-9
    assert np.abs(sixd_to_matrix(matrix_to_sixd(R)) - R).max() < 1e-8
    q = canonical_quat(rng.normal(size=(1000, 4)))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    assert np.abs(matrix_to_quat(sixd_to_matrix(quat_to_sixd(q))) - q).max() < 1e-8


def test_canonical_hemisphere(rng):
    q = matrix_to_quat(random_rotations(rng, 200))
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)


def test_posequat_examples(rng):
    np.testing.assert_array_equal(frame_to_posequat(standing_frame()), np.tile([1.0, 0, 0, 0], (24, 1)))
    f = set_joint(standing_frame(), 5, axis_angle_to_matrix([0, math.pi / 2, 0]))
    q = frame_to_posequat(f)
    np.testing.assert_allclose(q[5], [math.sqrt(0.5), 0, math.sqrt(0.5), 0], atol=1e-15)
    np.testing.assert_array_equal(np.delete(q, 5, axis=0), np.tile([1.0, 0, 0, 0], (23, 1)))
    frames = rng.normal(size=(20, FRAME_DIM))
    np.testing.assert_allclose(np.linalg.norm(frame_to_posequat(frames), axis=-1), 1.0, atol=1e-9)


def test_posequat_embedding_identity(rng):
    q = canonical_quat(rng.normal(size=(24, 4)))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    frame = standing_frame()
    frame[ROT] = posequat_to_rot6d(q)
    assert np.abs(frame_to_posequat(frame) - q).max() < 1e-8


def test_quat_angle(rng):
    a = axis_angle_to_quat([0, 0.3, 0])
    b = axis_angle_to_quat([0, 1.0, 0])
    assert quat_angle(a, b) == pytest.approx(0.7, abs=1e-12)
    assert quat_angle(a, a) == 0.0
    assert quat_angle(a, -a) == 0.0


def rest_chain(skel):
    pos = np.zeros((24, 3))
    for j in range(1, 24):
        pos[j] = pos[skel.parent[j]] + skel.rest_offset[j]
    return pos


def test_fk_identity_is_rest_chain(skel):
    frame = standing_frame()
    frame[TRANS] = 0.0
    assert np.abs(forward_kinematics(frame, skel) - rest_chain(skel)).max() < 1e-9


def test_fk_translation(skel):
    frame = standing_frame()
    frame[TRANS] = [0, 0, 1]
    expected = rest_chain(skel) + [0, 0, 1]
    assert np.abs(forward_kinematics(frame, skel) - expected).max() < 1e-9


def test_fk_root_yaw_mirrors_horizontal(skel):
    frame = standing_frame()
    base = forward_kinematics(frame, skel)
    turned = forward_kinematics(set_joint(frame, 0, axis_angle_to_matrix([0, math.pi, 0])), skel)
    root = frame[TRANS]
    rel_a, rel_b = base - root, turned - root
    assert np.abs(rel_b[:, [0, 2]] + rel_a[:, [0, 2]]).max() < 1e-9
    assert np.abs(rel_b[:, 1] - rel_a[:, 1]).max() < 1e-9


def test_fk_root_equivariance(skel, rng):
    frame = rng.normal(size=FRAME_DIM)
    R = random_rotations(rng, 1)[0]
    root = sixd_to_matrix(frame[ROT.start:ROT.start + 6])
    turned = set_joint(frame, 0, R @ root)
    t = frame[TRANS]
    expected = t + (forward_kinematics(frame, skel) - t) @ R.T
    assert np.abs(forward_kinematics(turned, skel) - expected).max() < 1e-9


def test_fk_batched_matches_single(skel, rng):
    frames = rng.normal(size=(5, FRAME_DIM))
    batch = forward_kinematics(frames, skel)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], forward_kinematics(frames[i], skel))


def test_canonical_quat_idempotent(rng):
    q = canonical_quat(rng.normal(size=(100, 4)))
    np.testing.assert_array_equal(canonical_quat(q), q)
