"""Rotation conversions (6D, matrix, quaternion, axis-angle) and forward kinematics.

Conventions: the 6D representation stores the first two *columns* of a
rotation matrix; quaternions are ``(w, x, y, z)`` in the ``w >= 0``
hemisphere; +y is up and the ground plane is y = 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .gradtape import Graph, Node, _gram_schmidt, quat_from_matrix_core

N_JOINTS = 24
FRAME_DIM = 151
CONTACT = slice(0, 4)
ROT = slice(4, 148)
TRANS = slice(148, 151)
UP = 1


class DegenerateRotation(ValueError):
    """6D input with a zero or parallel column pair, or a non-orthonormal matrix."""


@dataclass(frozen=True)
class Skeleton:
    parent: tuple
    rest_offset: np.ndarray
    foot_joints: tuple
    names: tuple

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_offset", np.asarray(self.rest_offset, dtype=np.float64))
        object.__setattr__(self, "foot_joints", tuple(int(j) for j in self.foot_joints))
        object.__setattr__(self, "names", tuple(self.names))
        n = len(parent)
        if sum(1 for p in parent if p < 0) != 1 or parent[0] >= 0:
            raise ValueError("skeleton needs exactly one root, at index 0")
        if any(not 0 <= p < i for i, p in enumerate(parent) if i > 0):
            raise ValueError("parent[i] must satisfy 0 <= parent[i] < i for non-root joints")
        if self.rest_offset.shape != (n, 3):
            raise ValueError(f"rest_offset must be {n}x3, got {self.rest_offset.shape}")
        if len(set(self.foot_joints)) != 4 or any(not 0 <= j < n for j in self.foot_joints):
            raise ValueError("foot_joints needs 4 distinct valid joint indices")
        if len(self.names) != n:
            raise ValueError("one name per joint required")

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def descendants(self, k: int) -> set:
        out = {k}
        for i, p in enumerate(self.parent):
            if p in out:
                out.add(i)
        return out

    def to_dict(self) -> dict:
        return {"parent": list(self.parent), "rest_offset": self.rest_offset.tolist(),
                "foot_joints": list(self.foot_joints), "names": list(self.names)}


def load_skeleton(path) -> Skeleton:
    doc = json.loads(Path(path).read_text())
    return Skeleton(doc["parent"], doc["rest_offset"], doc["foot_joints"], doc["names"])


def save_skeleton(skel: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=1))


def default_skeleton() -> Skeleton:
    """24-joint SMPL tree with the bundled rest offsets (standing height 0.95 m)."""
    doc = json.loads(resources.files("pamd.data").joinpath("smpl24.json").read_text())
    return Skeleton(doc["parent"], doc["rest_offset"], doc["foot_joints"], doc["names"])


# ---------------------------------------------------------------------------
# conversions

def sixd_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1)
    if np.any(na < 1e-12):
        raise DegenerateRotation("6D rotation has a zero first column")
    a1 = a / na[..., None]
    bp = b - np.sum(a1 * b, axis=-1, keepdims=True) * a1
    if np.any(np.linalg.norm(bp, axis=-1) <= 1e-9 * np.maximum(np.linalg.norm(b, axis=-1), 1e-300)):
        raise DegenerateRotation("6D rotation has parallel (or zero) columns")
    return _gram_schmidt(r)[0]


def matrix_to_sixd(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def _check_orthonormal(m, tol=1e-6):
    eye = np.swapaxes(m, -1, -2) @ m
    if np.any(np.abs(eye - np.eye(3)) > tol) or np.any(np.linalg.det(m) < 0):
        raise DegenerateRotation("matrix is not a rotation within tolerance")


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    _check_orthonormal(m)
    q = quat_from_matrix_core(m)[0]
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical_quat(q) -> np.ndarray:
    """Normalize and flip into the w >= 0 hemisphere (ties broken on x, y, z).

    Idempotent: inputs already unit to 1e-12 are not rescaled.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(np.abs(n - 1.0) > 1e-12, q / n, q)
    key = np.where(q[..., 0] != 0, q[..., 0],
                   np.where(q[..., 1] != 0, q[..., 1], np.where(q[..., 2] != 0, q[..., 2], q[..., 3])))
    return np.where((key < 0)[..., None], -q, q)


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_to_sixd(q) -> np.ndarray:
    return matrix_to_sixd(quat_to_matrix(q))


def axis_angle_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle -> 1/2 as angle -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return canonical_quat(np.concatenate([np.cos(half), v * k], axis=-1))


def axis_angle_to_matrix(v) -> np.ndarray:
    return quat_to_matrix(axis_angle_to_quat(v))


def rotation_x(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(angle), np.zeros_like(angle)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_angle(a, b) -> np.ndarray:
    """Geodesic angle 2*acos(|<a, b>|) between unit quaternions.

    Evaluated as 4*atan2(|a - sb|, |a + sb|) with s the sign of the dot
    product: same value, but exactly 0 for equal inputs and well conditioned
    near 0 where acos is not.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    sb = s * b
    return 4.0 * np.arctan2(np.linalg.norm(a - sb, axis=-1), np.linalg.norm(a + sb, axis=-1))


def quat_slerp(a, b, t) -> np.ndarray:
    a = canonical_quat(a)
    b = np.asarray(b, dtype=np.float64)
    dot = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(dot < 0, -b, b)
    dot = np.abs(dot)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < a.ndim:
        t = t.reshape(t.shape + (1,) * (a.ndim - t.ndim))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin = np.sin(theta)
    near = sin < 1e-9
    safe = np.where(near, 1.0, sin)
    wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    wb = np.where(near, t, np.sin(t * theta) / safe)
    return canonical_quat(wa * a + wb * b)


# ---------------------------------------------------------------------------
# frames

def frame_rotations(frames) -> np.ndarray:
    """(..., 151) frames -> (..., 24, 3, 3) local joint rotations."""
    frames = np.asarray(frames, dtype=np.float64)
    six = frames[..., ROT].reshape(frames.shape[:-1] + (N_JOINTS, 6))
    return sixd_to_matrix(six)


def frame_to_posequat(frames) -> np.ndarray:
    """(..., 151) frames -> (..., 24, 4) canonical unit quaternions."""
    return canonical_quat(quat_from_matrix_core(frame_rotations(frames))[0])


def posequat_to_rot6d(quats) -> np.ndarray:
    """(..., 24, 4) quaternions -> (..., 144) flattened 6D block."""
    six = quat_to_sixd(quats)
    return six.reshape(six.shape[:-2] + (N_JOINTS * 6,))


def _rotate(m, v):
    # explicit sums keep results bitwise identical for identical inputs
    return (m[..., :, 0] * v[..., 0, None] + m[..., :, 1] * v[..., 1, None]
            + m[..., :, 2] * v[..., 2, None])


def _compose(a, b):
    return (a[..., :, 0, None] * b[..., None, 0, :] + a[..., :, 1, None] * b[..., None, 1, :]
            + a[..., :, 2, None] * b[..., None, 2, :])


def forward_kinematics(frames, skel: Skeleton, return_rotations: bool = False):
    """World joint positions (..., 24, 3) for (..., 151) frames."""
    frames = np.asarray(frames, dtype=np.float64)
    local = frame_rotations(frames)
    return fk_from_rotations(local, frames[..., TRANS], skel, return_rotations)


def fk_from_rotations(local, trans, skel: Skeleton, return_rotations: bool = False):
    n = skel.n_joints
    glob = [None] * n
    pos = [None] * n
    glob[0] = local[..., 0, :, :]
    pos[0] = np.asarray(trans, dtype=np.float64)
    for k in range(1, n):
        p = skel.parent[k]
        glob[k] = _compose(glob[p], local[..., k, :, :])
        pos[k] = pos[p] + _rotate(glob[p], np.broadcast_to(skel.rest_offset[k], pos[p].shape))
    positions = np.stack(pos, axis=-2)
    if return_rotations:
        return positions, np.stack(glob, axis=-3)
    return positions


def chain_joints(skel: Skeleton, joints) -> list:
    """Sorted ancestor closure of ``joints`` (root included)."""
    need = set()
    for j in joints:
        while j >= 0 and j not in need:
            need.add(j)
            j = skel.parent[j]
    return sorted(need)


def fk_graph(g: Graph, frames: Node, rows: int, skel: Skeleton, joints=None, prefix: str = "fk") -> Node:
    """Differentiable FK on a (rows, 151) node -> (rows, len(joints), 3) positions.

    ``joints`` defaults to all joints; only their ancestor chains are built.
    """
    joints = list(range(skel.n_joints)) if joints is None else list(joints)
    rot6 = g.slice(frames, 1, ROT.start, ROT.stop)
    mats = g.sixd_to_matrix(g.reshape(rot6, (rows, N_JOINTS, 6)))
    trans = g.slice(frames, 1, TRANS.start, TRANS.stop)
    glob, pos = {}, {}
    for k in chain_joints(skel, joints):
        local = g.reshape(g.slice(mats, 1, k, k + 1), (rows, 3, 3))
        if k == 0:
            glob[k], pos[k] = local, trans
            continue
        p = skel.parent[k]
        off = g.const(skel.rest_offset[k].reshape(3, 1), f"{prefix}_off{k}_{len(g.nodes)}")
        pos[k] = pos[p] + g.reshape(g.matmul(glob[p], off), (rows, 3))
        glob[k] = g.matmul(glob[p], local)
    cols = [g.reshape(pos[j], (rows, 1, 3)) for j in joints]
    return cols[0] if len(cols) == 1 else g.concat(cols, axis=1)
