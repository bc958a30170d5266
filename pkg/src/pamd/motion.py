"""Motion representation, sequence containers, file I/O and synthetic dances.

A frame is 151 floats: 4 contact flags (left heel, left toe, right heel,
right toe), 24 joint rotations in 6D, and the root translation in meters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rotor import (CONTACT, FRAME_DIM, N_JOINTS, ROT, TRANS, UP, Skeleton, axis_angle_to_matrix,
                    default_skeleton, forward_kinematics, matrix_to_sixd, rotation_x)

FORMAT = "pamd/1"
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class SchemaError(ValueError):
    """A motion or conditioning document does not match the pamd/1 schema."""


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise SchemaError("empty sequence" if frames.size == 0 else
                              f"frames must be a 2-D array, got shape {frames.shape}")
        if frames.shape[1] != FRAME_DIM:
            raise SchemaError(f"frame width must be {FRAME_DIM}, got {frames.shape[1]}")
        if not np.all(np.isfinite(frames)):
            raise SchemaError("frames contain non-finite values")
        if not np.all(np.isin(frames[:, CONTACT], (0.0, 1.0))):
            raise SchemaError("contact flags must be 0 or 1")
        if not self.fps > 0:
            raise SchemaError("fps must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.fps

    def positions(self, skel: Skeleton) -> np.ndarray:
        return forward_kinematics(self.frames, skel)


@dataclass(frozen=True)
class Conditioning:
    features: np.ndarray
    beat_times: np.ndarray
    prior_frame: np.ndarray
    is_null: bool = False
    fps: float = 30.0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        beats = np.asarray(self.beat_times, dtype=np.float64).reshape(-1)
        prior = np.asarray(self.prior_frame, dtype=np.float64).reshape(-1)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise SchemaError(f"features must be a non-empty L x D matrix, got shape {feats.shape}")
        if beats.size > 1 and np.any(np.diff(beats) <= 0):
            raise SchemaError("beat_times must be strictly increasing")
        if prior.shape != (FRAME_DIM,):
            raise SchemaError(f"prior frame must have {FRAME_DIM} values, got {prior.size}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "beat_times", beats)
        object.__setattr__(self, "prior_frame", prior)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def null(self) -> "Conditioning":
        return replace(self, is_null=True)

    def crop(self, start: int, length: int) -> "Conditioning":
        """Frames [start, start + length), zero-padding past the end; beats re-expressed from the crop start."""
        if start < 0 or length < 1:
            raise ValueError("crop needs start >= 0 and length >= 1")
        feats = np.zeros((length, self.dim))
        avail = self.features[start:start + length]
        feats[:len(avail)] = avail
        t0 = start / self.fps
        beats = self.beat_times - t0
        beats = beats[(beats >= 0) & (beats < length / self.fps)]
        return replace(self, features=feats, beat_times=beats)


# ---------------------------------------------------------------------------
# presets

def standing_frame() -> np.ndarray:
    """Identity rotations, root at (0, 0.95, 0), all four contacts on."""
    f = np.zeros(FRAME_DIM)
    f[CONTACT] = 1.0
    f[ROT] = np.tile(IDENTITY_6D, N_JOINTS)
    f[TRANS] = (0.0, 0.95, 0.0)
    return f


def legs_open_frame(abduction: float = 0.3, skel: Skeleton | None = None) -> np.ndarray:
    """Hips abducted by ``abduction`` rad with the root lowered to keep the feet grounded."""
    skel = skel or default_skeleton()
    f = standing_frame()
    for hip, sign in ((skel.index("left_hip"), 1.0), (skel.index("right_hip"), -1.0)):
        start = ROT.start + 6 * hip
        f[start:start + 6] = matrix_to_sixd(axis_angle_to_matrix(np.array([0.0, 0.0, sign * abduction])))
    pos = forward_kinematics(f[None], skel)[0]
    f[TRANS.start + UP] -= pos[skel.index("left_ankle"), UP]
    return f


PRIORS = {"standing": standing_frame, "legs_open": legs_open_frame}


# ---------------------------------------------------------------------------
# I/O

def _read_doc(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    if doc.get("format", FORMAT) != FORMAT:
        raise SchemaError(f"{path}: field 'format' must be {FORMAT!r}, got {doc.get('format')!r}")
    return doc


def _matrix(doc, key, path, width=None):
    if key not in doc:
        raise SchemaError(f"{path}: missing field {key!r}")
    rows = doc[key]
    if not isinstance(rows, list):
        raise SchemaError(f"{path}: field {key!r} must be a list")
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise SchemaError(f"{path}: {key}[{i}] must be a list")
        if width is not None and len(row) != width:
            raise SchemaError(f"{path}: {key}[{i}] has {len(row)} values, expected width {width}")
    return rows


def motion_to_dict(seq: MotionSequence) -> dict:
    return {"format": FORMAT, "fps": seq.fps, "frames": seq.frames.tolist()}


def save_motion(seq: MotionSequence, path) -> None:
    Path(path).write_text(json.dumps(motion_to_dict(seq)))


def load_motion(path) -> MotionSequence:
    doc = _read_doc(path)
    frames = _matrix(doc, "frames", path, FRAME_DIM)
    if not frames:
        raise SchemaError(f"{path}: empty sequence")
    try:
        return MotionSequence(np.array(frames, dtype=np.float64), doc.get("fps", 30.0))
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def conditioning_to_dict(cond: Conditioning) -> dict:
    return {"format": FORMAT, "fps": cond.fps, "features": cond.features.tolist(),
            "beat_times": cond.beat_times.tolist(), "prior": cond.prior_frame.tolist()}


def save_conditioning(cond: Conditioning, path) -> None:
    Path(path).write_text(json.dumps(conditioning_to_dict(cond)))


def load_conditioning(path) -> Conditioning:
    doc = _read_doc(path)
    feats = _matrix(doc, "features", path)
    if not feats:
        raise SchemaError(f"{path}: empty features")
    widths = {len(r) for r in feats}
    if len(widths) != 1:
        raise SchemaError(f"{path}: feature rows have inconsistent widths {sorted(widths)}")
    prior = doc.get("prior")
    if prior is None:
        raise SchemaError(f"{path}: missing field 'prior'")
    if len(prior) != FRAME_DIM:
        raise SchemaError(f"{path}: field 'prior' has {len(prior)} values, expected width {FRAME_DIM}")
    try:
        return Conditioning(np.array(feats, dtype=np.float64), np.array(doc.get("beat_times", []), dtype=np.float64),
                            np.array(prior, dtype=np.float64), False, doc.get("fps", 30.0))
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# kinematic derivatives

def _frames_of(seq):
    if isinstance(seq, MotionSequence):
        return seq.frames, seq.fps
    return np.asarray(seq, dtype=np.float64), None


def velocities_from_positions(pos: np.ndarray, fps: float) -> np.ndarray:
    if pos.shape[0] < 2:
        raise ValueError("velocities need at least 2 frames")
    return np.gradient(pos, axis=0) * fps


def accelerations_from_positions(pos: np.ndarray, fps: float) -> np.ndarray:
    """Second differences; the two endpoints reuse their neighbour's stencil."""
    if pos.shape[0] < 3:
        raise ValueError("accelerations need at least 3 frames")
    acc = np.empty_like(pos)
    acc[1:-1] = pos[2:] - 2.0 * pos[1:-1] + pos[:-2]
    acc[0] = acc[1]
    acc[-1] = acc[-2]
    return acc * fps * fps


def joint_velocities(seq, skel: Skeleton, fps: float | None = None) -> np.ndarray:
    """L x 24 x 3 joint velocities (m/s): central differences, one-sided at the ends."""
    frames, f = _frames_of(seq)
    return velocities_from_positions(forward_kinematics(frames, skel), fps or f or 30.0)


def joint_accelerations(seq, skel: Skeleton, fps: float | None = None) -> np.ndarray:
    frames, f = _frames_of(seq)
    return accelerations_from_positions(forward_kinematics(frames, skel), fps or f or 30.0)


def compute_contact_labels(seq, skel: Skeleton, eps_v: float = 0.05, eps_h: float = 0.05,
                           fps: float | None = None) -> np.ndarray:
    """L x 4 flags: foot joint slower than eps_v and lower than eps_h."""
    if eps_v <= 0 or eps_h <= 0:
        raise ValueError("contact thresholds must be positive")
    frames, f = _frames_of(seq)
    pos = forward_kinematics(frames, skel)[:, list(skel.foot_joints)]
    if len(pos) < 2:
        return (pos[..., UP] < eps_h).astype(np.float64)
    speed = np.linalg.norm(velocities_from_positions(pos, fps or f or 30.0), axis=-1)
    return ((speed < eps_v) & (pos[..., UP] < eps_h)).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic beat-locked dances

# joint -> (axis, amplitude in rad); every joint swings along one axis
CHOREOGRAPHY = {
    "spine1": ((0.0, 1.0, 0.0), 0.25),
    "spine2": ((0.0, 0.0, 1.0), 0.15),
    "spine3": ((1.0, 0.0, 0.0), 0.10),
    "neck": ((0.0, 0.0, 1.0), 0.15),
    "head": ((1.0, 0.0, 0.0), 0.20),
    "left_collar": ((0.0, 0.0, 1.0), 0.15),
    "right_collar": ((0.0, 0.0, 1.0), -0.15),
    "left_shoulder": ((0.0, 0.0, 1.0), 0.40),
    "right_shoulder": ((0.0, 0.0, 1.0), 0.40),
    "left_elbow": ((0.0, 1.0, 0.0), 0.40),
    "right_elbow": ((0.0, 1.0, 0.0), -0.40),
    "left_wrist": ((1.0, 0.0, 0.0), 0.30),
    "right_wrist": ((1.0, 0.0, 0.0), 0.30),
}


@dataclass(frozen=True)
class SynthConfig:
    seconds: float = 5.0
    fps: float = 30.0
    n_beats: int = 10
    seed: int = 0
    feature_dim: int = 32
    root_low: float = 0.88
    bounce: float = 0.04
    lift: float = 0.12


def beat_grid(n_frames: int, n_beats: int, rng: np.random.Generator) -> tuple[int, int]:
    """(first beat frame, period in frames) with every grid beat >= 2 frames from the ends.

    Exactly ``n_beats`` grid points fall inside the clip. Periods are tried
    outward from n_frames // n_beats; the first that admits a valid first
    beat wins.
    """
    p0 = n_frames // max(n_beats, 1)
    for period in sorted(range(5, n_frames + 1), key=lambda p: (abs(p - p0), -p)):
        lo = max(2, n_frames - n_beats * period)
        hi = min(period - 1, n_frames - 3 - (n_beats - 1) * period)
        if lo <= hi:
            return int(rng.integers(lo, hi + 1)), period
    raise ValueError(f"cannot place {n_beats} beats in {n_frames} frames")


def _two_link_ik(hip, ankle, l1, l2):
    """Sagittal two-link IK: hip/knee flexion (about x) putting the ankle at ``ankle``."""
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1)
    cos_k = np.clip((dist ** 2 - l1 ** 2 - l2 ** 2) / (2 * l1 * l2), -1.0, 1.0)
    knee = np.arccos(cos_k)
    v_y = -l1 - l2 * np.cos(knee)
    v_z = -l2 * np.sin(knee)
    hip_angle = np.arctan2(d[..., 2], d[..., 1]) - np.arctan2(v_z, v_y)
    hip_angle = (hip_angle + np.pi) % (2 * np.pi) - np.pi
    return hip_angle, knee


def synth_dance(cfg: SynthConfig = SynthConfig(), skel: Skeleton | None = None) -> tuple[MotionSequence, Conditioning]:
    """Beat-locked dance plus matching conditioning; deterministic per seed.

    Every joint's motion is symmetric about each beat frame, so all joint
    velocities vanish there. The root bounces vertically (cusps at beats,
    concave in between), one foot is always planted via two-link IK, and
    both feet are planted on the frames next to each beat.
    """
    if cfg.seconds <= 0 or cfg.fps <= 0 or cfg.n_beats < 2 or cfg.feature_dim < 9:
        raise ValueError(f"invalid synth config {cfg}")
    skel = skel or default_skeleton()
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.seconds * cfg.fps))
    b0, period = beat_grid(n, cfg.n_beats, rng)
    scale = rng.uniform(0.75, 1.0)

    i = np.arange(n)
    k = np.round((i - b0) / period).astype(int)
    dist = np.abs(i - (b0 + k * period))
    phase = np.where(k % 2 == 0, 1.0, -1.0) * np.cos(np.pi * dist / period)

    local = np.broadcast_to(np.eye(3), (n, N_JOINTS, 3, 3)).copy()
    for name, (axis, amp) in CHOREOGRAPHY.items():
        aa = np.outer(phase * amp * scale, axis)
        local[:, skel.index(name)] = axis_angle_to_matrix(aa)

    root = np.zeros((n, 3))
    root[:, UP] = cfg.root_low + cfg.bounce * np.sin(np.pi * dist / period)

    interval = np.floor_divide(i - b0, period)
    j = i - b0 - interval * period
    e = np.minimum(j - 1, period - 1 - j)
    lift = np.where(j == 0, 0.0, cfg.lift * np.sin(np.pi * np.maximum(e, 0) / (period - 2)) ** 2)
    for side, swing_parity in (("left", 0), ("right", 1)):
        hip_j, knee_j, ankle_j = (skel.index(f"{side}_{p}") for p in ("hip", "knee", "ankle"))
        l1 = np.linalg.norm(skel.rest_offset[knee_j])
        l2 = np.linalg.norm(skel.rest_offset[ankle_j])
        hip = root + skel.rest_offset[hip_j]
        target = np.zeros((n, 3))
        target[:, 0] = hip[:, 0]
        target[:, 2] = hip[:, 2]
        target[:, UP] = np.where(interval % 2 == swing_parity, lift, 0.0)
        hip_angle, knee = _two_link_ik(hip, target, l1, l2)
        local[:, hip_j] = rotation_x(hip_angle)
        local[:, knee_j] = rotation_x(knee)
        local[:, ankle_j] = rotation_x(-(hip_angle + knee))

    frames = np.zeros((n, FRAME_DIM))
    frames[:, ROT] = matrix_to_sixd(local).reshape(n, -1)
    frames[:, TRANS] = root
    frames[:, CONTACT] = compute_contact_labels(frames, skel, fps=cfg.fps)

    beats = b0 + period * np.arange(cfg.n_beats)
    feats = np.zeros((n, cfg.feature_dim))
    feats[:, 0] = np.exp(-0.5 * dist.astype(np.float64) ** 2)
    for m in range(1, 5):
        arg = m * np.pi * (i - b0) / period
        feats[:, 2 * m - 1] = np.cos(arg)
        feats[:, 2 * m] = np.sin(arg)
    cond = Conditioning(feats, beats / cfg.fps, standing_frame(), False, cfg.fps)
    return MotionSequence(frames, cfg.fps), cond
