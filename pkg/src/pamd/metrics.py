"""Dance quality metrics: beat alignment, foot contact, Frechet distances, diversity and physics rates."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.spatial.distance import pdist

from .motion import Conditioning, MotionSequence, accelerations_from_positions, velocities_from_positions
from .rotor import UP, Skeleton, forward_kinematics

HORIZONTAL = [0, 2]


def _frames(seq):
    if isinstance(seq, MotionSequence):
        return seq.frames, seq.fps
    return np.asarray(seq, dtype=np.float64), 30.0


# ---------------------------------------------------------------------------
# beats

def motion_beats(seq, skel: Skeleton, window: int = 5, fps: float | None = None) -> np.ndarray:
    """Frame indices of strict local minima of the smoothed mean joint speed."""
    frames, f = _frames(seq)
    if len(frames) < 3:
        raise ValueError("motion beats need at least 3 frames")
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd number")
    vel = velocities_from_positions(forward_kinematics(frames, skel), fps or f)
    speed = np.linalg.norm(vel, axis=-1).mean(axis=1)
    return speed_minima(uniform_filter1d(speed, window, mode="nearest"))


def speed_minima(curve, rtol: float = 1e-9) -> np.ndarray:
    """Strict local minima; dips smaller than rtol * max|curve| count as ties (FK rounding)."""
    c = np.asarray(curve, dtype=np.float64)
    tol = rtol * (np.abs(c).max() if c.size else 0.0)
    inner = (c[1:-1] < c[:-2] - tol) & (c[1:-1] < c[2:] - tol)
    return np.flatnonzero(inner) + 1


def beat_align_score(music_beats, dance_beats, sigma: float = 0.1) -> float:
    """Mean over music beats of exp(-d^2 / 2 sigma^2), d the gap to the nearest dance beat."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    music = np.asarray(music_beats, dtype=np.float64).reshape(-1)
    dance = np.asarray(dance_beats, dtype=np.float64).reshape(-1)
    if music.size == 0:
        raise ValueError("empty music beat set")
    if dance.size == 0:
        return 0.0
    gap = np.min(np.abs(music[:, None] - dance[None, :]), axis=1)
    return float(np.mean(np.exp(-gap ** 2 / (2 * sigma ** 2))))


def bas(seq, cond: Conditioning, skel: Skeleton, sigma: float = 0.1, window: int = 5) -> float:
    frames, fps = _frames(seq)
    return beat_align_score(cond.beat_times, motion_beats(frames, skel, window, fps) / fps, sigma)


# ---------------------------------------------------------------------------
# foot contact

def pfc(seq, skel: Skeleton, fps: float | None = None) -> float:
    """Root acceleration (upward part only) weighted by both toe speeds, normalized, x100."""
    frames, f = _frames(seq)
    if len(frames) < 3:
        raise ValueError("pfc needs at least 3 frames")
    fps = fps or f
    pos = forward_kinematics(frames, skel)
    acc = accelerations_from_positions(pos[:, 0], fps)
    acc[:, UP] = np.maximum(acc[:, UP], 0.0)
    a = np.linalg.norm(acc, axis=-1)
    toes = [skel.foot_joints[1], skel.foot_joints[3]]
    v = np.linalg.norm(velocities_from_positions(pos[:, toes], fps), axis=-1)
    top = a.max()
    if top == 0:
        return 0.0
    return float(np.sum(a * v[:, 0] * v[:, 1]) / (len(frames) * top) * 100.0)


def physics_report(seq, skel: Skeleton, skate_speed: float = 0.1, float_height: float = 0.08,
                   fps: float | None = None) -> dict:
    """Skating / floating frame rates and mean penetration depth."""
    frames, f = _frames(seq)
    if len(frames) < 2:
        raise ValueError("physics report needs at least 2 frames")
    pos = forward_kinematics(frames, skel)[:, list(skel.foot_joints)]
    vel = velocities_from_positions(pos, fps or f)
    hspeed = np.linalg.norm(vel[..., HORIZONTAL], axis=-1)
    contact = frames[:, :4] >= 0.5
    height = pos[..., UP]
    return {
        "skating": float(np.mean(np.any(contact & (hspeed > skate_speed), axis=1))),
        "floating": float(np.mean(np.all(height > float_height, axis=1))),
        "penetration": float(np.mean(np.maximum(0.0, -height.min(axis=1)))),
    }


# ---------------------------------------------------------------------------
# feature spaces

def extract_kinetic_features(seq, skel: Skeleton, fps: float | None = None) -> np.ndarray:
    """72 values: per joint mean speed, speed std and mean acceleration magnitude."""
    frames, f = _frames(seq)
    if len(frames) < 3:
        raise ValueError("kinetic features need at least 3 frames")
    fps = fps or f
    pos = forward_kinematics(frames, skel)
    speed = np.linalg.norm(velocities_from_positions(pos, fps), axis=-1)
    acc = np.linalg.norm(accelerations_from_positions(pos, fps), axis=-1)
    return np.stack([speed.mean(axis=0), speed.std(axis=0), acc.mean(axis=0)], axis=1).reshape(-1)


def load_predicates(path=None) -> dict:
    if path is None:
        text = resources.files("pamd.data").joinpath("geometric_predicates.json").read_text()
    else:
        text = open(path).read()
    return json.loads(text)


def _bent(pos, a, b, c):
    """Joint b bent beyond 90 degrees: the two segments point against each other."""
    u, w = pos[:, b] - pos[:, a], pos[:, c] - pos[:, b]
    return np.sum(u * w, axis=-1) < 0


def geometric_predicates(frames, skel: Skeleton, config: dict | None = None) -> np.ndarray:
    """(L, 32) boolean predicate table for each frame."""
    cfg = config or load_predicates()
    th = cfg["named"]
    frames = np.asarray(frames, dtype=np.float64)
    pos, rots = forward_kinematics(frames, skel, return_rotations=True)
    j = skel.index
    root = pos[:, 0]
    fwd = rots[:, 0, :, 2].copy()
    fwd[:, UP] = 0.0
    fwd /= np.maximum(np.linalg.norm(fwd, axis=-1, keepdims=True), 1e-12)
    cols = []
    for side in ("left", "right"):
        cols.append(pos[:, j(f"{side}_hand"), UP] - pos[:, j("head"), UP] > th["hand_above_head_threshold"])
    cols.append(np.linalg.norm(pos[:, j("left_hand")] - pos[:, j("right_hand")], axis=-1) < th["hands_close"])
    for side in ("left", "right"):
        cols.append(pos[:, j(f"{side}_foot"), UP] > th["foot_raised"])
    for side in ("left", "right"):
        cols.append(np.sum((pos[:, j(f"{side}_foot")] - root) * fwd, axis=-1) > th["foot_forward"])
    for side in ("left", "right"):
        cols.append(_bent(pos, j(f"{side}_shoulder"), j(f"{side}_elbow"), j(f"{side}_wrist")))
    for side in ("left", "right"):
        cols.append(_bent(pos, j(f"{side}_hip"), j(f"{side}_knee"), j(f"{side}_ankle")))
    cols.append(root[:, UP] < th["root_low"])
    for a, b, limit in cfg["pairwise"]:
        cols.append(np.linalg.norm(pos[:, j(a)] - pos[:, j(b)], axis=-1) < limit)
    return np.stack(cols, axis=1)


def extract_geometric_features(seq, skel: Skeleton, config: dict | None = None) -> np.ndarray:
    """32 predicate frequencies in [0, 1]."""
    frames, _ = _frames(seq)
    if len(frames) < 3:
        raise ValueError("geometric features need at least 3 frames")
    return geometric_predicates(frames, skel, config).mean(axis=0)


# ---------------------------------------------------------------------------
# distribution distances

def _gaussian(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if len(x) > 1 else np.zeros((x.shape[1], x.shape[1]))
    return x, mu, cov


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_report(set_a, set_b) -> dict:
    """Frechet distance between Gaussian fits plus whether covariances were regularized."""
    a, mu_a, cov_a = _gaussian(set_a)
    b, mu_b, cov_b = _gaussian(set_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    regularized = len(a) <= dim or len(b) <= dim
    if regularized:
        cov_a = cov_a + 1e-6 * np.eye(dim)
        cov_b = cov_b + 1e-6 * np.eye(dim)
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() < -1e-8:
            raise ValueError("covariance is indefinite beyond tolerance")
    root_a = _psd_sqrt(cov_a)
    mid = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if vals.min() < -1e-8:
        raise ValueError(f"product covariance is indefinite (eigenvalue {vals.min():.3g})")
    trace = np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(np.maximum(vals, 0.0)))
    value = float(np.sum((mu_a - mu_b) ** 2) + trace)
    return {"fid": max(value, 0.0), "regularized": regularized}


def frechet_distance(set_a, set_b) -> float:
    rep = frechet_report(set_a, set_b)
    if rep["regularized"]:
        warnings.warn("too few samples for a full-rank covariance; added 1e-6 I", RuntimeWarning, stacklevel=2)
    return rep["fid"]


def diversity(vectors) -> float:
    """Mean Euclidean distance over all unordered pairs."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("diversity needs at least 2 vectors")
    return float(np.mean(pdist(x)))


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class MetricsReport:
    bas: float
    pfc: float
    fid_k: float
    fid_g: float
    div_k: float
    div_g: float
    skating: float
    floating: float
    penetration: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_sets(generated, reference, skel: Skeleton, conds=None) -> tuple[MetricsReport, dict]:
    """Metrics for generated sequences against a reference set.

    ``conds`` (optional, aligned with ``generated``) supplies music beats for
    BAS; sequences without one are skipped for BAS. Returns the report and a
    notes dict (e.g. covariance regularization).
    """
    conds = list(conds) if conds is not None else [None] * len(generated)
    kin_g = np.stack([extract_kinetic_features(s, skel) for s in generated])
    kin_r = np.stack([extract_kinetic_features(s, skel) for s in reference])
    geo_g = np.stack([extract_geometric_features(s, skel) for s in generated])
    geo_r = np.stack([extract_geometric_features(s, skel) for s in reference])
    fk, fg = frechet_report(kin_g, kin_r), frechet_report(geo_g, geo_r)
    scored = [bas(s, c, skel) for s, c in zip(generated, conds) if c is not None and c.beat_times.size]
    phys = [physics_report(s, skel) for s in generated]
    report = MetricsReport(
        bas=float(np.mean(scored)) if scored else 0.0,
        pfc=float(np.mean([pfc(s, skel) for s in generated])),
        fid_k=fk["fid"], fid_g=fg["fid"],
        div_k=diversity(kin_g) if len(generated) > 1 else 0.0,
        div_g=diversity(geo_g) if len(generated) > 1 else 0.0,
        **{k: float(np.mean([p[k] for p in phys])) for k in ("skating", "floating", "penetration")},
    )
    notes = {"covariance_regularized": fk["regularized"] or fg["regularized"], "bas_scored": len(scored),
             "generated": len(generated), "reference": len(reference)}
    return report, notes
