"""Long dance generation from half-overlapping slices denoised in parallel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSchedule, binarize_contacts, denoise_loop
from .motion import Conditioning, MotionSequence


@dataclass(frozen=True)
class SlicePlan:
    N: int
    L: int
    length: int  # true music length in frames

    def __post_init__(self):
        if self.L < 2 or self.L % 2:
            raise ValueError(f"slice length must be even and >= 2, got {self.L}")
        if self.N < 1:
            raise ValueError("need at least one slice")

    @property
    def h(self) -> int:
        return self.L // 2

    @property
    def total(self) -> int:
        return self.L + (self.N - 1) * self.h

    @property
    def pad(self) -> int:
        return self.total - self.length

    @classmethod
    def for_length(cls, length: int, L: int) -> "SlicePlan":
        if L < 2 or L % 2:
            raise ValueError(f"slice length must be even and >= 2, got {L}")
        if length < L:
            raise ValueError(f"music has {length} frames, shorter than one slice of {L}")
        h = L // 2
        return cls(1 + -(-(length - L) // h), L, length)

    def report(self, fps: float) -> dict:
        return {"N": self.N, "L": self.L, "h": self.h, "total_frames": self.length,
                "seconds": self.length / fps, "padded_frames": self.pad}


def blend_weights(h: int) -> np.ndarray:
    """h weights descending evenly from 1 to 0."""
    if h < 1:
        raise ValueError("overlap must be at least one frame")
    return np.linspace(1.0, 0.0, h) if h > 1 else np.ones(1)


def slice_music(cond: Conditioning, L: int) -> tuple[list[Conditioning], SlicePlan]:
    """Slice i covers frames [i*h, i*h + L); the tail is zero-padded when needed."""
    plan = SlicePlan.for_length(len(cond), L)
    return [cond.crop(i * plan.h, L) for i in range(plan.N)], plan


def overlap_constraint(x: np.ndarray) -> np.ndarray:
    """Each slice's former half takes the previous slice's latter half (simultaneous copy)."""
    h = x.shape[1] // 2
    snap = x.copy()
    x[1:, :h] = snap[:-1, h:]
    return x


def blend(slices, h: int) -> np.ndarray:
    """Merge (N, L, D) slices with overlap h, weights applied exactly as the pseudocode."""
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 3:
        raise ValueError("slices must be an (N, L, D) array")
    N, L, D = slices.shape
    if L != 2 * h:
        raise ValueError(f"slice length {L} is inconsistent with overlap {h}")
    beta = blend_weights(h)[:, None]
    out = np.zeros((L + (N - 1) * h, D))
    for i in range(N):
        s = slices[i].copy()
        if i > 0:
            s[:h] *= beta
        if i < N - 1:
            s[h:] *= 1.0 - beta
        out[i * h:i * h + L] += s
    return out


def generate_long(model, cond: Conditioning, sched: DiffusionSchedule, w: float = 2.0, seed: int = 0,
                  L: int = 150, monitor=None) -> tuple[MotionSequence, dict]:
    """Long guided sample plus a generation report.

    ``monitor(t, x)`` (optional) sees the slice batch after each constraint step.
    """
    conds, plan = slice_music(cond, L)
    rngs = [np.random.default_rng([seed, i]) for i in range(plan.N)]
    step = [sched.T]

    def constraint(x):
        step[0] -= 1
        x = overlap_constraint(x)
        if monitor is not None:
            monitor(step[0], x)
        return x

    x0 = denoise_loop(model, conds, sched, w, rngs, L, constraint if plan.N > 1 or monitor else None)
    if plan.N == 1:
        frames = x0[0]
    else:
        frames = blend(x0, plan.h)
    frames = binarize_contacts(frames[:plan.length])
    return MotionSequence(frames, cond.fps), plan.report(cond.fps)
