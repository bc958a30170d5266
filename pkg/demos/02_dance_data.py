"""Synthetic beat-locked dance: skeleton, kinematics, beats and foot contact."""
import numpy as np

from pamd.metrics import bas, motion_beats, pfc, physics_report
from pamd.motion import SynthConfig, synth_dance
from pamd.rotor import default_skeleton, forward_kinematics

skel = default_skeleton()
seq, cond = synth_dance(SynthConfig(seconds=5.0, n_beats=10, seed=3))
print(f"{len(seq)} frames at {seq.fps:g} fps, {seq.frames.shape[1]} numbers per frame")

pos = forward_kinematics(seq.frames, skel)
feet = pos[:, list(skel.foot_joints), 1]
print(f"root height {pos[:, 0, 1].min():.3f}..{pos[:, 0, 1].max():.3f} m, lowest foot {round(feet.min(), 4) + 0.0:.4f} m")

beats = motion_beats(seq, skel)
print("music beats (frames):", np.round(cond.beat_times * seq.fps).astype(int))
print("motion beats (frames):", beats)
phys = {k: round(v, 4) for k, v in physics_report(seq, skel).items()}
print(f"BAS {bas(seq, cond, skel):.3f}   PFC {pfc(seq, skel):.3f}   physics {phys}")

# pure noise for contrast
noise = np.random.default_rng(0).normal(size=seq.frames.shape)
print(f"noise: BAS {bas(noise, cond, skel):.3f}  PFC {pfc(noise, skel):.1f}")
