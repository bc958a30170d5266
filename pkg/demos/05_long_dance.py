"""Stitch a 20 second dance from half-overlapping slices denoised together.

Uses the checkpoint written by 04_train_and_sample.py when it exists.
"""
from pathlib import Path

import numpy as np

from pamd.dancenet import DenoiserModel
from pamd.diffusion import TrainConfig, make_schedule, train_denoiser
from pamd.longgen import generate_long
from pamd.metrics import bas
from pamd.motion import SynthConfig, synth_dance
from pamd.rotor import default_skeleton

skel = default_skeleton()
ckpt = Path("/tmp/pamd_demo_denoiser.json")
if ckpt.exists():
    model = DenoiserModel.load(ckpt)
else:
    print("no checkpoint from demo 04; training a quick 300-step model")
    clips = [synth_dance(SynthConfig(seed=s, n_beats=8 + s % 5)) for s in range(16)]
    model, _ = train_denoiser(clips, TrainConfig(steps=300))

_, cond = synth_dance(SynthConfig(seconds=20.0, n_beats=36, seed=5))
gaps = []


def watch(t, x):
    h = x.shape[1] // 2
    gaps.append(max(np.abs(x[i, :h] - x[i - 1, h:]).max() for i in range(1, len(x))))


seq, report = generate_long(model, cond, make_schedule(50), w=2.0, seed=0, L=150, monitor=watch)
print(report)
print(f"largest overlap disagreement after any constraint step: {max(gaps)}")
print(f"{len(seq)} frames, BAS {bas(seq, cond, skel):.3f}")
