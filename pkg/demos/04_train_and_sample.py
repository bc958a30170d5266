"""Train a small denoiser on synthetic clips, then sample dances with and without guidance.

Usage: python demos/04_train_and_sample.py [steps]   (default 4000, about three minutes)
"""
import sys
import time

import numpy as np

from pamd.diffusion import TrainConfig, make_schedule, sample, train_denoiser
from pamd.metrics import bas, motion_beats, pfc
from pamd.motion import SynthConfig, synth_dance
from pamd.rotor import default_skeleton

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
skel = default_skeleton()
clips = [synth_dance(SynthConfig(seed=s, n_beats=8 + s % 5)) for s in range(16)]

start = time.perf_counter()
model, trace = train_denoiser(clips, TrainConfig(steps=steps), log=print if steps <= 300 else None)
late = np.mean([r["total"] for r in trace[-50:]])
print(f"{steps} steps in {time.perf_counter() - start:.0f}s: loss {trace[10]['total']:.3f} -> {late:.3f}")
model.save("/tmp/pamd_demo_denoiser.json")

sched = make_schedule(50)
_, cond = synth_dance(SynthConfig(seconds=4.0, n_beats=8, seed=123))
print("music beats:", np.round(cond.beat_times * 30).astype(int))
for w in (1.0, 2.0):
    seq = sample(model, cond, sched, w, seed=0)
    print(f"w={w:g}: motion beats {motion_beats(seq, skel)}  BAS {bas(seq, cond, skel):.3f}  "
          f"PFC {pfc(seq, skel):.2f}")
