import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamd.diffusion import make_schedule, sample
from pamd.longgen import SlicePlan, blend, blend_weights, generate_long, overlap_constraint, slice_music
from pamd.motion import Conditioning, SynthConfig, standing_frame, synth_dance
from pamd.rotor import CONTACT, FRAME_DIM


class ConstStub:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def predict(self, x_t, t, conds):
        return np.broadcast_to(self.c, x_t.shape).copy()


class NoisyStub:
    """Prediction leaks x_t, so slices disagree unless the overlap constraint ties them."""

    def predict(self, x_t, t, conds):
        bump = np.array([0.0 if k.is_null else 0.2 for k in conds])[:, None, None]
        return 0.3 * x_t + bump


def music(frames, seed=0, fps=30.0):
    _, cond = synth_dance(SynthConfig(seconds=frames / fps, n_beats=4, seed=seed))
    return cond


def test_plan_counts():
    assert SlicePlan.for_length(150, 150).N == 1
    assert SlicePlan.for_length(225, 150).N == 2
    assert SlicePlan.for_length(300, 150).N == 3
    plan = SlicePlan.for_length(300, 150)
    assert (plan.h, plan.total, plan.pad) == (75, 300, 0)
    odd = SlicePlan.for_length(160, 150)
    assert (odd.N, odd.total, odd.pad) == (2, 225, 65)
    with pytest.raises(ValueError):
        SlicePlan.for_length(100, 150)
    with pytest.raises(ValueError):
        SlicePlan.for_length(100, 7)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(0, 400))
def test_plan_covers_music(half, extra):
    L = 2 * half
    plan = SlicePlan.for_length(L + extra, L)
    assert plan.total >= plan.length
    assert plan.pad < plan.h or plan.N == 1
    assert plan.L + (plan.N - 1) * plan.h == plan.total


def test_blend_weights():
    np.testing.assert_array_equal(blend_weights(5), [1.0, 0.75, 0.5, 0.25, 0.0])
    np.testing.assert_array_equal(blend_weights(1), [1.0])


def test_blend_all_ones():
    out = blend(np.ones((3, 8, 2)), 4)
    assert out.shape == (16, 2)
    np.testing.assert_array_equal(out, 1.0)


def test_blend_hand_case():
    # L=4, h=2, beta=[1, 0]; slice values 1, 2, 3
    slices = np.stack([np.full((4, 1), v) for v in (1.0, 2.0, 3.0)])
    out = blend(slices, 2)[:, 0]
    # frame 2: 1*(1-1) + 2*1 = 2; frame 3: 1*(1-0) + 2*0 = 1
    np.testing.assert_array_equal(out, [1, 1, 2, 1, 3, 2, 3, 3])


def test_blend_agreeing_slices_reproduce_signal(rng):
    sig = rng.normal(size=(18, 3))
    slices = np.stack([sig[i * 3:i * 3 + 6] for i in range(5)])
    np.testing.assert_allclose(blend(slices, 3), sig, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        blend(slices, 2)


def test_overlap_constraint_copies_from_snapshot(rng):
    x = rng.normal(size=(3, 6, 2))
    before = x.copy()
    out = overlap_constraint(x)
    np.testing.assert_array_equal(out[1, :3], before[0, 3:])
    np.testing.assert_array_equal(out[2, :3], before[1, 3:])
    np.testing.assert_array_equal(out[:, 3:], before[:, 3:])
    np.testing.assert_array_equal(out[0], before[0])


def test_slice_music_offsets():
    cond = music(300)
    parts, plan = slice_music(cond, 150)
    assert plan.N == 3
    np.testing.assert_array_equal(parts[1].features, cond.features[75:225])
    np.testing.assert_array_equal(parts[2].features, cond.features[150:300])
    tail, plan = slice_music(music(160), 150)
    assert plan.pad == 65
    np.testing.assert_array_equal(tail[1].features[85:], 0.0)


def test_single_slice_equals_sample():
    stub = NoisyStub()
    cond = music(20)
    sched = make_schedule(6)
    long, rep = generate_long(stub, cond, sched, 2.0, seed=7, L=20)
    np.testing.assert_array_equal(long.frames, sample(stub, cond, sched, 2.0, seed=7).frames)
    assert rep["N"] == 1 and rep["padded_frames"] == 0


@pytest.mark.parametrize("frames,N", [(20, 1), (30, 2), (40, 3), (35, 3)])
def test_output_length(frames, N):
    long, rep = generate_long(NoisyStub(), music(frames), make_schedule(4), L=20)
    assert len(long) == frames
    assert rep["N"] == N
    assert rep["total_frames"] == frames
    assert rep["seconds"] == pytest.approx(frames / 30.0)


def test_constant_stub_gives_constant_dance():
    c = standing_frame()
    long, _ = generate_long(ConstStub(c), music(50), make_schedule(5), L=20)
    np.testing.assert_allclose(long.frames, np.tile(c, (50, 1)), rtol=0, atol=1e-14)


def test_overlaps_agree_after_every_step():
    seen = []

    def monitor(t, x):
        h = x.shape[1] // 2
        for i in range(1, len(x)):
            assert np.array_equal(x[i, :h], x[i - 1, h:])
        seen.append(t)

    generate_long(NoisyStub(), music(40), make_schedule(6), L=20, monitor=monitor)
    assert seen == [5, 4, 3, 2, 1]


def test_long_generation_deterministic_and_contacts_binary():
    cond = music(60, seed=3)
    a, ra = generate_long(NoisyStub(), cond, make_schedule(5), seed=2, L=20)
    b, rb = generate_long(NoisyStub(), cond, make_schedule(5), seed=2, L=20)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert ra == rb
    assert set(np.unique(a.frames[:, CONTACT])) <= {0.0, 1.0}
    assert a.frames.shape == (60, FRAME_DIM)


def test_too_short_music_fails():
    with pytest.raises(ValueError, match="shorter"):
        short = Conditioning(np.zeros((10, 32)), np.array([0.1]), standing_frame())
        generate_long(NoisyStub(), short, make_schedule(3), L=20)


def test_padding_reported():
    _, rep = generate_long(NoisyStub(), music(47), make_schedule(3), L=20)
    assert rep == {"N": 4, "L": 20, "h": 10, "total_frames": 47, "seconds": pytest.approx(47 / 30),
                   "padded_frames": 3}


def test_three_hundred_frames_default_slice():
    cond = Conditioning(np.zeros((300, 32)), np.array([1.0, 2.0]), standing_frame())
    long, rep = generate_long(ConstStub(standing_frame()), cond, make_schedule(2))
    assert rep["N"] == 3 and rep["L"] == 150 and rep["h"] == 75
    assert len(long) == 300
