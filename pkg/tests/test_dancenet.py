import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamd.dancenet import (
    FOOT_DIM, DenoiserConfig, DenoiserModel, build_conditioning_tokens, contact_score, denoise_forward,
    foot_features, foot_features_graph, mrfc_refine,
)
from pamd.diffusion import denoiser_gradcheck
from pamd.gradtape import Graph, evaluate
from pamd.motion import Conditioning, MotionSequence, SynthConfig, standing_frame, synth_dance
from pamd.rotor import FRAME_DIM, ROT, axis_angle_to_matrix, matrix_to_sixd

SIG02 = 1.0 / (1.0 + math.exp(-0.2))


def small_model(seed=0, **kw):
    cfg = DenoiserConfig(d_model=16, heads=2, feature_dim=32, **kw)
    model = DenoiserModel.fresh(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    model.params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in model.params.items()}
    return model


def cond_of(L, seed=0):
    _, cond = synth_dance(SynthConfig(seed=seed))
    return cond.crop(0, L)


def test_contact_score_examples():
    assert contact_score(0.3, 2.0, 0.3, 2.0) == 0.25
    assert contact_score(0.0, 0.0, 0.3, 2.0) == pytest.approx(SIG02 ** 2, abs=1e-15)
    assert SIG02 ** 2 == pytest.approx(0.302318, abs=1e-6)
    a, b, c = contact_score(np.array([0.0, 0.1, 0.2]), 0.5, 0.3, 2.0)
    assert a > b > c
    with pytest.raises(ValueError):
        contact_score(0.1, 0.1, 0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 5), st.floats(0.01, 5))
def test_contact_score_range(h, v, hm, vm):
    s = contact_score(h, v, hm, vm)
    assert 0 < s < 1


def test_foot_features_stationary(skel):
    f = foot_features(np.tile(standing_frame(), (8, 1)), skel)
    assert f.shape == (8, FOOT_DIM)
    np.testing.assert_array_equal(f[:, :4], 1.0)
    np.testing.assert_allclose(f[:, 4:8], SIG02 ** 2, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(f[:, 20:], 0.0)


def lift_left_leg(frames, angle):
    out = frames.copy()
    j = 1  # left hip
    out[:, ROT.start + 6 * j:ROT.start + 6 * j + 6] = matrix_to_sixd(axis_angle_to_matrix([-angle, 0, 0]))
    return out


def test_foot_features_are_per_foot(skel):
    base = np.tile(standing_frame(), (10, 1))
    moved = np.stack([lift_left_leg(base[i:i + 1], 0.05 * i)[0] for i in range(10)])
    fa, fb = foot_features(base, skel), foot_features(moved, skel)
    right = [2, 3, 6, 7, 14, 15, 16, 17, 18, 19, 26, 27, 28, 29, 30, 31]
    np.testing.assert_array_equal(fa[:, right], fb[:, right])
    assert not np.array_equal(fa[:, [0, 1]], fb[:, [0, 1]])


def test_foot_scores_in_open_interval(skel, rng):
    f = foot_features(rng.normal(size=(12, FRAME_DIM)), skel)
    assert np.all((f[:, 4:8] > 0) & (f[:, 4:8] < 1))


def test_foot_feature_graph_matches_numpy(skel, rng):
    seq, _ = synth_dance(SynthConfig(seed=2))
    frames = np.stack([seq.frames[:20], rng.normal(size=(20, FRAME_DIM))])
    g = Graph()
    raw = g.input("raw", (2, 20, FRAME_DIM))
    out = foot_features_graph(g, raw, 2, 20, skel, 30.0, 0.05, 0.05)
    got = evaluate(g, {"raw": frames})[out.name]
    for b in range(2):
        np.testing.assert_allclose(got[b], foot_features(frames[b], skel), rtol=0, atol=1e-12)


def test_token_count_and_null_path():
    model = small_model()
    cond = cond_of(150)
    tokens = build_conditioning_tokens(cond, 5, model)
    assert tokens.shape == (152, 16)
    null = cond.null()
    other = Conditioning(np.random.default_rng(0).normal(size=cond.features.shape), cond.beat_times,
                         cond.prior_frame, is_null=True)
    np.testing.assert_array_equal(build_conditioning_tokens(null, 5, model),
                                  build_conditioning_tokens(other, 5, model))


def test_timestep_token_varies():
    model = small_model()
    cond = cond_of(10)
    a = build_conditioning_tokens(cond, 1, model)
    b = build_conditioning_tokens(cond, 50, model)
    assert not np.allclose(a[10], b[10])


@pytest.mark.parametrize("L", [4, 16, 150])
def test_forward_shapes(L, rng):
    model = small_model()
    raw = denoise_forward(model, rng.normal(size=(L, FRAME_DIM)), 10, cond_of(L))
    assert raw.shape == (L, FRAME_DIM)
    out = model.forward(rng.normal(size=(2, L, FRAME_DIM)), [3, 7], [cond_of(L), cond_of(L, 1)])
    assert out["raw"].shape == out["refined"].shape == (2, L, FRAME_DIM)


def test_null_conditioning_ignores_music(rng):
    model = small_model()
    x = rng.normal(size=(1, 12, FRAME_DIM))
    c = cond_of(12)
    other = Conditioning(rng.normal(size=c.features.shape), c.beat_times, c.prior_frame)
    np.testing.assert_array_equal(model.predict(x, [4], [c.null()]), model.predict(x, [4], [other.null()]))
    assert not np.array_equal(model.predict(x, [4], [c]), model.predict(x, [4], [other]))


def test_music_token_permutation(rng):
    x = rng.normal(size=(1, 12, FRAME_DIM))
    c = cond_of(12)
    perm = rng.permutation(12)
    shuffled = Conditioning(c.features[perm], c.beat_times, c.prior_frame)
    plain = small_model(music_pe=False)
    np.testing.assert_allclose(plain.predict(x, [4], [c]), plain.predict(x, [4], [shuffled]), rtol=0, atol=1e-12)
    placed = small_model(music_pe=True)
    assert not np.allclose(placed.predict(x, [4], [c]), placed.predict(x, [4], [shuffled]))


def test_fresh_refinement_is_identity(rng):
    model = DenoiserModel.fresh(DenoiserConfig(d_model=16, heads=2))
    out = model.forward(rng.normal(size=(1, 9, FRAME_DIM)), [5], [cond_of(9)])
    np.testing.assert_array_equal(out["refined"], out["raw"])
    np.testing.assert_array_equal(mrfc_refine(model, out["raw"][0]), out["raw"][0])


def test_refinement_matches_graph(rng):
    model = small_model(3)
    out = model.forward(rng.normal(size=(1, 9, FRAME_DIM)), [5], [cond_of(9)])
    refined = mrfc_refine(model, out["raw"][0])
    assert refined.shape == (9, FRAME_DIM)
    np.testing.assert_allclose(refined, out["refined"][0], rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed, L", [(0, 3), (1, 4)])
def test_full_model_gradients(seed, L):
    assert denoiser_gradcheck(seed, max_entries=4, L=L) < 1e-4


def test_same_weights_any_length(rng):
    model = small_model()
    for L in (4, 150):
        assert model.predict(rng.normal(size=(1, L, FRAME_DIM)), [2], [cond_of(L)]).shape == (1, L, FRAME_DIM)


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model(2)
    model.extra = {"T": 50, "schedule": "cosine"}
    model.save(tmp_path / "d.json")
    back = DenoiserModel.load(tmp_path / "d.json")
    assert back.config == model.config and back.extra == model.extra
    x = rng.normal(size=(1, 6, FRAME_DIM))
    np.testing.assert_array_equal(back.predict(x, [3], [cond_of(6)]), model.predict(x, [3], [cond_of(6)]))


def test_rejects_mismatched_features():
    model = small_model()
    bad = Conditioning(np.zeros((6, 8)), np.array([]), standing_frame())
    with pytest.raises(ValueError):
        model.predict(np.zeros((1, 6, FRAME_DIM)), [1], [bad])
