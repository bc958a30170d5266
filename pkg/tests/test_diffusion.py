import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamd.dancenet import DenoiserConfig, DenoiserModel
from pamd.diffusion import (
    DiffusionSchedule, LossWeights, TrainConfig, aux_losses, cfg_denoise, denoise_loop, draw_training_inputs,
    make_schedule, q_sample, random_windows, sample, trace_csv, train_denoiser, training_step,
)
from pamd.motion import SynthConfig, standing_frame, synth_dance
from pamd.rotor import CONTACT, FRAME_DIM, TRANS, forward_kinematics


class ConstStub:
    """Predicts ``c`` for conditional calls and ``u`` for null ones, ignoring x_t."""

    def __init__(self, c, u=None):
        self.c = np.asarray(c, dtype=np.float64)
        self.u = self.c if u is None else np.asarray(u, dtype=np.float64)
        self.calls = 0

    def predict(self, x_t, t, conds):
        self.calls += 1
        return np.stack([np.broadcast_to(self.u if k.is_null else self.c, x_t.shape[1:]) for k in conds])


class AffineStub:
    """x0 estimate depending on x_t and t, so the loop's noise handling matters."""

    def predict(self, x_t, t, conds):
        t = np.asarray(t, dtype=np.float64)[:, None, None]
        bump = np.array([0.0 if k.is_null else 1.0 for k in conds])[:, None, None]
        return 0.5 * x_t + 0.01 * t + bump


def clip(seed=0, seconds=2.0, n_beats=4):
    return synth_dance(SynthConfig(seconds=seconds, n_beats=n_beats, seed=seed))


def tiny_model(seed=0):
    model = DenoiserModel.fresh(DenoiserConfig(d_model=8, heads=2, feature_dim=32), seed=seed)
    rng = np.random.default_rng(seed)
    model.params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in model.params.items()}
    return model


# ---------------------------------------------------------------------------
# schedules and forward noising

def test_cosine_schedule_endpoints():
    s = make_schedule(50, "cosine")
    assert s.alpha_bar.shape == (50,)
    assert s.at(1) >= 0.99
    assert s.at(50) <= 0.01
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_linear_schedule_product():
    s = make_schedule(3, "linear")
    # (1 - 1e-4)(1 - 0.01005)(1 - 0.02)
    assert s.at(3) == pytest.approx(0.9700539849, abs=1e-12)
    s50 = make_schedule(50, "linear")
    assert s50.at(50) == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.02, 50)), rel=1e-14)


@pytest.mark.parametrize("T", [1, 0, 2.5])
def test_schedule_rejects_bad_T(T):
    with pytest.raises(ValueError):
        make_schedule(T)


def test_schedule_rejects_unknown_kind_and_bad_values():
    with pytest.raises(ValueError):
        make_schedule(10, "sigmoid")
    with pytest.raises(ValueError):
        DiffusionSchedule(2, np.array([0.5, 0.7]))
    with pytest.raises(ValueError):
        make_schedule(10).at(11)


def test_q_sample_zero_noise_and_last_step(rng):
    s = make_schedule(50)
    x0 = rng.normal(size=(3, 5, FRAME_DIM))
    np.testing.assert_allclose(q_sample(x0, 7, np.zeros_like(x0), s), np.sqrt(s.at(7)) * x0, rtol=0, atol=0)
    eps = rng.normal(size=x0.shape)
    np.testing.assert_allclose(q_sample(x0, 50, eps, s), eps, atol=0.1 * np.abs(x0).max())
    with pytest.raises(ValueError):
        q_sample(x0, 1, eps[:, :4], s)


def test_q_sample_per_item_timesteps(rng):
    s = make_schedule(20)
    x0, eps = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    both = q_sample(x0, np.array([2, 15]), eps, s)
    np.testing.assert_array_equal(both[0], q_sample(x0[0], 2, eps[0], s))
    np.testing.assert_array_equal(both[1], q_sample(x0[1], 15, eps[1], s))


@pytest.mark.parametrize("t", [1, 25, 40])
def test_q_sample_moments(t):
    s = make_schedule(50)
    x0 = np.full(8, 2.0)
    eps = np.random.default_rng(t).normal(size=(10_000, 8))
    xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, s)
    ab = s.at(t)
    np.testing.assert_allclose(xt.mean(axis=0), np.sqrt(ab) * x0, rtol=0.05)
    np.testing.assert_allclose(xt.var(axis=0), 1 - ab, rtol=0.05)


# ---------------------------------------------------------------------------
# auxiliary losses

def test_aux_grounded_stance_is_zero(skel):
    x = np.tile(standing_frame(), (10, 1))
    out = aux_losses(x, x.copy(), np.ones((10, 4)), skel)
    assert out == {"joint": 0.0, "vel": 0.0, "foot": 0.0}


def test_aux_root_offset(skel):
    x = np.tile(standing_frame(), (6, 1))
    d = np.array([0.1, -0.2, 0.05])
    x_hat = x.copy()
    x_hat[:, TRANS] += d
    out = aux_losses(x, x_hat, np.ones((6, 4)), skel)
    assert out["joint"] == pytest.approx(d @ d, abs=1e-14)
    assert out["vel"] == 0.0
    assert out["foot"] == 0.0


def loop_aux(x, x_hat, f_hat, skel):
    p, q = forward_kinematics(x, skel), forward_kinematics(x_hat, skel)
    n, J = p.shape[:2]
    joint = sum(float(np.dot(p[i, j] - q[i, j], p[i, j] - q[i, j])) for i in range(n) for j in range(J)) / (n * J)
    vel = 0.0
    for i in range(n - 1):
        d = (x[i + 1] - x[i]) - (x_hat[i + 1] - x_hat[i])
        vel += float(d @ d)
    foot = 0.0
    for i in range(n - 1):
        for k, j in enumerate(skel.foot_joints):
            step = (q[i + 1, j] - q[i, j]) * f_hat[i, k]
            foot += float(step @ step)
    return {"joint": joint, "vel": vel / (n - 1), "foot": foot / (4 * (n - 1))}


def test_aux_matches_loops(skel, rng):
    seq, _ = clip()
    x = seq.frames[:12]
    x_hat = x + 0.05 * rng.normal(size=x.shape)
    f_hat = (rng.uniform(size=(12, 4)) > 0.5).astype(float)
    got, want = aux_losses(x, x_hat, f_hat, skel), loop_aux(x, x_hat, f_hat, skel)
    for k in want:
        assert got[k] == pytest.approx(want[k], rel=1e-12, abs=1e-12)


def test_aux_rejects_mismatch(skel):
    x = np.tile(standing_frame(), (5, 1))
    with pytest.raises(ValueError):
        aux_losses(x, x[:4], np.ones((5, 4)), skel)
    with pytest.raises(ValueError):
        aux_losses(x, x, np.ones((4, 4)), skel)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_joint=-1.0)
    with pytest.raises(ValueError):
        LossWeights(cond_drop_prob=1.5)
    with pytest.raises(ValueError):
        LossWeights(lambda_vel=float("nan"))


# ---------------------------------------------------------------------------
# training objective

def batch_of(B=2, L=10):
    clips = [clip(seed=s) for s in range(B)]
    frames = np.stack([seq.frames[:L] for seq, _ in clips])
    return frames, [cond.crop(0, L) for _, cond in clips]


def test_training_step_zero_lambdas_is_recon():
    model = tiny_model()
    frames, conds = batch_of()
    w = LossWeights(0.0, 0.0, 0.0, 0.0, 0.0)
    out = training_step(model, frames, conds, make_schedule(20), w, np.random.default_rng(0))
    assert out["total"] == out["recon"]


def test_training_step_total_is_weighted_sum():
    model = tiny_model()
    frames, conds = batch_of()
    w = LossWeights(0.7, 0.3, 2.0, 0.1, 0.0)
    out = training_step(model, frames, conds, make_schedule(20), w, np.random.default_rng(3))
    manual = out["recon"] + 0.7 * out["joint"]
    manual = manual + 0.3 * out["vel"]
    manual = manual + 2.0 * out["foot"]
    assert out["total"] == manual


def test_training_terms_match_numpy_losses(skel):
    """Graph terms equal the numpy definitions evaluated on the model's own prediction."""
    model = tiny_model(1)
    frames, conds = batch_of(L=8)
    sched, w = make_schedule(20), LossWeights(cond_drop_prob=0.5)
    out = training_step(model, frames, conds, sched, w, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    t = rng.integers(1, sched.T + 1, size=2)
    eps = rng.normal(size=frames.shape)
    drop = rng.uniform(size=2) < 0.5
    np.testing.assert_array_equal(t, out["t"])
    np.testing.assert_array_equal(drop, out["dropped"])
    x_hat = model.predict(q_sample(frames, t, eps, sched), t, [c.null() if d else c for c, d in zip(conds, drop)])
    assert out["recon"] == pytest.approx(np.mean(np.sum((x_hat - frames) ** 2, axis=-1)), rel=1e-12)
    per = [aux_losses(frames[b], x_hat[b], (x_hat[b, :, CONTACT] >= 0.5).astype(float), skel) for b in range(2)]
    for k in ("joint", "vel", "foot"):
        assert out[k] == pytest.approx(np.mean([p[k] for p in per]), rel=1e-10, abs=1e-14)


def test_cond_drop_one_nulls_every_item():
    model = tiny_model()
    frames, conds = batch_of(B=3)
    sched = make_schedule(10)
    for seed in range(5):
        bind = draw_training_inputs(model, frames, conds, sched, LossWeights(cond_drop_prob=1.0),
                                    np.random.default_rng(seed))
        assert bind["_drop"].all()
        np.testing.assert_array_equal(bind["keep_music"], 0.0)
        np.testing.assert_array_equal(bind["drop_prior"], 1.0)
    bind = draw_training_inputs(model, frames, conds, sched, LossWeights(cond_drop_prob=0.0),
                                np.random.default_rng(0))
    assert not bind["_drop"].any()


def test_training_step_needs_two_frames():
    frames, conds = batch_of(L=1)
    with pytest.raises(ValueError):
        training_step(tiny_model(), frames, conds, make_schedule(10), LossWeights(), np.random.default_rng(0))


def test_random_windows_shapes_and_short_clip():
    clips = [clip(seed=s) for s in range(3)]
    frames, conds = random_windows(clips, 4, 30, np.random.default_rng(0))
    assert frames.shape == (4, 30, FRAME_DIM)
    assert all(len(c) == 30 for c in conds)
    with pytest.raises(ValueError):
        random_windows(clips, 1, 100, np.random.default_rng(0))


def test_short_training_run_is_deterministic():
    clips = [clip(seed=s) for s in range(2)]
    cfg = TrainConfig(steps=3, batch=2, window=12, T=10, model=DenoiserConfig(d_model=8, heads=2))
    m1, tr1 = train_denoiser(clips, cfg)
    m2, tr2 = train_denoiser(clips, cfg)
    assert trace_csv(tr1) == trace_csv(tr2)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert trace_csv(tr1).splitlines()[0] == "step,total,recon,joint,vel,foot,pmc"
    assert m1.extra == {"T": 10, "schedule": "cosine"}


# ---------------------------------------------------------------------------
# guidance and sampling

def test_cfg_weight_one_is_conditional_pass():
    model = tiny_model()
    _, conds = batch_of(B=2, L=6)
    x = np.random.default_rng(0).normal(size=(2, 6, FRAME_DIM))
    t = np.array([3, 9])
    np.testing.assert_array_equal(cfg_denoise(model, x, t, conds, 1.0), model.predict(x, t, conds))


def test_cfg_stub_two_c_minus_u():
    c, u = np.full(FRAME_DIM, 0.3), np.full(FRAME_DIM, -0.1)
    _, conds = batch_of(B=1, L=4)
    out = cfg_denoise(ConstStub(c, u), np.zeros((1, 4, FRAME_DIM)), np.array([1]), conds, 2.0)
    np.testing.assert_allclose(out, np.broadcast_to(2 * c - u, out.shape), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        cfg_denoise(ConstStub(c, u), np.zeros((1, 4, FRAME_DIM)), np.array([1]), conds, 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.floats(0.0, 1.0))
def test_cfg_affine_in_w(w1, w2, a):
    model = AffineStub()
    _, conds = batch_of(B=1, L=3)
    x = np.random.default_rng(0).normal(size=(1, 3, FRAME_DIM))
    t = np.array([4])
    mid = a * w1 + (1 - a) * w2
    lhs = cfg_denoise(model, x, t, conds, mid)
    rhs = a * cfg_denoise(model, x, t, conds, w1) + (1 - a) * cfg_denoise(model, x, t, conds, w2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_sample_deterministic_and_seed_sensitive():
    model = tiny_model()
    _, cond = clip()
    cond = cond.crop(0, 12)
    sched = make_schedule(5)
    a = sample(model, cond, sched, 2.0, seed=4)
    b = sample(model, cond, sched, 2.0, seed=4)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, sample(model, cond, sched, 2.0, seed=5).frames)
    assert len(a) == 12
    assert set(np.unique(a.frames[:, CONTACT])) <= {0.0, 1.0}


def test_sample_constant_stub_returns_constant():
    c = standing_frame()
    _, cond = clip()
    out = sample(ConstStub(c), cond.crop(0, 9), make_schedule(8), 2.0, seed=0)
    np.testing.assert_allclose(out.frames, np.tile(c, (9, 1)), rtol=0, atol=1e-14)


def test_sample_single_step_is_one_guided_call():
    stub = AffineStub()
    _, cond = clip()
    cond = cond.crop(0, 5)
    sched = DiffusionSchedule(1, np.array([0.5]))
    out = sample(stub, cond, sched, 2.0, seed=3)
    x1 = np.random.default_rng([3, 0]).normal(size=(1, 5, FRAME_DIM))
    want = cfg_denoise(stub, x1, np.array([1]), [cond], 2.0)[0]
    want[:, CONTACT] = (want[:, CONTACT] >= 0.5).astype(float)
    np.testing.assert_array_equal(out.frames, want)


def test_denoise_loop_call_count_and_constraint_steps():
    stub = ConstStub(np.zeros(FRAME_DIM))
    _, cond = clip()
    seen = []
    denoise_loop(stub, [cond.crop(0, 4)] * 2, make_schedule(6), 2.0,
                 [np.random.default_rng(i) for i in range(2)], 4, constraint=lambda x: seen.append(x.shape) or x)
    assert stub.calls == 12  # two passes per step
    assert seen == [(2, 4, FRAME_DIM)] * 5
