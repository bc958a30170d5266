"""Diffusion core: schedules, forward noising, the training objective and guided sampling.

The network predicts x0 directly. Sampling starts from unit Gaussian noise
and, at every step, predicts x0 with classifier-free guidance and re-noises
that estimate to the next lower level.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .dancenet import DenoiserConfig, DenoiserModel, denoiser_graph
from .gradtape import Divergence, adam_init, adam_step, finite_diff_check, value_and_grad
from .motion import Conditioning, MotionSequence, SynthConfig, synth_dance
from .posefield import NdfConfig, NdfModel, ndf_bindings, pmc_graph
from .rotor import CONTACT, FRAME_DIM, Skeleton, fk_graph, forward_kinematics


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1 or ab.shape != (self.T,):
            raise ValueError(f"alpha_bar must hold T={self.T} values")
        if np.any(ab <= 0) or np.any(ab >= 1) or np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")
        object.__setattr__(self, "alpha_bar", ab)

    def at(self, t):
        """alpha_bar for 1-based timesteps."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return self.alpha_bar[t - 1]


def make_schedule(T: int = 50, kind: str = "cosine") -> DiffusionSchedule:
    """Cosine (offset 0.008, betas clipped at 0.999) or linear betas 1e-4..0.02."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(int(T), np.cumprod(1.0 - betas), kind)


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` is a scalar or one per leading item."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match {x0.shape}")
    ab = np.asarray(sched.at(t), dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossWeights:
    lambda_joint: float = 1.0
    lambda_vel: float = 1.0
    lambda_foot: float = 1.0
    lambda_pmc: float = 0.1
    cond_drop_prob: float = 0.2

    def __post_init__(self):
        vals = asdict(self)
        if not all(math.isfinite(v) and v >= 0 for v in vals.values()) or self.cond_drop_prob > 1:
            raise ValueError(f"invalid loss weights {vals}")


def aux_losses(x, x_hat, f_hat, skel: Skeleton) -> dict:
    """Joint-position, velocity and foot-contact losses for (N, 151) sequences.

    joint: mean over frames and joints of squared FK error; vel: mean over
    frame pairs of the squared difference of frame deltas (all 151 dims);
    foot: mean over frame pairs and the 4 foot joints of squared FK
    displacement where the predicted contact flag is 1.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if x.shape != x_hat.shape or len(x) < 2 or f_hat.shape != (len(x), 4):
        raise ValueError(f"length mismatch: {x.shape}, {x_hat.shape}, contacts {f_hat.shape}")
    p, p_hat = forward_kinematics(x, skel), forward_kinematics(x_hat, skel)
    joint = np.mean(np.sum((p - p_hat) ** 2, axis=-1))
    dv = np.diff(x, axis=0) - np.diff(x_hat, axis=0)
    vel = np.mean(np.sum(dv ** 2, axis=-1))
    feet = p_hat[:, list(skel.foot_joints)]
    disp = (feet[1:] - feet[:-1]) * f_hat[:-1, :, None]
    foot = np.mean(np.sum(disp ** 2, axis=-1))
    return {"joint": float(joint), "vel": float(vel), "foot": float(foot)}


TERMS = ("recon", "joint", "vel", "foot", "pmc")


def training_graph(model: DenoiserModel, B: int, L: int, weights: LossWeights, ndf: NdfModel | None):
    """Denoiser plus loss terms for a (B, L) batch; cached on the model."""
    use_pmc = ndf is not None and weights.lambda_pmc > 0
    lam = (weights.lambda_joint, weights.lambda_vel, weights.lambda_foot, weights.lambda_pmc if use_pmc else 0.0)
    key = ("train", B, L, lam, ndf.config if use_pmc else None)
    if key in model._graphs:
        return model._graphs[key]
    g, nodes = denoiser_graph(model.config, B, L, model.skeleton, model.shapes)
    skel = model.skeleton
    out = nodes["refined"]
    x0 = g.input("x0", (B, L, FRAME_DIM))
    rows = g.reshape(out, (B * L, FRAME_DIM))
    terms = {"recon": g.scale(g.mse(out, x0), FRAME_DIM)}
    fk_hat = fk_graph(g, rows, B * L, skel, prefix="loss")
    terms["joint"] = g.scale(g.mse(fk_hat, g.input("fk_x0", (B * L, skel.n_joints, 3))), 3.0)
    d_hat = g.slice(out, 1, 1, L) - g.slice(out, 1, 0, L - 1)
    terms["vel"] = g.scale(g.mse(d_hat, g.input("dx0", (B, L - 1, FRAME_DIM))), FRAME_DIM)
    feet = g.concat([g.slice(fk_hat, 1, j, j + 1) for j in skel.foot_joints], axis=1)
    feet = g.reshape(feet, (B, L, 4, 3))
    disp = g.slice(feet, 1, 1, L) - g.slice(feet, 1, 0, L - 1)
    flags = g.step(g.slice(g.slice(out, 2, CONTACT.start, CONTACT.stop), 1, 0, L - 1)
                   + g.const(np.full((B, L - 1, 4), -0.5)))
    masked = disp * g.expand(g.reshape(flags, (B, L - 1, 4, 1)), 3, 3)
    terms["foot"] = g.scale(g.mse(masked, g.const(np.zeros((B, L - 1, 4, 3)))), 3.0)
    if use_pmc:
        terms["pmc"] = pmc_graph(g, rows, B * L, skel, ndf.config)
    total = terms["recon"]
    for name, lam_k in zip(TERMS[1:], lam):
        if lam_k > 0:
            total = total + g.scale(terms[name], lam_k)
    model._graphs[key] = (g, total, terms, use_pmc)
    return model._graphs[key]


def draw_training_inputs(model: DenoiserModel, batch, conds, sched: DiffusionSchedule, weights: LossWeights,
                         rng: np.random.Generator) -> dict:
    """Random timesteps, noise and guidance dropout for one batch; returns graph bindings."""
    batch = np.asarray(batch, dtype=np.float64)
    B, L = batch.shape[:2]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.normal(size=batch.shape)
    drop = rng.uniform(size=B) < weights.cond_drop_prob
    conds = [c.null() if d else c for c, d in zip(conds, drop)]
    bind = model.bindings(q_sample(batch, t, eps, sched), t, conds)
    bind["x0"] = batch
    bind["fk_x0"] = forward_kinematics(batch.reshape(B * L, FRAME_DIM), model.skeleton)
    bind["dx0"] = np.diff(batch, axis=1)
    bind["_t"], bind["_drop"] = t, drop
    return bind


def training_step(model: DenoiserModel, batch, conds, sched: DiffusionSchedule, weights: LossWeights,
                  rng: np.random.Generator, ndf: NdfModel | None = None) -> dict:
    """One objective evaluation: {total, recon, joint, vel, foot[, pmc], grads, t, dropped}."""
    batch = np.asarray(batch, dtype=np.float64)
    B, L = batch.shape[:2]
    if L < 2:
        raise ValueError("training windows need at least 2 frames")
    g, total, terms, use_pmc = training_graph(model, B, L, weights, ndf)
    bind = draw_training_inputs(model, batch, conds, sched, weights, rng)
    t, drop = bind.pop("_t"), bind.pop("_drop")
    bind.update(model.params)
    if use_pmc:
        bind.update(ndf_bindings(ndf))
    value, grads, vals = value_and_grad(g, bind, total, extra=list(terms.values()))
    if not math.isfinite(value):
        raise Divergence(-1, value)
    out = {name: float(vals[node.name]) for name, node in terms.items()}
    out.update(total=value, grads=grads, t=t, dropped=drop)
    return out


def denoiser_gradcheck(seed: int = 0, max_entries: int | None = 3, eps: float = 1e-5, L: int = 4) -> float:
    """Finite-difference check of the whole training objective at toy size.

    Covers the denoiser, refinement module and every loss term (including the
    NDF constraint). Zero-initialized layers are randomized first so no branch
    is trivially dead.
    """
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(d_model=8, heads=2, blocks=1, feature_dim=9, ff_mult=2)
    model = DenoiserModel.fresh(cfg, seed=seed)
    model.params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()}
    ndf = NdfModel.fresh(NdfConfig(4, 8, 8), model.skeleton, seed=seed)
    ndf.params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in ndf.params.items()}
    seq, cond = synth_dance(SynthConfig(seconds=1.0, n_beats=2, seed=seed, feature_dim=9))
    batch = np.stack([seq.frames[:L], seq.frames[1:L + 1]])
    conds = [cond.crop(0, L), cond.crop(1, L).null()]
    weights = LossWeights()
    g, total, _, _ = training_graph(model, 2, L, weights, ndf)
    bind = draw_training_inputs(model, batch, conds, make_schedule(10), weights, rng)
    bind.pop("_t"), bind.pop("_drop")
    bind.update(model.params)
    bind.update(ndf_bindings(ndf))
    return finite_diff_check(g, bind, eps, total, max_entries=max_entries, seed=seed)


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch: int = 8
    window: int = 60
    lr: float = 2e-3
    weight_decay: float = 0.02
    T: int = 50
    schedule: str = "cosine"
    seed: int = 0
    weights: LossWeights = LossWeights()
    model: DenoiserConfig = DenoiserConfig()


def random_windows(clips, n: int, window: int, rng: np.random.Generator):
    """n random (frames, conditioning) crops of ``window`` frames from (sequence, conditioning) clips."""
    frames, conds = [], []
    for _ in range(n):
        seq, cond = clips[rng.integers(len(clips))]
        if len(seq) < window:
            raise ValueError(f"clip of {len(seq)} frames is shorter than the window {window}")
        s = int(rng.integers(len(seq) - window + 1))
        frames.append(seq.frames[s:s + window])
        conds.append(cond.crop(s, window))
    return np.stack(frames), conds


def train_denoiser(clips, cfg: TrainConfig = TrainConfig(), ndf: NdfModel | None = None,
                   skel: Skeleton | None = None, log=None) -> tuple[DenoiserModel, list]:
    """Train on random windows of the clips; returns (model, per-step loss rows)."""
    rng = np.random.default_rng([cfg.seed, 1])
    mean_frame = np.mean(np.concatenate([s.frames for s, _ in clips]), axis=0)
    model = DenoiserModel.fresh(cfg.model, skel, cfg.seed, out_bias=mean_frame)
    model.extra = {"T": cfg.T, "schedule": cfg.schedule}
    sched = make_schedule(cfg.T, cfg.schedule)
    state = adam_init(model.params)
    trace = []
    for step in range(cfg.steps):
        frames, conds = random_windows(clips, cfg.batch, cfg.window, rng)
        res = training_step(model, frames, conds, sched, cfg.weights, rng, ndf)
        if not math.isfinite(res["total"]):
            raise Divergence(step, res["total"])
        trace.append({"step": step, **{k: res.get(k, 0.0) for k in ("total",) + TERMS}})
        model.params, state = adam_step(model.params, res["grads"], state, lr=cfg.lr,
                                        weight_decay=cfg.weight_decay)
        if log and step % 50 == 0:
            log(f"step {step}: total {res['total']:.4f} recon {res['recon']:.4f}")
    return model, trace


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step",) + ("total",) + TERMS)
    for row in trace:
        w.writerow([row["step"]] + [f"{row[k]:.10g}" for k in ("total",) + TERMS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# guided sampling

def cfg_denoise(model, x_t, t, conds, w: float) -> np.ndarray:
    """w * g(x_t, t, m) + (1 - w) * g(x_t, t, null) from two forward passes."""
    if not w > 0:
        raise ValueError("guidance weight must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    conds = [conds] * x_t.shape[0] if isinstance(conds, Conditioning) else list(conds)
    c = model.predict(x_t, t, conds)
    u = model.predict(x_t, t, [k.null() for k in conds])
    return w * c + (1.0 - w) * u


def denoise_loop(model, conds, sched: DiffusionSchedule, w: float, rngs, L: int, constraint=None) -> np.ndarray:
    """Shared sampler over a batch of independent streams (one generator per item).

    ``constraint`` (optional) is applied to the re-noised batch after every
    step with t > 1. Returns the final x0 estimate without binarization.
    """
    B = len(conds)
    x = np.stack([r.normal(size=(L, FRAME_DIM)) for r in rngs])
    x0 = x
    for t in range(sched.T, 0, -1):
        x0 = cfg_denoise(model, x, np.full(B, t), conds, w)
        if t > 1:
            noise = np.stack([r.normal(size=(L, FRAME_DIM)) for r in rngs])
            x = q_sample(x0, t - 1, noise, sched)
            if constraint is not None:
                x = constraint(x)
    return x0


def binarize_contacts(frames) -> np.ndarray:
    frames = np.array(frames, dtype=np.float64)
    frames[..., CONTACT] = (frames[..., CONTACT] >= 0.5).astype(np.float64)
    return frames


def sample(model, cond: Conditioning, sched: DiffusionSchedule, w: float = 2.0, seed: int = 0) -> MotionSequence:
    """Guided sample with the conditioning's length; pure function of its arguments."""
    rng = np.random.default_rng([seed, 0])
    x0 = denoise_loop(model, [cond], sched, w, [rng], len(cond))
    return MotionSequence(binarize_contacts(x0[0]), cond.fps)
