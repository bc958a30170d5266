"""Denoiser network: conditioning tokens, attention trunk and the foot-contact refinement head.

Shapes follow (B, L, 151) for motion and (B, L, D) for music features. The
trunk is pre-norm: self-attention over frames, cross-attention from frames
to the L + 2 condition tokens (music frames, timestep, prior pose), then a
feed-forward layer. The refinement head attends from the raw dance (queries
and keys) to per-frame foot features (values) and adds a zero-initialized
correction, so a fresh head is the identity.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .gradtape import Graph, Node, evaluate, load_params, save_params
from .motion import Conditioning, velocities_from_positions
from .rotor import FRAME_DIM, UP, Skeleton, default_skeleton, fk_graph, forward_kinematics

FOOT_DIM = 32


# ---------------------------------------------------------------------------
# foot features

def contact_score(h, v, h_max, v_max):
    """Soft contact score in (0, 1) from height and speed against per-joint maxima."""
    h_max = np.asarray(h_max, dtype=np.float64)
    v_max = np.asarray(v_max, dtype=np.float64)
    if np.any(h_max <= 0) or np.any(v_max <= 0):
        raise ValueError("h_max and v_max must be positive")
    return expit((h_max - h) / (5.0 * h_max)) * expit((v_max - v) / (5.0 * v_max))


def foot_features(frames, skel: Skeleton, fps: float = 30.0, eps_v: float = 0.05, eps_h: float = 0.05,
                  floor: float = 1e-6) -> np.ndarray:
    """(L, 32) per-frame [labels 4, scores 4, positions 12, velocities 12] of the foot joints.

    Score maxima are per-sequence, per-joint; a maximum at or below ``floor``
    is replaced by ``floor``.
    """
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if frames.ndim != 2 or len(frames) < 2:
        raise ValueError("foot features need at least 2 frames")
    pos = forward_kinematics(frames, skel)[:, list(skel.foot_joints)]
    vel = velocities_from_positions(pos, fps)
    speed = np.sqrt(np.sum(vel * vel, axis=-1))
    h = pos[..., UP]
    h_max = np.maximum(h.max(axis=0), floor)
    v_max = np.maximum(speed.max(axis=0), floor)
    labels = ((speed < eps_v) & (h < eps_h)).astype(np.float64)
    scores = contact_score(h, speed, h_max, v_max)
    n = len(frames)
    return np.concatenate([labels, scores, pos.reshape(n, 12), vel.reshape(n, 12)], axis=1)


def foot_features_graph(g: Graph, raw: Node, B: int, L: int, skel: Skeleton, fps: float,
                        eps_v: float, eps_h: float, floor: float = 1e-6) -> Node:
    """Differentiable twin of :func:`foot_features` on a (B, L, 151) node -> (B, L, 32)."""
    rows = g.reshape(raw, (B * L, FRAME_DIM))
    pos = g.reshape(fk_graph(g, rows, B * L, skel, skel.foot_joints, prefix="foot"), (B, L, 4, 3))
    first = g.slice(pos, 1, 1, 2) - g.slice(pos, 1, 0, 1)
    last = g.slice(pos, 1, L - 1, L) - g.slice(pos, 1, L - 2, L - 1)
    parts = [first]
    if L > 2:
        parts.append(g.scale(g.slice(pos, 1, 2, L) - g.slice(pos, 1, 0, L - 2), 0.5))
    parts.append(last)
    vel = g.scale(g.concat(parts, axis=1), fps)
    speed = g.norm(vel)
    h = g.reshape(g.slice(pos, 3, UP, UP + 1), (B, L, 4))

    def score(x):
        top = g.expand(g.clamp_min(g.max(x, axis=1), floor), 1, L)
        return g.sigmoid(g.scale((top - x) * g.reciprocal(top), 0.2))

    labels = g.step(g.scale(speed, -1.0) + g.const(np.full((B, L, 4), eps_v))) \
        * g.step(g.scale(h, -1.0) + g.const(np.full((B, L, 4), eps_h)))
    scores = score(h) * score(speed)
    return g.concat([labels, scores, g.reshape(pos, (B, L, 12)), g.reshape(vel, (B, L, 12))], axis=2)


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 32
    heads: int = 4
    blocks: int = 1
    feature_dim: int = 32
    ff_mult: int = 2
    fps: float = 30.0
    music_pe: bool = True
    eps_v: float = 0.05
    eps_h: float = 0.05
    align_init: float = 2.0
    pe_scale: float = 4.0

    def __post_init__(self):
        if self.d_model % self.heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by heads")


def sinusoid(positions, dim: int) -> np.ndarray:
    """Sinusoidal embedding, (n,) -> (n, dim), with sin/cos of each frequency side by side.

    Interleaving keeps every (sin, cos) pair inside one attention head, so a
    head's positional dot products depend only on the offset i - j.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    arg = positions * freqs
    return np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(len(positions), dim)


def init_denoiser_params(cfg: DenoiserConfig, seed: int = 0, out_bias=None) -> dict:
    rng = np.random.default_rng(seed)
    d, p = cfg.d_model, {}

    def dense(name, fan_in, fan_out, bias=True, gain=1.0):
        p[name + ".w"] = rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out))
        if bias:
            p[name + ".b"] = np.zeros(fan_out)

    def norm(name):
        p[name + ".g"], p[name + ".b"] = np.ones(d), np.zeros(d)

    dense("in", FRAME_DIM, d)
    dense("music", cfg.feature_dim, d)
    dense("time1", d, d)
    dense("time2", d, d)
    dense("prior", FRAME_DIM, d)
    p["null"] = rng.normal(0.0, 0.02, d)
    for i in range(cfg.blocks):
        for att in ("sa", "ca"):
            for m in ("q", "k", "v", "o"):
                dense(f"b{i}.{att}.{m}", d, d, bias=False)
        # cross-attention starts out matching frames to music tokens by position
        for m in ("q", "k"):
            p[f"b{i}.ca.{m}.w"] = cfg.align_init * np.eye(d) + rng.normal(0.0, 0.1 / math.sqrt(d), (d, d))
        for n in ("ln1", "ln2", "ln3"):
            norm(f"b{i}.{n}")
        dense(f"b{i}.ff1", d, cfg.ff_mult * d)
        dense(f"b{i}.ff2", cfg.ff_mult * d, d)
    norm("ln_out")
    dense("out", d, FRAME_DIM, gain=0.5)
    if out_bias is not None:
        p["out.b"] = np.asarray(out_bias, dtype=np.float64).copy()
    dense("mrfc.q", FRAME_DIM, d, bias=False)
    dense("mrfc.k", FRAME_DIM, d, bias=False)
    dense("mrfc.v", FOOT_DIM, d)
    p["mrfc.out.w"] = np.zeros((d, FRAME_DIM))
    p["mrfc.out.b"] = np.zeros(FRAME_DIM)
    return p


class _Builder:
    """Creates parameter leaves on demand while building one graph."""

    def __init__(self, g: Graph, cfg: DenoiserConfig, shapes: dict):
        self.g, self.cfg, self.shapes, self.nodes = g, cfg, shapes, {}

    def __getitem__(self, name):
        if name not in self.nodes:
            self.nodes[name] = self.g.param(name, self.shapes[name])
        return self.nodes[name]

    def dense(self, x, name, bias=True):
        y = self.g.matmul(x, self[name + ".w"])
        return self.g.add(y, self[name + ".b"]) if bias else y

    def norm(self, x, name):
        return self.g.layernorm(x, self[name + ".g"], self[name + ".b"])

    def attention(self, xq, xkv, prefix):
        g, heads = self.g, self.cfg.heads
        dh = self.cfg.d_model // heads
        q, k, v = (self.dense(x, f"{prefix}.{m}", bias=False) for x, m in ((xq, "q"), (xkv, "k"), (xkv, "v")))
        outs = []
        for h in range(heads):
            qh, kh, vh = (g.slice(z, 2, h * dh, (h + 1) * dh) for z in (q, k, v))
            weights = g.softmax(g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / math.sqrt(dh)), axis=-1)
            outs.append(g.matmul(weights, vh))
        merged = outs[0] if heads == 1 else g.concat(outs, axis=-1)
        return self.dense(merged, f"{prefix}.o", bias=False)


def denoiser_graph(cfg: DenoiserConfig, B: int, L: int, skel: Skeleton, shapes: dict,
                   g: Graph | None = None) -> tuple[Graph, dict]:
    """Build the full denoiser for a (B, L) batch; returns (graph, named nodes).

    Inputs: ``x_t`` (B, L, 151), ``music`` (B, L, D), ``prior`` (B, 151),
    ``temb`` (B, d) sinusoidal timestep codes, and keep/drop masks
    ``keep_music``/``drop_music`` (B, L, d) and ``keep_prior``/``drop_prior``
    (B, 1, d) that swap music and prior tokens for the null embedding.
    """
    g = g or Graph()
    d = cfg.d_model
    m = _Builder(g, cfg, shapes)
    x_t = g.input("x_t", (B, L, FRAME_DIM))
    music = g.input("music", (B, L, cfg.feature_dim))
    prior = g.input("prior", (B, FRAME_DIM))
    temb = g.input("temb", (B, d))
    masks = {k: g.input(k, (B, L if "music" in k else 1, d))
             for k in ("keep_music", "drop_music", "keep_prior", "drop_prior")}
    pe = g.const(np.broadcast_to(cfg.pe_scale * sinusoid(np.arange(L), d), (B, L, d)).copy(), "pos_enc")

    # condition tokens
    mus = m.dense(music, "music")
    if cfg.music_pe:
        mus = mus + pe
    null_l = g.add(g.const(np.zeros((B, L, d)), "zeros_music"), m["null"])
    null_1 = g.add(g.const(np.zeros((B, 1, d)), "zeros_prior"), m["null"])
    mus = mus * masks["keep_music"] + null_l * masks["drop_music"]
    t_tok = g.reshape(m.dense(g.gelu(m.dense(temb, "time1")), "time2"), (B, 1, d))
    p_tok = g.reshape(m.dense(prior, "prior"), (B, 1, d))
    p_tok = p_tok * masks["keep_prior"] + null_1 * masks["drop_prior"]
    tokens = g.concat([mus, t_tok, p_tok], axis=1, name="tokens")

    # trunk
    # the timestep also shifts every frame so the noise level is visible before attention
    h = m.dense(x_t, "in") + pe + g.expand(t_tok, 1, L)
    for i in range(cfg.blocks):
        a = m.norm(h, f"b{i}.ln1")
        h = h + m.attention(a, a, f"b{i}.sa")
        h = h + m.attention(m.norm(h, f"b{i}.ln2"), tokens, f"b{i}.ca")
        h = h + m.dense(g.gelu(m.dense(m.norm(h, f"b{i}.ln3"), f"b{i}.ff1")), f"b{i}.ff2")
    raw = g.add(g.matmul(m.norm(h, "ln_out"), m["out.w"]), m["out.b"], name="raw")

    # foot-contact refinement
    feats = foot_features_graph(g, raw, B, L, skel, cfg.fps, cfg.eps_v, cfg.eps_h)
    qk = [m.dense(raw, "mrfc.q", bias=False), m.dense(raw, "mrfc.k", bias=False)]
    val = m.dense(feats, "mrfc.v")
    weights = g.softmax(g.scale(g.matmul(qk[0], g.transpose(qk[1])), 1.0 / math.sqrt(d)), axis=-1)
    corr = m.dense(g.matmul(weights, val), "mrfc.out")
    refined = g.add(raw, corr, name="refined")
    return g, {"tokens": tokens, "raw": raw, "refined": refined, "foot": feats}


def _as_cond_list(conds, B):
    if isinstance(conds, Conditioning):
        conds = [conds] * B
    conds = list(conds)
    if len(conds) != B:
        raise ValueError(f"{len(conds)} conditionings for a batch of {B}")
    return conds


@dataclass
class DenoiserModel:
    params: dict
    config: DenoiserConfig = DenoiserConfig()
    skeleton: Skeleton = field(default_factory=default_skeleton)
    extra: dict = field(default_factory=dict)
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def fresh(cls, cfg: DenoiserConfig = DenoiserConfig(), skel: Skeleton | None = None, seed: int = 0,
              out_bias=None) -> "DenoiserModel":
        return cls(init_denoiser_params(cfg, seed, out_bias), cfg, skel or default_skeleton())

    @property
    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.params.items()}

    def graph(self, B: int, L: int):
        key = (B, L)
        if key not in self._graphs:
            self._graphs[key] = denoiser_graph(self.config, B, L, self.skeleton, self.shapes)
        return self._graphs[key]

    def bindings(self, x_t, t, conds) -> dict:
        """Graph inputs for a batch; ``conds`` is one Conditioning or a list of B."""
        x_t = np.asarray(x_t, dtype=np.float64)
        B, L = x_t.shape[:2]
        conds = _as_cond_list(conds, B)
        d = self.config.d_model
        for c in conds:
            if c.features.shape != (L, self.config.feature_dim):
                raise ValueError(f"conditioning features {c.features.shape} do not match "
                                 f"({L}, {self.config.feature_dim})")
        keep = np.array([0.0 if c.is_null else 1.0 for c in conds])
        return {
            "x_t": x_t,
            "music": np.stack([c.features for c in conds]),
            "prior": np.stack([c.prior_frame for c in conds]),
            "temb": sinusoid(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)), d),
            "keep_music": np.broadcast_to(keep[:, None, None], (B, L, d)).copy(),
            "drop_music": np.broadcast_to(1.0 - keep[:, None, None], (B, L, d)).copy(),
            "keep_prior": np.broadcast_to(keep[:, None, None], (B, 1, d)).copy(),
            "drop_prior": np.broadcast_to(1.0 - keep[:, None, None], (B, 1, d)).copy(),
        }

    def forward(self, x_t, t, conds) -> dict:
        """Named outputs (tokens, raw, refined, foot) for a (B, L, 151) batch."""
        x_t = np.asarray(x_t, dtype=np.float64)
        g, nodes = self.graph(*x_t.shape[:2])
        vals = evaluate(g, {**self.params, **self.bindings(x_t, t, conds)})
        return {k: vals[n.name] for k, n in nodes.items()}

    def predict(self, x_t, t, conds) -> np.ndarray:
        """Refined x0 estimate, (B, L, 151)."""
        return self.forward(x_t, t, conds)["refined"]

    def header(self) -> dict:
        return {"kind": "denoiser", **asdict(self.config), **self.extra}

    def save(self, path) -> None:
        save_params(path, self.params, self.header())

    @classmethod
    def load(cls, path, skel: Skeleton | None = None) -> "DenoiserModel":
        params, header = load_params(path)
        if not header or header.get("kind") != "denoiser":
            raise ValueError(f"{path}: not a denoiser checkpoint")
        names = DenoiserConfig.__dataclass_fields__
        cfg = DenoiserConfig(**{k: header[k] for k in names if k in header})
        expected = init_denoiser_params(cfg)
        for name, arr in expected.items():
            if name not in params or params[name].shape != arr.shape:
                raise ValueError(f"{path}: parameter {name!r} missing or does not match the "
                                 f"architecture header (d_model={cfg.d_model}, heads={cfg.heads}, "
                                 f"blocks={cfg.blocks}, D={cfg.feature_dim})")
        extra = {k: v for k, v in header.items() if k not in names and k != "kind"}
        return cls(params, cfg, skel or default_skeleton(), extra)


def build_conditioning_tokens(cond: Conditioning, t: int, model: DenoiserModel) -> np.ndarray:
    """(L + 2, d_model) condition tokens for one conditioning at timestep t."""
    x = np.zeros((1, len(cond), FRAME_DIM))
    return model.forward(x, [t], [cond])["tokens"][0]


def denoise_forward(model: DenoiserModel, x_t, t: int, cond: Conditioning) -> np.ndarray:
    """Raw (pre-refinement) dance for one (L, 151) input."""
    return model.forward(np.asarray(x_t)[None], [t], [cond])["raw"][0]


def mrfc_refine(model: DenoiserModel, raw, feats=None) -> np.ndarray:
    """Apply the refinement head to a raw (L, 151) dance outside the full graph."""
    raw = np.asarray(raw, dtype=np.float64)
    if feats is None:
        feats = foot_features(raw, model.skeleton, model.config.fps, model.config.eps_v, model.config.eps_h)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (len(raw), FOOT_DIM):
        raise ValueError(f"foot features {feats.shape} do not match {len(raw)} frames")
    p = model.params
    q, k = raw @ p["mrfc.q.w"], raw @ p["mrfc.k.w"]
    s = q @ k.T / math.sqrt(model.config.d_model)
    s = np.exp(s - s.max(axis=1, keepdims=True))
    w = s / s.sum(axis=1, keepdims=True)
    return raw + (w @ (feats @ p["mrfc.v.w"] + p["mrfc.v.b"])) @ p["mrfc.out.w"] + p["mrfc.out.b"]
