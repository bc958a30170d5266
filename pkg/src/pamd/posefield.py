"""Neural distance field over poses and the plausibility loss built on it.

Poses are 24 canonical unit quaternions. The plausible set is a finite
manifold of sample poses; its exact distance function (a brute-force scan)
is the training target for a tree-structured network: one small encoder per
joint consuming the joint quaternion and its parent's feature, and a decoder
mapping the concatenated features to a non-negative distance.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .gradtape import (Divergence, Graph, Node, adam_init, adam_step, evaluate, load_params, save_params,
                       value_and_grad)
from .motion import SynthConfig, synth_dance
from .rotor import (N_JOINTS, ROT, Skeleton, axis_angle_to_quat, canonical_quat, default_skeleton,
                    frame_to_posequat, quat_angle, quat_mul, quat_slerp)


def pose_distance(p, q) -> np.ndarray:
    """sqrt of the summed squared per-joint geodesic angles; broadcasts over leading axes."""
    return np.sqrt(np.sum(quat_angle(p, q) ** 2, axis=-1))


# ---------------------------------------------------------------------------
# manifold and oracle

@dataclass(frozen=True)
class ManifoldConfig:
    bank_size: int = 12
    samples: int = 1500
    max_perturb: float = 0.1
    perturb_joints: int = 4
    seed: int = 0


@dataclass(frozen=True)
class PoseManifold:
    samples: np.ndarray
    bank: np.ndarray
    config: ManifoldConfig

    def __len__(self):
        return self.samples.shape[0]


def pose_bank(n: int, seed: int, skel: Skeleton | None = None) -> np.ndarray:
    """Standing pose plus n-1 frames drawn from synthetic dances."""
    rng = np.random.default_rng([seed, 7])
    bank = [np.tile([1.0, 0.0, 0.0, 0.0], (N_JOINTS, 1))]
    for k in range(n - 1):
        seq, _ = synth_dance(SynthConfig(seed=int(rng.integers(2 ** 31))), skel)
        bank.append(frame_to_posequat(seq.frames[rng.integers(len(seq))]))
    return np.stack(bank)


def perturb(poses: np.ndarray, magnitudes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Right-multiply each joint by a rotation of the given angle about a random axis."""
    axes = rng.normal(size=poses.shape[:-1] + (3,))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    delta = axis_angle_to_quat(axes * magnitudes[..., None])
    return canonical_quat(quat_mul(poses, delta))


def draw_between(bank, m: int, max_perturb: float, perturb_joints: int, rng: np.random.Generator) -> np.ndarray:
    """m slerps between random distinct bank pairs, each with a few jittered joints."""
    k = len(bank)
    a = rng.integers(k, size=m)
    b = (a + rng.integers(1, k, size=m)) % k
    mixed = quat_slerp(bank[a], bank[b], rng.uniform(size=m)[:, None])
    mags = np.zeros((m, N_JOINTS))
    for i in range(m):
        joints = rng.choice(N_JOINTS, size=perturb_joints, replace=False)
        mags[i, joints] = rng.uniform(0.0, max_perturb, size=perturb_joints)
    return perturb(mixed, mags, rng)


def build_manifold(cfg: ManifoldConfig = ManifoldConfig(), skel: Skeleton | None = None) -> PoseManifold:
    """Bank poses, then slerps between random bank pairs with small joint jitter."""
    if cfg.bank_size < 4 or cfg.samples < cfg.bank_size or not 0 <= cfg.max_perturb <= 0.1 \
            or not 0 <= cfg.perturb_joints <= N_JOINTS:
        raise ValueError(f"invalid manifold config {cfg}")
    bank = pose_bank(cfg.bank_size, cfg.seed, skel)
    rng = np.random.default_rng([cfg.seed, 11])
    mixed = draw_between(bank, cfg.samples - cfg.bank_size, cfg.max_perturb, cfg.perturb_joints, rng)
    return PoseManifold(np.concatenate([bank, mixed]), bank, cfg)


def oracle_distances(poses, manifold: PoseManifold, exclude_self: bool = False, chunk: int = 64) -> np.ndarray:
    """Exact nearest-sample distance for each of (n, 24, 4) poses.

    A fast acos scan finds the candidates within 1e-3 of the minimum, which
    are then rescored with the exact form. With ``exclude_self`` the poses
    must be the manifold samples themselves and each one's own entry is
    skipped.
    """
    samples = manifold.samples
    if len(samples) == 0:
        raise ValueError("empty manifold")
    poses = canonical_quat(np.asarray(poses, dtype=np.float64).reshape(-1, N_JOINTS, 4))
    out = np.empty(len(poses))
    for s in range(0, len(poses), chunk):
        block = poses[s:s + chunk]
        dots = np.abs(np.einsum("qjk,mjk->qmj", block, samples))
        fast = np.sqrt(np.sum((2.0 * np.arccos(np.minimum(dots, 1.0))) ** 2, axis=-1))
        if exclude_self:
            fast[np.arange(len(block)), np.arange(s, s + len(block))] = np.inf
        best = fast.min(axis=1)
        for i in range(len(block)):
            cand = np.flatnonzero(fast[i] <= best[i] + 1e-3)
            out[s + i] = pose_distance(block[i], samples[cand]).min()
    return out


def oracle_distance(pose, manifold: PoseManifold) -> float:
    return float(oracle_distances(np.asarray(pose)[None], manifold)[0])


# ---------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class NdfConfig:
    feature_dim: int = 8
    enc_hidden: int = 32
    dec_hidden: int = 64


def init_ndf_params(cfg: NdfConfig, skel: Skeleton, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)), np.zeros(fan_out)

    params = {}
    f = cfg.feature_dim
    for k in range(skel.n_joints):
        width = 4 if skel.parent[k] < 0 else 4 + f
        params[f"enc{k}.w1"], params[f"enc{k}.b1"] = dense(width, cfg.enc_hidden)
        params[f"enc{k}.w2"], params[f"enc{k}.b2"] = dense(cfg.enc_hidden, f)
    params["dec.w1"], params["dec.b1"] = dense(skel.n_joints * f, cfg.dec_hidden)
    params["dec.w2"] = np.zeros((cfg.dec_hidden, 1))
    params["dec.b2"] = np.zeros(1)
    return params


def ndf_graph(g: Graph, quats: Node, rows: int, skel: Skeleton, cfg: NdfConfig, prefix: str = "",
              trainable: bool = True) -> Node:
    """(rows, 24, 4) quaternions -> (rows,) distances. Weights are params or inputs."""
    leaf = g.param if trainable else g.input
    w = {}

    def get(name, shape):
        if name not in w:
            w[name] = leaf(prefix + name, shape)
        return w[name]

    f, h = cfg.feature_dim, cfg.enc_hidden
    feats = {}
    for k in range(skel.n_joints):
        q = g.reshape(g.slice(quats, 1, k, k + 1), (rows, 4))
        p = skel.parent[k]
        x = q if p < 0 else g.concat([q, feats[p]], axis=1)
        width = 4 if p < 0 else 4 + f
        hid = g.gelu(g.add(g.matmul(x, get(f"enc{k}.w1", (width, h))), get(f"enc{k}.b1", (h,))))
        feats[k] = g.add(g.matmul(hid, get(f"enc{k}.w2", (h, f))), get(f"enc{k}.b2", (f,)),
                         name=f"{prefix}v{k}")
    z = g.concat([feats[k] for k in range(skel.n_joints)], axis=1)
    hid = g.gelu(g.add(g.matmul(z, get("dec.w1", (skel.n_joints * f, cfg.dec_hidden))),
                       get("dec.b1", (cfg.dec_hidden,))))
    out = g.softplus(g.add(g.matmul(hid, get("dec.w2", (cfg.dec_hidden, 1))), get("dec.b2", (1,))))
    return g.reshape(out, (rows,), name=f"{prefix}distance")


@dataclass
class NdfModel:
    params: dict
    config: NdfConfig = NdfConfig()
    skeleton: Skeleton = field(default_factory=default_skeleton)
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def fresh(cls, cfg: NdfConfig = NdfConfig(), skel: Skeleton | None = None, seed: int = 0) -> "NdfModel":
        skel = skel or default_skeleton()
        return cls(init_ndf_params(cfg, skel, seed), cfg, skel)

    def _graph(self, rows):
        if rows not in self._graphs:
            g = Graph()
            q = g.input("quats", (rows, N_JOINTS, 4))
            ndf_graph(g, q, rows, self.skeleton, self.config)
            self._graphs[rows] = g
        return self._graphs[rows]

    def _run(self, quats):
        quats = canonical_quat(np.asarray(quats, dtype=np.float64).reshape(-1, N_JOINTS, 4))
        return evaluate(self._graph(len(quats)), {**self.params, "quats": quats})

    def distances(self, quats) -> np.ndarray:
        return self._run(quats)["distance"]

    def features(self, quats) -> np.ndarray:
        """Per-joint encoder outputs, (n, 24, F)."""
        vals = self._run(quats)
        return np.stack([vals[f"v{k}"] for k in range(self.skeleton.n_joints)], axis=1)

    def header(self) -> dict:
        return {"kind": "ndf", **asdict(self.config)}

    def save(self, path) -> None:
        save_params(path, self.params, self.header())

    @classmethod
    def load(cls, path, skel: Skeleton | None = None) -> "NdfModel":
        params, header = load_params(path)
        if not header or header.get("kind") != "ndf":
            raise ValueError(f"{path}: not a distance-field checkpoint")
        cfg = NdfConfig(**{k: header[k] for k in ("feature_dim", "enc_hidden", "dec_hidden")})
        model = cls(params, cfg, skel or default_skeleton())
        expected = init_ndf_params(cfg, model.skeleton)
        for name, arr in expected.items():
            if name not in params or params[name].shape != arr.shape:
                raise ValueError(f"{path}: parameter {name!r} missing or mis-shaped")
        return model


def ndf_distance(model: NdfModel, pose) -> float:
    return float(model.distances(np.asarray(pose)[None])[0])


# ---------------------------------------------------------------------------
# plausibility loss

def pmc_graph(g: Graph, frames: Node, rows: int, skel: Skeleton, cfg: NdfConfig, prefix: str = "ndf/") -> Node:
    """Mean distance of (rows, 151) frames; distance-field weights enter as inputs."""
    six = g.reshape(g.slice(frames, 1, ROT.start, ROT.stop), (rows, N_JOINTS, 6))
    quats = g.matrix_to_quat(g.sixd_to_matrix(six))
    return g.mean(ndf_graph(g, quats, rows, skel, cfg, prefix, trainable=False), name=f"{prefix}pmc")


def ndf_bindings(model: NdfModel, prefix: str = "ndf/") -> dict:
    return {prefix + k: v for k, v in model.params.items()}


def pmc_loss(model: NdfModel, frames) -> float:
    """Mean distance-field value over the poses of (N, 151) frames."""
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, ROT.stop + 3)
    if len(frames) == 0:
        raise ValueError("pmc_loss needs at least one frame")
    return float(np.mean(model.distances(frame_to_posequat(frames))))


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class NdfTrainConfig:
    steps: int = 2000
    batch: int = 128
    lr: float = 2e-3
    negatives: int = 4000
    max_noise: float = 1.0
    seed: int = 0
    time_budget: float | None = None


def negative_poses(manifold: PoseManifold, n: int, max_noise: float, rng: np.random.Generator) -> np.ndarray:
    """Manifold samples with per-joint noise of magnitude U[0, max_noise].

    Half of the draws perturb every joint; the other half perturb a random
    subset of joints so intermediate distances are also represented.
    """
    base = manifold.samples[rng.integers(len(manifold), size=n)]
    mags = rng.uniform(0.0, max_noise, size=(n, N_JOINTS))
    partial = rng.uniform(size=n) < 0.5
    keep = rng.uniform(size=(n, N_JOINTS)) < rng.uniform(size=(n, 1))
    mags = np.where(partial[:, None] & ~keep, 0.0, mags)
    return perturb(base, mags, rng)


def train_ndf(manifold: PoseManifold, cfg: NdfTrainConfig = NdfTrainConfig(), ndf_cfg: NdfConfig = NdfConfig(),
              skel: Skeleton | None = None, log=None) -> tuple[NdfModel, list]:
    """Regress the network onto the oracle distance; returns (model, loss trace)."""
    if len(manifold) < 100:
        raise ValueError("train_ndf needs a manifold of at least 100 samples")
    skel = skel or default_skeleton()
    rng = np.random.default_rng([cfg.seed, 3])
    neg = negative_poses(manifold, cfg.negatives, cfg.max_noise, rng)
    neg_target = oracle_distances(neg, manifold)

    model = NdfModel.fresh(ndf_cfg, skel, cfg.seed)
    # start the output bias at the mean target so early steps shape, not shift
    mean_target = 0.5 * neg_target.mean()
    model.params["dec.b2"] = np.array([np.log(np.expm1(mean_target))])
    half = cfg.batch // 2
    g = Graph()
    q = g.input("quats", (2 * half, N_JOINTS, 4))
    target = g.input("target", (2 * half,))
    loss = g.mse(ndf_graph(g, q, 2 * half, skel, ndf_cfg), target)

    params, state, trace = model.params, adam_init(model.params), []
    start = time.perf_counter()
    for step in range(cfg.steps):
        pos = manifold.samples[rng.integers(len(manifold), size=half)]
        idx = rng.integers(len(neg), size=half)
        batch = {"quats": np.concatenate([pos, neg[idx]]),
                 "target": np.concatenate([np.zeros(half), neg_target[idx]])}
        value, grads = value_and_grad(g, {**params, **batch}, loss)
        if not np.isfinite(value):
            raise Divergence(step, value)
        trace.append(value)
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
        params, state = adam_step(params, grads, state, lr=lr)
        if log and step % 250 == 0:
            log(f"ndf step {step}: loss {value:.5f}")
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            break
    return NdfModel(params, ndf_cfg, skel), trace


def pearson(a, b) -> float:
    return float(np.corrcoef(np.asarray(a, float), np.asarray(b, float))[0, 1])


def auc(lower, higher) -> float:
    """P(score from ``lower`` < score from ``higher``), ties counted half."""
    lower = np.asarray(lower, float)[:, None]
    higher = np.asarray(higher, float)[None, :]
    return float(np.mean((lower < higher) + 0.5 * (lower == higher)))


def evaluate_ndf(model: NdfModel, manifold: PoseManifold, n: int = 400, seed: int = 1) -> dict:
    """Held-out quality: Pearson on fresh queries and member-vs-0.5 rad AUC."""
    rng = np.random.default_rng([seed, 5])
    cfg = manifold.config
    near = draw_between(manifold.bank, n, cfg.max_perturb, cfg.perturb_joints, rng)
    far = negative_poses(manifold, n, 1.0, rng)
    queries = np.concatenate([near, far])
    truth = oracle_distances(queries, manifold)
    pred = model.distances(queries)
    members = manifold.samples[rng.choice(len(manifold), size=n, replace=False)]
    shifted = perturb(members, np.full(members.shape[:2], 0.5), rng)
    return {"pearson": pearson(pred, truth), "auc": auc(model.distances(members), model.distances(shifted)),
            "member_mean": float(model.distances(members).mean()), "perturbed_mean": float(model.distances(shifted).mean())}
