"""Train the neural distance field on the synthetic pose manifold and score poses with it."""
import time

import numpy as np

from pamd.posefield import build_manifold, evaluate_ndf, oracle_distances, perturb, train_ndf

manifold = build_manifold()
print(f"manifold: {len(manifold)} poses around {len(manifold.bank)} key poses")

start = time.perf_counter()
ndf, trace = train_ndf(manifold)
print(f"trained in {time.perf_counter() - start:.0f}s, loss {trace[0]:.4f} -> {np.mean(trace[-50:]):.4f}")
print({k: round(v, 4) for k, v in evaluate_ndf(ndf, manifold).items()})

rng = np.random.default_rng(7)
members = manifold.samples[:5]
for mag in (0.0, 0.2, 0.5, 1.0):
    poses = perturb(members, np.full((5, 24), mag), rng) if mag else members
    print(f"every joint moved {mag:.1f} rad: field {ndf.distances(poses).mean():.3f}, "
          f"exact {oracle_distances(poses, manifold).mean():.3f}")
