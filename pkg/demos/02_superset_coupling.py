"""Offline superset coupling, two ways.

A dense noise superset is coupled to a dense surface superset once:
exactly (assignment) for small supersets, or by deforming the noise onto
the surface with a Sinkhorn-divergence gradient flow for large ones.
Training pairs are then just row subsamples of the cached alignment, so
the online cost is an array index.
"""

import time
from pathlib import Path

import numpy as np
from scipy import stats

from pcflow import RngState, Superset, WgfConfig, generate_shape
from pcflow.coupling import (
    load_coupling,
    precompute_superset_coupling,
    sample_coupled_pair,
    save_coupling,
)

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
rng = RngState(21)

print("== exact route (m = 2048) ==")
data = Superset(generate_shape("torus", 2048, rng.fork(0)).points, kind="data")
t0 = time.perf_counter()
exact = precompute_superset_coupling(data, rng.fork(1), shape_id="torus")
print(f"  solved in {time.perf_counter() - t0:.1f}s; mean row cost {exact.mean_row_cost():.3f}")

save_coupling(out / "torus.cpl", exact)
reloaded = load_coupling(out / "torus.cpl")
print(f"  cache round trip ok (float32 storage, max error "
      f"{np.abs(reloaded.x0_rows - exact.x0_rows).max():.1e})")

print("\n== gradient-flow route (m = 2048) ==")
t0 = time.perf_counter()
flowed = precompute_superset_coupling(
    data, rng.fork(2), method="wgf", shape_id="torus-wgf", wgf_cfg=WgfConfig(iters=30)
)
print(f"  deformed in {time.perf_counter() - t0:.1f}s; mean row cost {flowed.mean_row_cost():.3f}")
ring = np.sqrt(flowed.x1_rows[:, 0] ** 2 + flowed.x1_rows[:, 1] ** 2)
resid = np.sqrt((ring - 1.0) ** 2 + flowed.x1_rows[:, 2] ** 2)
print(f"  deformed rows sit near the torus tube: mean |r - 0.3| = {np.abs(resid - 0.3).mean():.3f}")

print("\n== online subsampling keeps both marginals ==")
draw_rng = rng.fork(3)
pool = np.vstack([sample_coupled_pair(exact, 256, draw_rng).x0 for _ in range(200)])
ks = max(stats.kstest(pool[:, ax], "norm").statistic for ax in range(3))
print(f"  x0 rows over 200 draws: worst per-axis KS vs N(0,1) = {ks:.4f}")
pair = sample_coupled_pair(exact, 256, rng.fork(4))
print(f"  one sampled pair: mean cost {pair.mean_cost():.3f} "
      f"(superset mean row cost {exact.mean_row_cost():.3f})")
