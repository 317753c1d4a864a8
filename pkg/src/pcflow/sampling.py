"""Euler integration of the learned vector field.

The ODE dx/dt = v(x, t) is stepped on the uniform grid t_i = i/T with
left-endpoint evaluation, matching the training-time parameterization.
Trajectories record (t_i, x_i, v_i) before each update, so successive
records satisfy x_{i+1} = x_i + (1/T) v_i exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .geometry import NormalizationStats, PointCloud, denormalize
from .network import VectorFieldParams, forward
from .rng import RngState


@dataclass
class Trajectory:
    """Euler records: ts (T,), xs (T, N, 3), vs (T, N, 3), final (N, 3)."""

    ts: np.ndarray
    xs: np.ndarray
    vs: np.ndarray
    final: np.ndarray

    @property
    def step_count(self):
        return len(self.ts)


def euler_sample(
    params: VectorFieldParams,
    x0,
    steps,
    cond=None,
    stats: NormalizationStats | None = None,
    use_ema=True,
    record=True,
):
    """Integrate one cloud from t=0 to t=1 in `steps` Euler updates.

    Returns (PointCloud, Trajectory or None).  Denormalization, when stats
    are given, applies to the returned cloud only; the trajectory stays in
    model units for diagnostics.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    n = x.shape[0]
    dt = 1.0 / steps
    ts = np.empty(steps)
    xs = np.empty((steps, n, 3)) if record else None
    vs = np.empty((steps, n, 3)) if record else None
    for i in range(steps):
        t = i * dt
        v = forward(params, x, t, cond=cond, use_ema=use_ema)
        if record:
            ts[i] = t
            xs[i] = x
            vs[i] = v
        x = x + dt * v
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite state at Euler step {i}")
    traj = Trajectory(ts, xs, vs, x.copy()) if record else None
    out = PointCloud(x if stats is None else denormalize(x, stats).points)
    return out, traj


def generate_set(
    params: VectorFieldParams,
    count,
    n,
    steps,
    rng: RngState,
    cond=None,
    stats: NormalizationStats | None = None,
    use_ema=True,
):
    """count independent samples from fresh standard-normal starts.

    All clouds share the time grid, so the batch integrates jointly; when
    cond is given every sample conditions on the same latent.
    """
    if count == 0:
        return []
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.normal((count, n, 3))
    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(count, i * dt)
        v = forward(params, x, t, cond=cond, use_ema=use_ema)
        x = x + dt * v
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite state at Euler step {i}")
    if stats is not None:
        x = x * stats.global_scale + stats.global_mean
    return [PointCloud(x[k]) for k in range(count)]
