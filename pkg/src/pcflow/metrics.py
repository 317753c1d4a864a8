"""Evaluation metrics and trajectory diagnostics.

Distances use the squared conventions throughout: Chamfer is the sum of
mean squared nearest-neighbor distances in both directions, and EMD is
the minimum mean squared pair distance over bijections (exact assignment
up to 512 points, an entropic-plan rounding upper bound above, flagged).

1-NNA is the leave-one-out nearest-neighbor two-sample accuracy over the
union of a generated and a reference set; 0.5 means the sets are
indistinguishable.  Distance ties count toward "different set", which
biases against optimistic scores in degenerate cases.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import _as_points
from .ot import SinkhornConfig, _solve_pair, squared_distances
from .rng import RngState

EMD_EXACT_MAX = 512

EmdResult = namedtuple("EmdResult", "value approximate")
CurvatureReport = namedtuple("CurvatureReport", "per_step max_value")


def chamfer(a, b) -> float:
    """Squared Chamfer distance: mean_i min_j d2 + mean_j min_i d2."""
    d2 = squared_distances(_as_points(a), _as_points(b))
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd(a, b) -> EmdResult:
    """Minimum mean squared pair distance over bijections.

    Exact via assignment for up to 512 points; larger clouds get a greedy
    rounding of the entropic plan, which is a feasible bijection and so an
    upper bound on the exact value (approximate=True).
    """
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape[0] != pb.shape[0]:
        raise ValueError("EMD requires equally sized clouds")
    n = pa.shape[0]
    d2 = squared_distances(pa, pb)
    if n <= EMD_EXACT_MAX:
        rows, cols = linear_sum_assignment(d2)
        return EmdResult(float(d2[rows, cols].mean()), False)
    cfg = SinkhornConfig.for_clouds(pa, pb, max_iters=200)
    prob, _ = _solve_pair(d2, cfg, symmetric=False)
    eps = cfg.epsilon_end
    plan = np.exp((prob.f[0][:, None] + prob.g[0][None, :] - d2) / eps)
    taken = np.zeros(n, dtype=bool)
    perm = np.empty(n, dtype=np.int64)
    order = np.argsort(d2[np.arange(n), np.argmax(plan, axis=1)])
    for i in order:
        row = np.where(taken, -np.inf, plan[i])
        j = int(np.argmax(row))
        perm[i] = j
        taken[j] = True
    return EmdResult(float(d2[np.arange(n), perm].mean()), True)


def _metric_value(kind, a, b):
    if kind == "CD":
        return chamfer(a, b)
    if kind == "EMD":
        return emd(a, b).value
    raise ValueError(f"unknown distance kind {kind!r}")


def chamfer_cross_matrix(clouds_a, clouds_b):
    """All-pairs squared Chamfer distances between two lists of clouds.

    Clouds within each list must share a point count; the computation
    row-chunks one stacked array to keep peak memory modest.
    """
    A = np.stack([_as_points(c) for c in clouds_a])
    B = np.stack([_as_points(c) for c in clouds_b])
    na, n, _ = A.shape
    nb, m, _ = B.shape
    flatB = B.reshape(nb * m, 3)
    out = np.empty((na, nb))
    for i in range(na):
        d2 = squared_distances(A[i], flatB).reshape(n, nb, m)
        out[i] = d2.min(axis=2).mean(axis=0) + d2.min(axis=0).mean(axis=1)
    return out


def pairwise_distance_matrix(clouds_a, clouds_b, kind="CD"):
    if kind == "CD":
        return chamfer_cross_matrix(clouds_a, clouds_b)
    out = np.empty((len(clouds_a), len(clouds_b)))
    for i, ca in enumerate(clouds_a):
        for j, cb in enumerate(clouds_b):
            out[i, j] = emd(ca, cb).value
    return out


def one_nna(gen, ref, kind="CD") -> float:
    """Leave-one-out 1-NN two-sample accuracy over gen + ref.

    Accuracy is the fraction of elements whose nearest neighbor carries the
    same set label; exact distance ties resolve toward the other set.
    """
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("both sets must be nonempty")
    clouds = list(gen) + list(ref)
    labels = np.array([0] * len(gen) + [1] * len(ref))
    d = pairwise_distance_matrix(clouds, clouds, kind)
    np.fill_diagonal(d, np.inf)
    correct = 0
    for i in range(len(clouds)):
        dmin = d[i].min()
        tied = np.flatnonzero(d[i] == dmin)
        same = (labels[tied] == labels[i]).all()
        correct += int(same)
    return correct / len(clouds)


def coverage(gen, ref, kind="CD") -> float:
    """Fraction of reference clouds that are the nearest reference of some
    generated cloud (ties resolve to the first index, deterministically)."""
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("both sets must be nonempty")
    d = pairwise_distance_matrix(gen, ref, kind)
    hit = set(int(j) for j in d.argmin(axis=1))
    return len(hit) / len(ref)


def trajectory_curvature(traj) -> CurvatureReport:
    """Mean squared change of the evaluated field between successive steps.

    per_step[i] = mean over points of ||v_{i+1} - v_i||^2; a perfectly
    straight flow gives zeros.
    """
    vs = traj.vs if hasattr(traj, "vs") else np.asarray(traj)
    if vs.shape[0] < 2:
        raise ValueError("curvature needs at least two recorded steps")
    dv = vs[1:] - vs[:-1]
    per_step = (dv**2).sum(axis=2).mean(axis=1)
    return CurvatureReport(per_step, float(per_step.max()))


def jacobian_frobenius(field, x, t, probes=16, rng: RngState | None = None, h=1e-3) -> float:
    """Hutchinson estimate of the Frobenius norm of d field / d x at (x, t).

    ||J||_F^2 = E ||J z||^2 over standard-normal probes z, with each J z
    taken by central finite differences; requires a C^1 field.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if rng is None:
        rng = RngState(0)
    x = _as_points(x)
    acc = 0.0
    for _ in range(probes):
        z = rng.normal(x.shape)
        jz = (np.asarray(field(x + h * z, t)) - np.asarray(field(x - h * z, t))) / (2.0 * h)
        acc += float((jz**2).sum())
    return float(np.sqrt(acc / probes))


@dataclass
class EvalReport:
    onenna_cd: float
    onenna_emd: float
    cov_cd: float
    cov_emd: float
    steps: int
    gen_count: int
    ref_count: int


def evaluate_sets(gen, ref, steps) -> EvalReport:
    """All four generation metrics for one generated set at one step count."""
    return EvalReport(
        onenna_cd=one_nna(gen, ref, "CD"),
        onenna_emd=one_nna(gen, ref, "EMD"),
        cov_cd=coverage(gen, ref, "CD"),
        cov_emd=coverage(gen, ref, "EMD"),
        steps=int(steps),
        gen_count=len(gen),
        ref_count=len(ref),
    )
