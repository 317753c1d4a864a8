"""Couplings between noise and data point clouds.

Four strategies produce the (x0, x1) training pairs for flow matching:

* independent  -- fresh Gaussian noise against the data cloud;
* minibatch OT -- batch-level assignment treating each cloud as one flat
  vector (no point alignment);
* equivariant OT -- minibatch OT whose pairwise cost first aligns points
  with an inner assignment, so the cost is minimized over permutations;
* superset     -- the offline route: one dense noise superset is coupled
  to a dense data superset once (exact assignment for small supersets, a
  Sinkhorn-divergence gradient flow for large ones) and training pairs
  are subsampled from the aligned rows online.

The hybrid perturbation x0' = sqrt(1-beta) x0 + sqrt(beta) eps blends the
superset coupling toward the independent one while leaving the standard
normal marginal of x0 untouched for every beta.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .geometry import Superset, _as_points, generate_superset, sample_noise_superset
from .ot import exact_superset_ot, hungarian, squared_distances, wasserstein_gradient_flow
from .rng import RngState

EXACT_SUPERSET_MAX = 10_000
EQUIVARIANT_GUARD = 4096  # max B * N admitted to the inner-assignment baseline

_CACHE_MAGIC = b"PCPL"
_CACHE_VERSION = 1
_METHOD_CODES = {"exact_hungarian": 0, "wgf": 1}
_METHOD_NAMES = {v: k for k, v in _METHOD_CODES.items()}


@dataclass
class TrainingPair:
    """Coupled (x0, x1), both (N, 3); optional condition latent."""

    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.shape != self.x1.shape or self.x0.ndim != 2 or self.x0.shape[1] != 3:
            raise ValueError(f"x0/x1 must share an (N, 3) shape, got {self.x0.shape} vs {self.x1.shape}")
        if not (np.isfinite(self.x0).all() and np.isfinite(self.x1).all()):
            raise ValueError("training pair contains non-finite values")

    @property
    def n(self):
        return self.x0.shape[0]

    def mean_cost(self):
        """Mean squared pair distance per point."""
        return float(((self.x0 - self.x1) ** 2).sum(axis=1).mean())


@dataclass
class HybridConfig:
    beta: float = 0.2

    def __post_init__(self):
        if not 0.0 <= float(self.beta) <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        self.beta = float(self.beta)


@dataclass
class SupersetCoupling:
    """Row-aligned superset pair: row i of x0_rows couples to row i of x1_rows."""

    shape_id: str
    x0_rows: np.ndarray
    x1_rows: np.ndarray
    method: str
    seed: int = 0
    meta: str = ""  # creation-config digest (hex)

    def __post_init__(self):
        self.x0_rows = np.asarray(self.x0_rows, dtype=np.float64)
        self.x1_rows = np.asarray(self.x1_rows, dtype=np.float64)
        if self.x0_rows.shape != self.x1_rows.shape or self.x0_rows.ndim != 2 or self.x0_rows.shape[1] != 3:
            raise ValueError("x0_rows and x1_rows must share an (M, 3) shape")
        if self.method not in _METHOD_CODES:
            raise ValueError(f"unknown coupling method {self.method!r}")

    @property
    def m(self):
        return self.x0_rows.shape[0]

    def mean_row_cost(self):
        return float(((self.x0_rows - self.x1_rows) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# online couplings
# ---------------------------------------------------------------------------


def independent_pair(data, rng: RngState) -> TrainingPair:
    """x1 = data, x0 = fresh i.i.d. standard-normal rows."""
    x1 = _as_points(data)
    return TrainingPair(rng.normal(x1.shape), x1.copy())


def _flatten_cost(noises, datas):
    nf = np.stack([_as_points(c).reshape(-1) for c in noises])
    df = np.stack([_as_points(c).reshape(-1) for c in datas])
    d = (nf * nf).sum(1)[:, None] + (df * df).sum(1)[None, :] - 2.0 * (nf @ df.T)
    return np.maximum(d, 0.0, out=d)


def minibatch_ot_pairs(noises, datas) -> list[TrainingPair]:
    """Batch-level assignment between whole clouds flattened to vectors.

    No point-level alignment happens; only which noise goes with which data
    cloud is optimized.
    """
    if len(noises) != len(datas) or len(noises) == 0:
        raise ValueError("need equal, nonzero batch sizes")
    shapes = {(_as_points(c).shape) for c in list(noises) + list(datas)}
    if len(shapes) != 1:
        raise ValueError(f"all clouds must share one (N, 3) shape, got {shapes}")
    assign = hungarian(_flatten_cost(noises, datas))
    return [
        TrainingPair(_as_points(noises[i]).copy(), _as_points(datas[assign.perm[i]]).copy())
        for i in range(len(noises))
    ]


def equivariant_ot_pairs(noises, datas, guard=EQUIVARIANT_GUARD) -> list[TrainingPair]:
    """Batch-level assignment under permutation-aligned pairwise costs.

    Every (noise_i, data_j) cost is first minimized over point permutations
    with an inner assignment solve; the returned x1 rows are reordered by
    the winning permutation, so pair rows correspond.

    Cost grows as O(B^2 N^3); batches with B * N above the guard are
    refused with an estimate instead of silently stalling.
    """
    if len(noises) != len(datas) or len(noises) == 0:
        raise ValueError("need equal, nonzero batch sizes")
    b = len(noises)
    n = _as_points(noises[0]).shape[0]
    if b * n > guard:
        flops = b * b * n**3
        raise ConfigError(
            f"equivariant OT refused: B*N = {b * n} exceeds the guard {guard} "
            f"(roughly {flops:.2e} flops of inner assignments)"
        )
    inner_cost = np.empty((b, b))
    inner_perm = {}
    for i in range(b):
        xi = _as_points(noises[i])
        for j in range(b):
            res = hungarian(squared_distances(xi, _as_points(datas[j])))
            inner_cost[i, j] = res.total_cost
            inner_perm[i, j] = res.perm
    outer = hungarian(inner_cost)
    pairs = []
    for i in range(b):
        j = int(outer.perm[i])
        aligned = _as_points(datas[j])[inner_perm[i, j]]
        pairs.append(TrainingPair(_as_points(noises[i]).copy(), aligned))
    return pairs


def hybrid_perturb(x0, cfg, rng: RngState) -> np.ndarray:
    """Blend coupled noise with fresh Gaussian noise.

    x0' = sqrt(1 - beta) * x0 + sqrt(beta) * eps keeps the standard-normal
    marginal exactly for any beta; beta 0 returns x0 unchanged and beta 1
    returns noise independent of x0.
    """
    if not isinstance(cfg, HybridConfig):
        cfg = HybridConfig(cfg)
    x0 = _as_points(x0)
    eps = rng.normal(x0.shape)
    return np.sqrt(1.0 - cfg.beta) * x0 + np.sqrt(cfg.beta) * eps


# ---------------------------------------------------------------------------
# superset coupling: precomputation, persistence, online subsampling
# ---------------------------------------------------------------------------


def coupling_digest(shape_id, m, method, seed, extra=None) -> str:
    payload = {"shape_id": shape_id, "m": int(m), "method": method, "seed": int(seed)}
    if extra:
        payload["extra"] = extra
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def precompute_superset_coupling(
    data,
    rng: RngState,
    method="exact_hungarian",
    m=None,
    shape_id="shape",
    wgf_cfg=None,
    exact_threshold=EXACT_SUPERSET_MAX,
) -> SupersetCoupling:
    """Couple a dense noise superset to a data superset offline.

    ``data`` is either a Superset or a shape-kind string to be sampled at
    size m.  For method ``exact_hungarian`` both supersets keep their exact
    draws and rows are aligned by the minimum-cost bijection; for ``wgf``
    the x1 rows are the noise rows deformed onto the data by the gradient
    flow (row correspondence is the identity by construction).
    """
    if isinstance(data, str):
        if m is None:
            raise ValueError("m is required when data is a shape kind")
        data = generate_superset(data, m, rng, )
    data_pts = _as_points(data)
    m = data_pts.shape[0]
    if method not in _METHOD_CODES:
        raise ConfigError(f"unknown coupling method {method!r}; expected exact_hungarian or wgf")
    if method == "exact_hungarian" and m > exact_threshold:
        raise ConfigError(
            f"exact_hungarian coupling limited to supersets of {exact_threshold}; "
            f"got {m}; use method='wgf'"
        )
    noise = sample_noise_superset(m, rng)
    if method == "exact_hungarian":
        assign = exact_superset_ot(noise, Superset(data_pts, kind="data"), threshold=exact_threshold)
        x0_rows = noise.points
        x1_rows = data_pts[assign.perm]
    else:
        deformed, _ = wasserstein_gradient_flow(noise, Superset(data_pts, kind="data"), wgf_cfg)
        x0_rows = noise.points
        x1_rows = deformed.points
    digest = coupling_digest(shape_id, m, method, rng.seed)
    return SupersetCoupling(shape_id, x0_rows, x1_rows, method, seed=rng.seed, meta=digest)


def save_coupling(path, coupling: SupersetCoupling):
    """Binary cache: little-endian header + two float32 (M, 3) blocks."""
    sid = coupling.shape_id.encode("utf-8")
    digest = bytes.fromhex(coupling.meta) if coupling.meta else b"\x00" * 32
    if len(digest) != 32:
        raise ValueError("meta must be a 64-hex-char digest")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IQBQ", _CACHE_VERSION, coupling.m, _METHOD_CODES[coupling.method], coupling.seed))
        fh.write(digest)
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(coupling.x0_rows.astype("<f4").tobytes())
        fh.write(coupling.x1_rows.astype("<f4").tobytes())


def load_coupling(path) -> SupersetCoupling:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CACHE_MAGIC:
        raise DataFormatError(f"bad coupling cache magic in {path}")
    off = 4
    version, m, method_code, seed = struct.unpack_from("<IQBQ", blob, off)
    off += struct.calcsize("<IQBQ")
    if version != _CACHE_VERSION:
        raise DataFormatError(f"unsupported coupling cache version {version}")
    digest = blob[off : off + 32].hex()
    off += 32
    (sid_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    shape_id = blob[off : off + sid_len].decode("utf-8")
    off += sid_len
    want = m * 3 * 4
    if len(blob) != off + 2 * want:
        raise DataFormatError(f"coupling cache truncated: {path}")
    x0 = np.frombuffer(blob, dtype="<f4", count=m * 3, offset=off).reshape(m, 3)
    x1 = np.frombuffer(blob, dtype="<f4", count=m * 3, offset=off + want).reshape(m, 3)
    return SupersetCoupling(
        shape_id, x0.astype(np.float64), x1.astype(np.float64), _METHOD_NAMES[method_code], seed=seed, meta=digest
    )


def sample_coupled_pair(coupling: SupersetCoupling, n, rng: RngState) -> TrainingPair:
    """Subsample n aligned rows uniformly without replacement."""
    if n > coupling.m:
        raise ValueError(f"cannot sample {n} rows from a coupling of {coupling.m}")
    idx = rng.choice_no_replace(coupling.m, int(n))
    return TrainingPair(coupling.x0_rows[idx], coupling.x1_rows[idx])


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def bench_couplings(
    batch_sizes,
    n,
    trials,
    rng: RngState,
    shape_kinds=("sphere", "torus", "box-frame"),
    superset_m=4096,
    superset_method="exact_hungarian",
    guard=EQUIVARIANT_GUARD,
):
    """Mean pair cost and wall-clock per coupling method per batch size.

    Returns a list of row dicts with keys method, B, N, mean_cost,
    reduction_pct, seconds, note.  The independent row defines the 0%
    reduction baseline; equivariant rows above the size guard are skipped
    with a note.  All draws are deterministic in rng.
    """
    shape_kinds = tuple(shape_kinds)
    couplings = {
        kind: precompute_superset_coupling(
            kind, rng.fork(1000 + k), m=superset_m, method=superset_method, shape_id=kind
        )
        for k, kind in enumerate(shape_kinds)
    }

    rows = []
    for b in batch_sizes:
        datas_per_trial = []
        noises_per_trial = []
        for t in range(trials):
            r = rng.fork(b * 131 + t)
            datas = [
                generate_superset(shape_kinds[(t * b + i) % len(shape_kinds)], n, r.fork(i)).points
                for i in range(b)
            ]
            noises = [r.fork(10_000 + i).normal((n, 3)) for i in range(b)]
            datas_per_trial.append(datas)
            noises_per_trial.append(noises)

        def stat(fn):
            t0 = time.perf_counter()
            costs = []
            for t, (datas, noises) in enumerate(zip(datas_per_trial, noises_per_trial)):
                costs.extend(p.mean_cost() for p in fn(t, noises, datas))
            return float(np.mean(costs)), time.perf_counter() - t0

        base, base_t = stat(lambda t, ns, ds: [TrainingPair(x0, x1) for x0, x1 in zip(ns, ds)])
        rows.append(dict(method="independent", B=b, N=n, mean_cost=base, reduction_pct=0.0,
                         seconds=base_t, note=""))

        mb, mb_t = stat(lambda t, ns, ds: minibatch_ot_pairs(ns, ds))
        rows.append(dict(method="minibatch_ot", B=b, N=n, mean_cost=mb,
                         reduction_pct=100.0 * (1.0 - mb / base), seconds=mb_t, note=""))

        if b * n <= guard:
            eq, eq_t = stat(lambda t, ns, ds: equivariant_ot_pairs(ns, ds, guard=guard))
            rows.append(dict(method="equivariant_ot", B=b, N=n, mean_cost=eq,
                             reduction_pct=100.0 * (1.0 - eq / base), seconds=eq_t, note=""))
        else:
            rows.append(dict(method="equivariant_ot", B=b, N=n, mean_cost=float("nan"),
                             reduction_pct=float("nan"), seconds=0.0,
                             note=f"skipped: B*N {b * n} over guard {guard}"))

        def superset_fn(t, noises, datas):
            del noises, datas
            r = rng.fork(50_000 + b * 7919 + t)
            return [
                sample_coupled_pair(couplings[shape_kinds[(t * b + i) % len(shape_kinds)]], n, r.fork(i))
                for i in range(b)
            ]

        sp, sp_t = stat(superset_fn)
        rows.append(dict(method="superset", B=b, N=n, mean_cost=sp,
                         reduction_pct=100.0 * (1.0 - sp / base), seconds=sp_t, note=""))
    return rows
