"""Point-cloud data types, synthetic shape generators, normalization, I/O.

Coordinates are float64 throughout.  A point cloud is a set: row order
carries no meaning, and every operation here is either order-agnostic or
explicitly documented as index-based (subsampling).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import RngState

SHAPE_KINDS = ("sphere", "torus", "box-frame", "two-gaussians-3d")


def _as_points(obj):
    pts = obj.points if hasattr(obj, "points") else np.asarray(obj, dtype=np.float64)
    return np.asarray(pts, dtype=np.float64)


@dataclass
class PointCloud:
    """N x 3 coordinates with set semantics."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    @property
    def n(self):
        return self.points.shape[0]

    def __len__(self):
        return self.n


@dataclass
class Superset:
    """Dense M x 3 point set used for offline coupling precomputation."""

    points: np.ndarray
    kind: str = "data"  # "data" or "noise"

    def __post_init__(self):
        if self.kind not in ("data", "noise"):
            raise ValueError(f"superset kind must be 'data' or 'noise', got {self.kind!r}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (M, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("superset must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("superset contains non-finite coordinates")
        self.points = pts

    @property
    def m(self):
        return self.points.shape[0]

    def __len__(self):
        return self.m


@dataclass
class NormalizationStats:
    """Global mean coordinate and positive global scale."""

    global_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_scale: float = 1.0

    def __post_init__(self):
        self.global_mean = np.asarray(self.global_mean, dtype=np.float64).reshape(3)
        self.global_scale = float(self.global_scale)
        if not np.isfinite(self.global_mean).all() or not np.isfinite(self.global_scale):
            raise ValueError("normalization stats must be finite")
        if self.global_scale <= 0:
            raise ValueError("global_scale must be positive")


# ---------------------------------------------------------------------------
# Shape generators.  Each draws points uniformly with respect to the shape's
# natural measure (surface area for sphere/torus, edge length for the frame,
# mixture density for the Gaussian pair).
# ---------------------------------------------------------------------------


def _gen_sphere(n, rng, radius=1.0):
    # normalized Gaussians are exactly area-uniform on the sphere
    u = rng.normal((n, 3))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    # resample the (measure-zero) degenerate draws
    while (norms == 0).any():
        bad = norms[:, 0] == 0
        u[bad] = rng.normal((int(bad.sum()), 3))
        norms = np.linalg.norm(u, axis=1, keepdims=True)
    return radius * u / norms


def _gen_torus(n, rng, major=1.0, minor=0.3):
    # area element is proportional to (major + minor*cos v); rejection-sample v
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        want = n - filled
        u = rng.uniform(0.0, 2.0 * np.pi, want)
        v = rng.uniform(0.0, 2.0 * np.pi, want)
        accept = rng.uniform(0.0, 1.0, want) <= (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        k = len(u)
        ring = major + minor * np.cos(v)
        out[filled : filled + k, 0] = ring * np.cos(u)
        out[filled : filled + k, 1] = ring * np.sin(u)
        out[filled : filled + k, 2] = minor * np.sin(v)
        filled += k
    return out


def _gen_box_frame(n, rng, half=1.0):
    # 12 equal-length cube edges; uniform over total edge length
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
    )
    edges = []
    for i in range(8):
        for j in range(i + 1, 8):
            if np.sum(np.abs(corners[i] - corners[j])) == 2:  # adjacent corners
                edges.append((corners[i], corners[j]))
    edges = np.array(edges)  # (12, 2, 3)
    idx = rng.integers(0, len(edges), n)
    t = rng.uniform(0.0, 1.0, (n, 1))
    a, b = edges[idx, 0], edges[idx, 1]
    return half * (a + t * (b - a))


def _gen_two_gaussians(n, rng, offset=1.0, sigma=0.25):
    # balanced mixture of two isotropic Gaussians at (+-offset, 0, 0)
    side = rng.integers(0, 2, n) * 2 - 1
    pts = sigma * rng.normal((n, 3))
    pts[:, 0] += side * offset
    return pts


_GENERATORS = {
    "sphere": _gen_sphere,
    "torus": _gen_torus,
    "box-frame": _gen_box_frame,
    "two-gaussians-3d": _gen_two_gaussians,
}


def generate_shape(kind, n, rng: RngState, **params) -> PointCloud:
    """Sample n points uniformly from a named synthetic shape.

    Parameters
    ----------
    kind : str
        One of ``sphere`` (radius), ``torus`` (major, minor),
        ``box-frame`` (half), ``two-gaussians-3d`` (offset, sigma).
    n : int
        Number of points, >= 1.
    rng : RngState
        Stream consumed by the draw; same stream state -> same cloud.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    return PointCloud(_GENERATORS[kind](int(n), rng, **params))


def generate_superset(kind, m, rng: RngState, **params) -> Superset:
    """Dense data superset sampled from a named shape."""
    return Superset(generate_shape(kind, m, rng, **params).points, kind="data")


def sample_noise_superset(m, rng: RngState) -> Superset:
    """m i.i.d. standard-normal 3-vectors."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return Superset(rng.normal((int(m), 3)), kind="noise")


def subsample(superset, n, rng: RngState):
    """Draw n distinct row indices uniformly without replacement.

    Returns
    -------
    (indices, cloud) : (np.ndarray, PointCloud)
        ``cloud.points[k] == superset.points[indices[k]]``.
    """
    pts = _as_points(superset)
    m = pts.shape[0]
    if n > m:
        raise ValueError(f"cannot subsample {n} points from a superset of {m}")
    if n < 1:
        raise ValueError("n must be >= 1")
    indices = rng.choice_no_replace(m, int(n))
    return indices, PointCloud(pts[indices])


def normalize(cloud, stats: NormalizationStats) -> PointCloud:
    """Map p -> (p - global_mean) / global_scale."""
    pts = _as_points(cloud)
    return PointCloud((pts - stats.global_mean) / stats.global_scale)


def denormalize(cloud, stats: NormalizationStats) -> PointCloud:
    """Inverse of :func:`normalize`."""
    pts = _as_points(cloud)
    return PointCloud(pts * stats.global_scale + stats.global_mean)


def compute_normalization(clouds) -> NormalizationStats:
    """Global mean and RMS scale pooled over all points of all clouds."""
    pts = np.vstack([_as_points(c) for c in clouds])
    mean = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - mean) ** 2).mean()))
    if scale == 0.0:
        scale = 1.0
    return NormalizationStats(mean, scale)


# ---------------------------------------------------------------------------
# XYZ text format: one point per line, three whitespace-separated decimals,
# '#'-prefixed comment lines ignored.
# ---------------------------------------------------------------------------


def write_xyz(path, cloud, comment=None):
    pts = _as_points(cloud)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"# {line}\n")
        for p in pts:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise DataFormatError(
                    f"expected 3 numbers, got {len(parts)}: {text!r}", line=lineno
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DataFormatError(f"could not parse numbers: {text!r}", line=lineno)
            if not all(np.isfinite(vals)):
                raise DataFormatError(f"non-finite coordinate: {text!r}", line=lineno)
            rows.append(vals)
    if not rows:
        raise DataFormatError("empty cloud")
    return PointCloud(np.array(rows, dtype=np.float64))
