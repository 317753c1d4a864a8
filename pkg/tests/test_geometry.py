import numpy as np
import pytest
from scipy import stats

from pcflow import (
    ConfigError,
    DataFormatError,
    NormalizationStats,
    PointCloud,
    RngState,
    compute_normalization,
    denormalize,
    generate_shape,
    normalize,
    read_xyz,
    sample_noise_superset,
    subsample,
    write_xyz,
)


def test_sphere_points_on_unit_sphere():
    cloud = generate_shape("sphere", 1000, RngState(1))
    norms = np.linalg.norm(cloud.points, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6


def test_sphere_single_point():
    cloud = generate_shape("sphere", 1, RngState(7))
    assert cloud.n == 1
    assert abs(np.linalg.norm(cloud.points[0]) - 1.0) < 1e-6


def test_torus_mean_near_origin():
    # Monte-Carlo oracle: a uniform torus is centered at the origin
    cloud = generate_shape("torus", 100_000, RngState(2), major=1.0, minor=0.3)
    assert np.abs(cloud.points.mean(axis=0)).max() < 0.02
    # all points exactly on the torus surface
    ring = np.sqrt(cloud.points[:, 0] ** 2 + cloud.points[:, 1] ** 2)
    resid = (ring - 1.0) ** 2 + cloud.points[:, 2] ** 2
    assert np.abs(np.sqrt(resid) - 0.3).max() < 1e-9


def test_box_frame_points_lie_on_edges():
    cloud = generate_shape("box-frame", 5000, RngState(3))
    # a point on a cube edge has exactly two coordinates at +-1
    at_corner_plane = np.isclose(np.abs(cloud.points), 1.0, atol=1e-12).sum(axis=1)
    assert (at_corner_plane >= 2).all()
    assert np.abs(cloud.points).max() <= 1.0 + 1e-12


def test_two_gaussians_bimodal_x():
    cloud = generate_shape("two-gaussians-3d", 50_000, RngState(11))
    x = cloud.points[:, 0]
    assert abs(x.mean()) < 0.05
    assert abs(np.abs(x).mean() - 1.0) < 0.05  # mass concentrated near +-1


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        generate_shape("klein-bottle", 10, RngState(0))


def test_generators_deterministic():
    for kind in ("sphere", "torus", "box-frame", "two-gaussians-3d"):
        a = generate_shape(kind, 200, RngState(5))
        b = generate_shape(kind, 200, RngState(5))
        np.testing.assert_array_equal(a.points, b.points)


def test_noise_superset_moments():
    sup = sample_noise_superset(100_000, RngState(3))
    assert np.abs(sup.points.mean(axis=0)).max() < 0.02
    assert np.abs(sup.points.var(axis=0) - 1.0).max() < 0.02


def test_noise_superset_single_and_deterministic():
    one = sample_noise_superset(1, RngState(4))
    assert one.m == 1 and np.isfinite(one.points).all()
    a = sample_noise_superset(50, RngState(9))
    b = sample_noise_superset(50, RngState(9))
    np.testing.assert_array_equal(a.points, b.points)


def test_subsample_exhaustive_permutation():
    sup = sample_noise_superset(5, RngState(1))
    idx, cloud = subsample(sup, 5, RngState(2))
    assert sorted(idx.tolist()) == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(cloud.points, sup.points[idx])


def test_subsample_full_is_row_permutation():
    sup = sample_noise_superset(2048, RngState(6))
    idx, cloud = subsample(sup, 2048, RngState(7))
    assert len(set(idx.tolist())) == 2048
    np.testing.assert_array_equal(np.sort(cloud.points, axis=0), np.sort(sup.points, axis=0))


def test_subsample_uniformity_chi_square():
    # uniformity oracle: counts of the single drawn index over many repeats
    sup = sample_noise_superset(100, RngState(1))
    rng = RngState(123)
    counts = np.zeros(100)
    repeats = 100_000
    for _ in range(repeats):
        idx, _ = subsample(sup, 1, rng)
        counts[idx[0]] += 1
    stat = ((counts - repeats / 100) ** 2 / (repeats / 100)).sum()
    assert stat < stats.chi2.ppf(0.99, df=99)


def test_subsample_rejects_oversample():
    sup = sample_noise_superset(10, RngState(1))
    with pytest.raises(ValueError):
        subsample(sup, 11, RngState(2))


def test_subsampled_noise_matches_standard_normal_ks():
    sup = sample_noise_superset(100_000, RngState(21))
    _, cloud = subsample(sup, 100_000, RngState(22))
    for axis in range(3):
        ks = stats.kstest(cloud.points[:, axis], "norm").statistic
        assert ks < 0.01


def test_normalize_identity_and_formula():
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]))
    ident = normalize(cloud, NormalizationStats())
    np.testing.assert_array_equal(ident.points, cloud.points)
    out = normalize(cloud, NormalizationStats([1.0, 2.0, 3.0], 2.0))
    np.testing.assert_array_equal(out.points, np.zeros((1, 3)))


def test_normalize_round_trip():
    cloud = PointCloud(RngState(8).normal((500, 3)) * 7.0 + 2.0)
    stats_ = NormalizationStats([0.3, -1.2, 4.0], 3.7)
    back = denormalize(normalize(cloud, stats_), stats_)
    assert np.abs(back.points - cloud.points).max() < 1e-9


def test_normalization_stats_validate():
    with pytest.raises(ValueError):
        NormalizationStats([0.0, 0.0, np.inf], 1.0)
    with pytest.raises(ValueError):
        NormalizationStats([0.0, 0.0, 0.0], 0.0)


def test_compute_normalization_centers_and_scales():
    clouds = [PointCloud(RngState(i).normal((100, 3)) * 2.0 + 5.0) for i in range(3)]
    st = compute_normalization(clouds)
    pooled = np.vstack([normalize(c, st).points for c in clouds])
    assert np.abs(pooled.mean(axis=0)).max() < 1e-12
    assert abs((pooled**2).mean() - 1.0) < 1e-12


def test_xyz_round_trip(tmp_path):
    cloud = PointCloud(RngState(13).normal((3, 3)))
    path = tmp_path / "cloud.xyz"
    write_xyz(path, cloud, comment="demo cloud")
    back = read_xyz(path)
    np.testing.assert_array_equal(back.points, cloud.points)


def test_xyz_empty_file(tmp_path):
    path = tmp_path / "empty.xyz"
    path.write_text("# only a comment\n")
    with pytest.raises(DataFormatError, match="empty cloud"):
        read_xyz(path)


def test_xyz_malformed_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("1 2\n")
    with pytest.raises(DataFormatError, match="line 1"):
        read_xyz(path)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[1.0, np.nan, 0.0]]))
