import numpy as np
import pytest

from pcfgaze import analysis as an
from pcfgaze import manifold as mf
from pcfgaze import spherical as sp
from pcfgaze.errors import InvalidInputError


def tiny_geo(features):
    return mf.geodesic_all_pairs(mf.build_knn_graph(features, len(features) - 1))


def synthetic_profile(means, counts=None):
    means = np.asarray(means, dtype=float)
    counts = np.full(means.size, 10) if counts is None else np.asarray(counts)
    z = np.zeros(means.size)
    return an.DistanceProfile(edges_deg=5.0 * np.arange(means.size + 1), l2_mean=means, l2_std=z,
                              geo_mean=means, geo_std=z, counts=counts)


@pytest.fixture(scope="module")
def oracle_profile(noiseless_sphere):
    data, _, _, geo, _ = noiseless_sphere
    return an.distance_angle_profile(None, geo, data.labels[:2000])


def test_two_identical_samples():
    f = np.array([[1.0, 2.0], [1.0, 2.0]])
    labels = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    prof = an.distance_angle_profile(f, tiny_geo(f), labels)
    assert prof.total_pairs == 1
    np.testing.assert_array_equal(prof.edges_deg, [0.0, 5.0])
    assert prof.l2_mean[0] == 0.0 and prof.geo_mean[0] == 0.0


def test_max_pairs_clamped_to_all_pairs():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(30, 3))
    labels = f / np.linalg.norm(f, axis=1, keepdims=True)
    prof = an.distance_angle_profile(f, tiny_geo(f), labels, max_pairs=10**9)
    assert prof.total_pairs == 30 * 29 // 2


def test_subsampling_seeded():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(60, 3))
    labels = f / np.linalg.norm(f, axis=1, keepdims=True)
    geo = tiny_geo(f)
    a = an.distance_angle_profile(f, geo, labels, max_pairs=500, seed=3)
    b = an.distance_angle_profile(f, geo, labels, max_pairs=500, seed=3)
    assert a.total_pairs == 500
    np.testing.assert_array_equal(a.l2_mean, b.l2_mean)
    assert np.all(np.diff(a.edges_deg) > 0)
    assert np.all(a.l2_std >= 0) and np.all(a.geo_std >= 0)


def test_permutation_invariant():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(40, 3))
    labels = f / np.linalg.norm(f, axis=1, keepdims=True)
    perm = rng.permutation(40)
    a = an.distance_angle_profile(f, tiny_geo(f), labels)
    b = an.distance_angle_profile(f[perm], tiny_geo(f[perm]), labels[perm])
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_allclose(a.l2_mean, b.l2_mean, rtol=1e-12)
    np.testing.assert_allclose(a.geo_std, b.geo_std, rtol=1e-9, atol=1e-12)


def test_profile_input_errors():
    f = np.zeros((3, 2))
    f[1, 0], f[2, 1] = 1.0, 1.0
    labels = np.tile([0.0, 0.0, -1.0], (3, 1))
    geo = tiny_geo(f)
    with pytest.raises(InvalidInputError):
        an.distance_angle_profile(f, geo, labels, bin_width_deg=0)
    with pytest.raises(InvalidInputError):
        an.distance_angle_profile(f[:2], geo, labels)


def test_profile_csv_columns():
    text = synthetic_profile([1.0, 2.0, 3.0]).to_csv()
    assert text.splitlines()[0] == "angle_bin_center_deg,l2_mean,l2_std,geo_mean,geo_std,count"
    assert len(text.splitlines()) == 4


def test_exact_linear_profile():
    prof = synthetic_profile(0.3 * (2.5 + 5.0 * np.arange(6)))
    fit = an.linearity_score(prof)["geodesic"]
    assert fit.pearson_r == pytest.approx(1.0, abs=1e-12)
    assert fit.slope == pytest.approx(0.3, rel=1e-12)
    assert fit.intercept == pytest.approx(0.0, abs=1e-12)


def test_constant_profile_is_degenerate():
    fit = an.linearity_score(synthetic_profile([2.0] * 5))["l2"]
    assert fit.degenerate and fit.pearson_r == 0.0 and fit.slope == 0.0


def test_too_few_bins():
    with pytest.raises(InvalidInputError):
        an.linearity_score(synthetic_profile([1.0, 2.0]))
    with pytest.raises(InvalidInputError):
        an.linearity_score(synthetic_profile([1.0, 2.0, 3.0, 4.0], counts=[5, 0, 5, 0]))


def test_oracle_geodesic_line_through_origin(oracle_profile):
    keep = oracle_profile.counts > 0
    x, y = oracle_profile.centers_deg[keep], oracle_profile.geo_mean[keep]
    w = oracle_profile.counts[keep].astype(float)
    c = np.sum(w * x * y) / np.sum(w * x * x)  # weighted least squares without intercept
    ss_res = np.sum(w * (y - c * x) ** 2)
    ss_tot = np.sum(w * (y - np.average(y, weights=w)) ** 2)
    assert 1 - ss_res / ss_tot >= 0.99


def test_oracle_geodesic_more_linear_than_l2(oracle_profile):
    fits = an.linearity_score(oracle_profile)
    assert fits["geodesic"].pearson_r >= 0.99
    assert fits["geodesic"].r_squared > fits["l2"].r_squared


def test_oracle_local_l2_linear(noiseless_sphere):
    data, _, _, geo, _ = noiseless_sphere
    prof = an.distance_angle_profile(None, geo, data.labels[:2000], bin_width_deg=1.0)
    assert an.linearity_score(prof, max_angle_deg=10.0)["l2"].pearson_r >= 0.99


def test_sphere_report():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    params = sp.identity_params()
    rep = an.sphere_error_report([("same", pts, pts, params, params)])
    name, before, after = rep.rows[0]
    assert name == "same" and before == after >= 0
    assert rep.to_csv().splitlines()[0] == "name,sphere_error_before,sphere_error_after"
    with pytest.raises(InvalidInputError):
        an.sphere_error_report([])


def test_sphere_error_map():
    pts = np.array([[0.0, 0.0, -2.0], [0.0, 0.5, 0.0]])
    lines = an.sphere_error_map_csv(pts, sp.identity_params()).splitlines()
    assert lines[0] == "x,y,z,radial_error"
    assert [float(v) for v in lines[1].split(",")][-1] == 1.0
    assert [float(v) for v in lines[2].split(",")][-1] == 0.5
