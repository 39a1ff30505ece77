"""Distance-versus-angle profiles, linearity scores and sphere-error reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import InvalidInputError
from .io import atomic_write, csv_text
from .spherical import sphere_error

DEFAULT_BIN_DEG = 5.0
DEFAULT_MAX_PAIRS = 500_000


@dataclass(frozen=True)
class DistanceProfile:
    """Per-bin statistics of feature distances against gaze angle difference.

    Empty bins carry zero means and standard deviations.
    """

    edges_deg: np.ndarray
    l2_mean: np.ndarray
    l2_std: np.ndarray
    geo_mean: np.ndarray
    geo_std: np.ndarray
    counts: np.ndarray

    @property
    def centers_deg(self):
        return 0.5 * (self.edges_deg[:-1] + self.edges_deg[1:])

    @property
    def total_pairs(self):
        return int(self.counts.sum())

    def to_csv(self):
        rows = zip(self.centers_deg, self.l2_mean, self.l2_std, self.geo_mean, self.geo_std, self.counts)
        return csv_text(["angle_bin_center_deg", "l2_mean", "l2_std", "geo_mean", "geo_std", "count"],
                        ([c, a, b, g, h, str(int(n))] for c, a, b, g, h, n in rows))

    def write_csv(self, path):
        atomic_write(path, self.to_csv())


def _sample_pairs(n, max_pairs, seed):
    total = n * (n - 1) // 2
    iu, ju = np.triu_indices(n, 1)
    if max_pairs >= total:
        return iu, ju
    pick = np.sort(np.random.default_rng(seed).choice(total, size=max_pairs, replace=False))
    return iu[pick], ju[pick]


def _bin_stats(values, bins, n_bins):
    counts = np.bincount(bins, minlength=n_bins)
    sums = np.bincount(bins, weights=values, minlength=n_bins)
    mean = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    dev = values - mean[bins]
    var = np.divide(np.bincount(bins, weights=dev * dev, minlength=n_bins), counts,
                    out=np.zeros(n_bins), where=counts > 0)
    return mean, np.sqrt(var), counts


def distance_angle_profile(features, geo, labels, bin_width_deg=DEFAULT_BIN_DEG,
                           max_pairs=DEFAULT_MAX_PAIRS, seed=0):
    """Bin sample pairs by gaze angle difference and summarize their distances.

    Parameters
    ----------
    features : (n, d) array or None
        Rows aligned with ``geo``; ``None`` uses the features stored in ``geo``.
    geo : GeodesicMap
    labels : (n, 3) unit gaze vectors aligned with ``geo``
    bin_width_deg : float
    max_pairs : int
        Pairs are drawn uniformly without replacement when there are more
        than this many; otherwise all pairs are used.
    """
    f = geo.features if features is None else np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n = geo.n
    if f.shape[0] != n or labels.shape[0] != n:
        raise InvalidInputError(f"features ({f.shape[0]}), labels ({labels.shape[0]}) and geodesic map ({n}) differ in size")
    if not bin_width_deg > 0:
        raise InvalidInputError("bin width must be positive")
    i, j = _sample_pairs(n, int(max_pairs), seed)
    if i.size == 0:
        raise InvalidInputError("no sample pairs to profile")

    ang = np.degrees(geom.angular_difference(labels[i], labels[j]))
    l2 = np.linalg.norm(f[i] - f[j], axis=1)
    dg = np.asarray(geo.distances)[i, j]

    n_bins = int(np.floor(ang.max() / bin_width_deg)) + 1
    bins = np.minimum((ang / bin_width_deg).astype(np.int64), n_bins - 1)
    l2_mean, l2_std, counts = _bin_stats(l2, bins, n_bins)
    geo_mean, geo_std, _ = _bin_stats(dg, bins, n_bins)
    return DistanceProfile(edges_deg=bin_width_deg * np.arange(n_bins + 1), l2_mean=l2_mean, l2_std=l2_std,
                           geo_mean=geo_mean, geo_std=geo_std, counts=counts)


@dataclass(frozen=True)
class LinearFit:
    pearson_r: float
    r_squared: float
    slope: float
    intercept: float
    degenerate: bool = False


def _weighted_line(x, y, w):
    w = w / w.sum()
    mx, my = w @ x, w @ y
    sxx = w @ (x - mx) ** 2
    syy = w @ (y - my) ** 2
    sxy = w @ ((x - mx) * (y - my))
    slope = sxy / sxx
    intercept = my - slope * mx
    if syy <= 1e-15 * max(my * my, 1e-300):
        return LinearFit(0.0, 0.0, 0.0, float(my), degenerate=True)
    r = sxy / np.sqrt(sxx * syy)
    return LinearFit(float(r), float(r * r), float(slope), float(intercept))


def linearity_score(profile, max_angle_deg=None):
    """Count-weighted least-squares line of per-bin mean distance on bin center.

    Returns ``{"l2": LinearFit, "geodesic": LinearFit}``. Only non-empty bins
    (with center below ``max_angle_deg`` if given) take part.

    Raises
    ------
    InvalidInputError
        If fewer than three bins qualify.
    """
    x = profile.centers_deg
    keep = profile.counts > 0
    if max_angle_deg is not None:
        keep &= x < max_angle_deg
    if keep.sum() < 3:
        raise InvalidInputError(f"linearity needs at least 3 non-empty bins, got {int(keep.sum())}")
    x, w = x[keep], profile.counts[keep].astype(float)
    return {"l2": _weighted_line(x, profile.l2_mean[keep], w),
            "geodesic": _weighted_line(x, profile.geo_mean[keep], w)}


@dataclass(frozen=True)
class SphereErrorReport:
    rows: tuple

    def to_csv(self):
        return csv_text(["name", "sphere_error_before", "sphere_error_after"], self.rows)

    def write_csv(self, path):
        atomic_write(path, self.to_csv())


def sphere_error_report(entries):
    """Sphere error before and after for each ``(name, emb_b, emb_a, sf_b, sf_a)``."""
    entries = list(entries)
    if not entries:
        raise InvalidInputError("sphere error report needs at least one entry")
    rows = tuple((name, sphere_error(eb, pb), sphere_error(ea, pa)) for name, eb, ea, pb, pa in entries)
    return SphereErrorReport(rows=rows)


def sphere_error_map_csv(pcf, params):
    """Per-point radial deviation ``| |p - center| - r |`` with coordinates."""
    pts = np.asarray(getattr(pcf, "coords", pcf), dtype=float)
    dev = np.abs(np.linalg.norm(pts - params.center, axis=1) - params.radius)
    return csv_text(["x", "y", "z", "radial_error"], np.column_stack([pts, dev]))
