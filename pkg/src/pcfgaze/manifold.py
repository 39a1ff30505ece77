"""k-NN graphs, graph geodesics, Isomap embedding and its out-of-sample extension."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial.distance import cdist

from .errors import DisconnectedManifold, InvalidInputError, RankDeficientError

logger = logging.getLogger(__name__)

# rows of the query block handled per cdist call in out-of-sample extension
_CHUNK = 512


def as_feature_matrix(features):
    """Validate and return a 2-D float64 copy of ``features``."""
    f = np.array(features, dtype=np.float64, copy=True)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise InvalidInputError(f"features must be a non-empty 2-D array, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        bad = np.argwhere(~np.isfinite(f))[0]
        raise InvalidInputError(f"non-finite feature at row {bad[0]}, col {bad[1]}")
    f.setflags(write=False)
    return f


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetrized k-NN graph with Euclidean edge weights.

    ``rows``, ``cols`` and ``weights`` list every directed edge; the list is
    closed under reversal and sorted by ``(row, col)``.
    """

    features: np.ndarray
    k: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @property
    def n(self):
        return self.features.shape[0]

    def to_sparse(self):
        return csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))


@dataclass(frozen=True)
class GeodesicMap:
    """All-pairs graph geodesic distances plus what is needed for new queries.

    ``indices`` maps rows of ``distances`` back to rows of the feature matrix
    the graph was built from; it is ``arange(n)`` unless the map was
    restricted to the largest connected component.
    """

    distances: np.ndarray
    features: np.ndarray
    k: int
    indices: np.ndarray
    connected: bool
    component_sizes: tuple

    @property
    def n(self):
        return self.distances.shape[0]


@dataclass(frozen=True)
class Embedding3:
    """Three-dimensional classical-MDS coordinates (the PCF points)."""

    coords: np.ndarray
    eigenvalues: np.ndarray
    sq_col_means: np.ndarray
    sq_grand_mean: float

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def eigenvectors(self):
        return self.coords / np.sqrt(self.eigenvalues)

    @classmethod
    def from_coords(cls, coords, geo):
        """Rebuild the cached terms of an embedding from stored coordinates.

        Columns of an MDS embedding are ``sqrt(lambda_m) * v_m`` with unit
        ``v_m``, so the eigenvalues are the squared column norms.
        """
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] != geo.n:
            raise InvalidInputError(
                f"embedding shape {coords.shape} does not match geodesic map with n={geo.n}"
            )
        sq = geo.distances**2
        return cls(
            coords=coords,
            eigenvalues=np.sum(coords**2, axis=0),
            sq_col_means=sq.mean(axis=0),
            sq_grand_mean=float(sq.mean()),
        )


def build_knn_graph(features, k):
    """Connect every sample to its ``k`` nearest neighbors and symmetrize by union.

    Ties in distance are broken in favor of the lower sample index.

    Parameters
    ----------
    features : (n, d) array
    k : int
        Neighbors per node, ``1 <= k < n``.
    """
    f = as_feature_matrix(features)
    n = f.shape[0]
    k = int(k)
    if not 1 <= k < n:
        raise InvalidInputError(f"k must satisfy 1 <= k < n (k={k}, n={n})")

    dist = cdist(f, f)
    np.fill_diagonal(dist, np.inf)
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]

    src = np.repeat(np.arange(n), k)
    dst = nbrs.ravel()
    keys = np.unique(np.concatenate([src * n + dst, dst * n + src]))
    rows, cols = np.divmod(keys, n)
    weights = dist[rows, cols]
    return NeighborGraph(features=f, k=k, rows=rows, cols=cols, weights=weights)


def geodesic_all_pairs(graph, largest_component=False):
    """Shortest-path distances between all node pairs of ``graph``.

    Runs one Dijkstra search per source node.

    Parameters
    ----------
    graph : NeighborGraph
    largest_component : bool
        If the graph is disconnected, keep only the largest component (ties go
        to the component containing the lowest node index) instead of raising.

    Raises
    ------
    DisconnectedManifold
        If the graph is disconnected and ``largest_component`` is false.
    """
    adj = graph.to_sparse()
    n_comp, labels = connected_components(adj, directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    indices = np.arange(graph.n)
    features = graph.features
    if n_comp > 1:
        if not largest_component:
            raise DisconnectedManifold(sizes)
        keep = int(np.argmax(sizes))
        indices = np.flatnonzero(labels == keep)
        logger.warning(
            "graph has %d components; keeping largest (%d of %d nodes)",
            n_comp, indices.size, graph.n,
        )
        adj = adj[indices][:, indices]
        features = features[indices]
        features.setflags(write=False)

    dist = dijkstra(adj, directed=False)
    # exact symmetry regardless of per-source summation order
    dist = np.minimum(dist, dist.T)
    dist.setflags(write=False)
    return GeodesicMap(
        distances=dist,
        features=features,
        k=graph.k,
        indices=indices,
        connected=n_comp == 1,
        component_sizes=tuple(int(s) for s in sorted(sizes, reverse=True)),
    )


def isomap_embed(geo, eig_tol=1e-10):
    """Classical MDS of the geodesic distances into three dimensions.

    The centered Gram matrix ``B = -1/2 J (D*D) J`` is diagonalized densely and
    its top three eigenpairs give the coordinates ``sqrt(lambda_m) v_m``.
    Each eigenvector's largest-magnitude entry is made positive.

    Raises
    ------
    InvalidInputError
        If ``n < 4`` or the distances contain infinities.
    RankDeficientError
        If fewer than three eigenvalues exceed ``eig_tol * lambda_max``.
    """
    D = np.asarray(geo.distances, dtype=np.float64)
    n = D.shape[0]
    if n < 4:
        raise InvalidInputError(f"isomap needs at least 4 samples, got {n}")
    if not np.all(np.isfinite(D)):
        raise InvalidInputError("geodesic map has infinite entries (disconnected graph)")

    sq = D**2
    col_means = sq.mean(axis=0)
    grand = float(col_means.mean())
    B = -0.5 * (sq - col_means[None, :] - col_means[:, None] + grand)
    B = 0.5 * (B + B.T)

    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    positive = int(np.sum(evals > eig_tol * scale)) if scale > 0 else 0
    if positive < 3:
        raise RankDeficientError(positive)

    lam = evals[:3]
    vec = evecs[:, :3].copy()
    for m in range(3):
        if vec[np.argmax(np.abs(vec[:, m])), m] < 0:
            vec[:, m] = -vec[:, m]
    coords = vec * np.sqrt(lam)
    # eigenvectors of the centered Gram matrix are orthogonal to the ones vector
    coords -= coords.mean(axis=0)
    return Embedding3(coords=coords, eigenvalues=lam.copy(), sq_col_means=col_means, sq_grand_mean=grand)


def _query_geodesics(geo, queries):
    """Approximate geodesic distances from query rows to every training node."""
    train = geo.features
    k = min(geo.k, geo.n)
    out = np.empty((queries.shape[0], geo.n))
    for start in range(0, queries.shape[0], _CHUNK):
        block = queries[start:start + _CHUNK]
        d = cdist(block, train)
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
        for r in range(block.shape[0]):
            j = nbrs[r]
            out[start + r] = np.min(d[r, j][:, None] + geo.distances[j], axis=0)
    return out


def extend_embedding(geo, emb, f_new):
    """Place new feature rows into an existing embedding (Nystrom extension).

    Geodesics from a new point are relaxed through its ``k`` nearest training
    neighbors, ``d(i) = min_j (|f - f_j| + d_G(j, i))``, and the squared
    distances are projected with
    ``x_m = sum_i v_m(i) (mean_sq_col(i) - d(i)^2) / (2 sqrt(lambda_m))``.

    Parameters
    ----------
    geo : GeodesicMap
    emb : Embedding3
        Embedding computed from ``geo``.
    f_new : (d,) or (m, d) array

    Returns
    -------
    (3,) or (m, 3) array
    """
    q = np.asarray(f_new, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    d = geo.features.shape[1]
    if q.ndim != 2 or q.shape[1] != d:
        raise InvalidInputError(f"feature dimension {q.shape[-1]} does not match training dimension {d}")
    if emb.n != geo.n:
        raise InvalidInputError("embedding and geodesic map come from different runs")
    if q.shape[0] == 0:
        return np.empty((0, 3))

    dq = _query_geodesics(geo, q)
    proj = (emb.sq_col_means[None, :] - dq**2) @ emb.eigenvectors
    pts = proj / (2.0 * np.sqrt(emb.eigenvalues))
    return pts[0] if single else pts
