"""Physics-consistent gaze features: geodesic embedding, spherical fitting and
PCF-oriented training."""

from .errors import (
    ContractViolation,
    DataError,
    DegeneratePointError,
    DisconnectedManifold,
    FormatError,
    InvalidInputError,
    NumericalError,
    OutOfRangeError,
    PcfError,
    RankDeficientError,
)
from .geom import angles_to_vector, angular_difference, rotation_from_euler, vector_to_angles
from .manifold import Embedding3, GeodesicMap, build_knn_graph, extend_embedding, geodesic_all_pairs, isomap_embed
from .spherical import SphericalFitParams, fit_spherical, sf_forward, sf_inverse, sphere_error

__version__ = "0.1.0"
