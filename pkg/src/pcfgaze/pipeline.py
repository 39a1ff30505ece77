"""End-to-end PCFGaze procedure at desk scale.

Stages: pretrain a feature model with a linear gaze head, build the PCF
(Isomap on a subset of features), fit the spherical map, train the
Isometric Propagator to imitate Isomap, retrain the feature model through
the frozen propagator toward inverse-spherical targets, and infer gaze via
out-of-sample extension plus the spherical map.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import geom
from .errors import InvalidInputError, NumericalError
from .manifold import build_knn_graph, extend_embedding, geodesic_all_pairs, isomap_embed
from .propagator import (
    MlpParams,
    adam_init,
    adam_step,
    init_mlp,
    l1_loss_grad,
    mlp_backward,
    mlp_forward,
    train_propagator,
)
from .spherical import fit_spherical, invertible_mask, sf_forward, sf_inverse, sphere_error

logger = logging.getLogger(__name__)

# independent random streams per stage, all derived from PipelineConfig.seed
_STREAM_DATA, _STREAM_MODEL, _STREAM_PRETRAIN, _STREAM_SUBSET, _STREAM_SF, _STREAM_IP, _STREAM_IT = range(7)


def stage_rng(seed, stream):
    return np.random.default_rng([int(seed), int(stream)])


class FeatureModel(Protocol):
    """A differentiable feature extractor with immutable parameters."""

    d_in: int
    d_out: int

    def forward(self, x): ...

    def backward(self, cache, grad_features): ...

    def tensors(self): ...

    def with_tensors(self, tensors): ...


@dataclass(frozen=True)
class MlpFeatureModel:
    """Toy feature extractor: a perceptron with two hidden layers."""

    params: MlpParams

    @classmethod
    def create(cls, d_in, d_out, hidden=64, activation="tanh", seed=0, rng=None):
        rng = np.random.default_rng(seed) if rng is None else rng
        return cls(init_mlp([d_in, hidden, hidden, d_out], activation=activation, rng=rng))

    @property
    def d_in(self):
        return self.params.d_in

    @property
    def d_out(self):
        return self.params.d_out

    def forward(self, x):
        return mlp_forward(self.params, x)

    def backward(self, cache, grad_features):
        grads, _ = mlp_backward(self.params, cache, grad_features)
        return grads.tensors()

    def tensors(self):
        return self.params.tensors()

    def with_tensors(self, tensors):
        return MlpFeatureModel(self.params.with_tensors(tensors))

    def features(self, x):
        return self.forward(x)[0]


def init_head(d, seed=0, rng=None):
    """Affine head mapping a ``d``-dimensional feature to a 3-vector."""
    return init_mlp([d, 3], rng=np.random.default_rng(seed) if rng is None else rng)


@dataclass(frozen=True)
class SyntheticDataset:
    """Gaze labels and raw inputs sampled from a known spherical manifold.

    ``raw`` rows are the noisy gaze vector followed by distractor
    coordinates unrelated to gaze; ``embed_map`` is the ``(d, 3)``
    column-orthonormal map placing gaze vectors in feature space.
    """

    raw: np.ndarray
    labels: np.ndarray
    angles: np.ndarray
    embed_map: np.ndarray
    noise_sigma: float
    pitch_range: tuple
    yaw_range: tuple
    seed: int

    @property
    def n(self):
        return self.labels.shape[0]


def _as_range(r):
    if np.isscalar(r):
        r = (-abs(float(r)), abs(float(r)))
    lo, hi = (float(v) for v in r)
    return lo, hi


def synth_sphere_dataset(n, d, noise_sigma, pitch_range, yaw_range, seed, n_distractors=4,
                         distractor_scale=0.3, rotate=True):
    """Sample gaze uniformly in angle ranges and embed it rigidly in ``d`` dims.

    Parameters
    ----------
    pitch_range, yaw_range : float or (lo, hi)
        Radians; a scalar means a symmetric range.
    rotate : bool
        If false the embedding map is the canonical inclusion of the first
        three coordinates instead of a seeded random orthonormal frame.

    Returns
    -------
    (SyntheticDataset, features)
        ``features`` is ``labels @ embed_map.T`` plus isotropic Gaussian
        noise with standard deviation ``noise_sigma`` per coordinate.
    """
    n, d = int(n), int(d)
    if d < 3:
        raise InvalidInputError(f"feature dimension must be at least 3, got {d}")
    if n < 10:
        raise InvalidInputError(f"need at least 10 samples, got {n}")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be non-negative")
    p_lo, p_hi = _as_range(pitch_range)
    y_lo, y_hi = _as_range(yaw_range)
    if not (-np.pi / 2 <= p_lo < p_hi <= np.pi / 2):
        raise InvalidInputError(f"invalid pitch range ({p_lo}, {p_hi})")
    if not (-np.pi <= y_lo < y_hi <= np.pi):
        raise InvalidInputError(f"invalid yaw range ({y_lo}, {y_hi})")

    rng = stage_rng(seed, _STREAM_DATA)
    angles = np.stack([rng.uniform(p_lo, p_hi, n), rng.uniform(y_lo, y_hi, n)], axis=1)
    labels = geom.angles_to_vector(angles)

    if rotate:
        q, r = np.linalg.qr(rng.normal(size=(d, 3)))
        embed = q * np.sign(np.diag(r))
    else:
        embed = np.eye(d, 3)
    features = labels @ embed.T
    raw_gaze = labels.copy()
    distract = rng.uniform(-distractor_scale, distractor_scale, size=(n, n_distractors))
    if noise_sigma > 0:
        features = features + noise_sigma * rng.normal(size=features.shape)
        raw_gaze = raw_gaze + noise_sigma * rng.normal(size=raw_gaze.shape)
    raw = np.hstack([raw_gaze, distract])

    data = SyntheticDataset(raw=raw, labels=labels, angles=angles, embed_map=embed,
                            noise_sigma=float(noise_sigma), pitch_range=(p_lo, p_hi),
                            yaw_range=(y_lo, y_hi), seed=int(seed))
    return data, features


@dataclass(frozen=True)
class PipelineConfig:
    """Hyperparameters of a full run; loadable from ``key=value`` files."""

    k: int = 300
    subset_size: int = 2000
    pretrain_epochs: int = 10
    it_epochs: int = 10
    ip_epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    # synthetic data
    n_samples: int = 2500
    holdout: int = 500
    noise: float = 0.01
    pitch_range_deg: float = 40.0
    yaw_range_deg: float = 60.0
    n_distractors: int = 4
    # model sizes
    feature_dim: int = 32
    model_hidden: int = 64
    ip_hidden1: int = 256
    ip_hidden2: int = 128

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("lr", "noise", "pitch_range_deg", "yaw_range_deg"):
                continue
            if f.name in ("seed", "n_distractors", "pretrain_epochs", "it_epochs", "ip_epochs"):
                if v < 0:
                    raise InvalidInputError(f"{f.name} must be non-negative")
            elif v <= 0:
                raise InvalidInputError(f"{f.name} must be positive")
        if not self.lr > 0:
            raise InvalidInputError("lr must be positive")
        if self.noise < 0:
            raise InvalidInputError("noise must be non-negative")
        if self.holdout >= self.n_samples:
            raise InvalidInputError("holdout must be smaller than n_samples")

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise InvalidInputError(f"unknown config key {key!r}")
            conv = float if types[name] in ("float", float) else int
            try:
                kw[name] = conv(raw.strip() if isinstance(raw, str) else raw)
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kw)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


def parse_config_text(text):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {lineno}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _iterate_batches(rng, n, batch_size):
    order = rng.permutation(n)
    batch = min(batch_size, n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def pretrain(model, head, raw, labels, config, rng=None):
    """Jointly train feature model and head with L1 on gaze vectors.

    Returns ``(model, head, losses)`` with one mean loss per epoch.
    """
    raw = np.asarray(raw, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if raw.shape[0] == 0:
        raise InvalidInputError("pretraining data is empty")
    rng = stage_rng(config.seed, _STREAM_PRETRAIN) if rng is None else rng
    n_model = len(model.tensors())
    state = adam_init(list(model.tensors()) + head.tensors(), lr=config.lr)
    losses = []
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in _iterate_batches(rng, raw.shape[0], config.batch_size):
            feats, mcache = model.forward(raw[idx])
            pred, hcache = mlp_forward(head, feats)
            loss, g = l1_loss_grad(pred, labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite pretraining loss in epoch {epoch + 1}")
            hgrads, gfeat = mlp_backward(head, hcache, g)
            grads = model.backward(mcache, gfeat) + hgrads.tensors()
            params, state = adam_step(list(model.tensors()) + head.tensors(), grads, state)
            model = model.with_tensors(params[:n_model])
            head = head.with_tensors(params[n_model:])
            total += loss * idx.size
        losses.append(total / raw.shape[0])
        logger.info("pretrain epoch %d: L1 %.6f", epoch + 1, losses[-1])
    return model, head, losses


def choose_subset(n, subset_size, seed):
    if subset_size >= n:
        return np.arange(n)
    rng = stage_rng(seed, _STREAM_SUBSET)
    return np.sort(rng.choice(n, size=subset_size, replace=False))


def build_pcf(model, raw, config, subset=None, largest_component=False):
    """Isomap on features of a seeded subset.

    Returns ``(geo, emb, subset)``; rows of ``emb`` follow
    ``subset[geo.indices]``.
    """
    raw = np.asarray(raw, dtype=float)
    if subset is None:
        subset = choose_subset(raw.shape[0], config.subset_size, config.seed)
    feats = model.features(raw[subset]) if hasattr(model, "features") else model.forward(raw[subset])[0]
    k = min(config.k, len(subset) - 1)
    if k < config.k:
        logger.warning("k=%d reduced to %d for a subset of %d samples", config.k, k, len(subset))
    geo = geodesic_all_pairs(build_knn_graph(feats, k), largest_component=largest_component)
    emb = isomap_embed(geo)
    return geo, emb, np.asarray(subset)[geo.indices]


def pcf_oriented_training(model, ip, sf, raw, labels, config, rng=None):
    """Retrain the feature model so the frozen propagator lands on the fitted sphere.

    Targets are ``sf_inverse(sf, gaze)``; only feature-model parameters are
    updated. Samples whose gaze falls outside the invertible range are
    skipped.

    Returns ``(model, losses, n_skipped)``.
    """
    raw = np.asarray(raw, dtype=float)
    angles = geom.vector_to_angles(labels)
    ok = invertible_mask(sf, angles)
    skipped = int(np.sum(~ok))
    if skipped:
        logger.warning("%d samples outside the spherical fit's invertible range skipped", skipped)
    raw, angles = raw[ok], angles[ok]
    targets = sf_inverse(sf, angles)
    rng = stage_rng(config.seed, _STREAM_IT) if rng is None else rng

    state = adam_init(model.tensors(), lr=config.lr)
    losses = []
    for epoch in range(config.it_epochs):
        total = 0.0
        for idx in _iterate_batches(rng, raw.shape[0], config.batch_size):
            feats, mcache = model.forward(raw[idx])
            pred, icache = mlp_forward(ip, feats)
            loss, g = l1_loss_grad(pred, targets[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite PCF loss in epoch {epoch + 1}")
            _, gfeat = mlp_backward(ip, icache, g)
            params, state = adam_step(model.tensors(), model.backward(mcache, gfeat), state)
            model = model.with_tensors(params)
            total += loss * idx.size
        losses.append(total / raw.shape[0])
        logger.info("PCF-oriented epoch %d: L1 %.6f", epoch + 1, losses[-1])
    return model, losses, skipped


def infer(model, geo, emb, sf, inputs):
    """Gaze angles ``(m, 2)`` for raw inputs via feature, extension and spherical map."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[0] == 0:
        return np.empty((0, 2))
    feats = model.features(inputs) if hasattr(model, "features") else model.forward(inputs)[0]
    return sf_forward(sf, extend_embedding(geo, emb, feats))


def mean_angular_error(angles, labels):
    """Mean angle in radians between predicted angles and unit label vectors."""
    est = geom.angles_to_vector(angles)
    return float(np.mean(geom.angular_difference(est, labels)))


@dataclass(frozen=True)
class PcfStage:
    """Artifacts of one PCF build with its spherical fit."""

    geo: object
    emb: object
    subset: np.ndarray
    sf: object
    sphere_error: float
    heldout_error: float


@dataclass(frozen=True)
class PipelineResult:
    config: PipelineConfig
    data: SyntheticDataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    model_before: MlpFeatureModel
    model_after: MlpFeatureModel
    head: MlpParams
    ip: MlpParams
    ip_report: object
    before: PcfStage
    after: PcfStage
    pretrain_losses: list = field(default_factory=list)
    it_losses: list = field(default_factory=list)
    it_skipped: int = 0

    def summary(self):
        return {
            "sphere_error_before": self.before.sphere_error,
            "sphere_error_after": self.after.sphere_error,
            "heldout_deg_before": float(np.degrees(self.before.heldout_error)),
            "heldout_deg_after": float(np.degrees(self.after.heldout_error)),
            "sf_objective_deg_before": self.before.sf.objective_deg,
            "sf_objective_deg_after": self.after.sf.objective_deg,
            "ip_final_l1": self.ip_report.final_loss,
            "it_skipped": self.it_skipped,
        }


def _stage(model, data, train_idx, test_idx, config, subset):
    raw_train = data.raw[train_idx]
    geo, emb, used = build_pcf(model, raw_train, config, subset=subset)
    sf = fit_spherical(emb, data.labels[train_idx][used], subset=config.subset_size,
                       seed=int(stage_rng(config.seed, _STREAM_SF).integers(2**31)))
    pred = infer(model, geo, emb, sf, data.raw[test_idx])
    err = mean_angular_error(pred, data.labels[test_idx])
    return PcfStage(geo=geo, emb=emb, subset=used, sf=sf, sphere_error=sphere_error(emb, sf),
                    heldout_error=err)


def run_pipeline(config, data=None):
    """Run every stage on synthetic (or supplied) data; deterministic in ``config.seed``."""
    if data is None:
        data, _ = synth_sphere_dataset(
            config.n_samples, 3, config.noise, np.radians(config.pitch_range_deg),
            np.radians(config.yaw_range_deg), config.seed, n_distractors=config.n_distractors)
    n = data.n
    test_idx = np.arange(n - config.holdout, n)
    train_idx = np.arange(n - config.holdout)
    logger.info("pipeline config: %s", dataclasses.asdict(config))

    mrng = stage_rng(config.seed, _STREAM_MODEL)
    model0 = MlpFeatureModel.create(data.raw.shape[1], config.feature_dim, hidden=config.model_hidden, rng=mrng)
    head0 = init_head(config.feature_dim, rng=mrng)
    model, head, pre_losses = pretrain(model0, head0, data.raw[train_idx], data.labels[train_idx], config)

    subset = choose_subset(train_idx.size, config.subset_size, config.seed)
    before = _stage(model, data, train_idx, test_idx, config, subset)
    logger.info("before IT: sphere error %.6f, held-out %.4f deg",
                before.sphere_error, np.degrees(before.heldout_error))

    ip_feats = model.features(data.raw[train_idx][before.subset])
    ip, ip_report = train_propagator(
        ip_feats, before.emb.coords, epochs=config.ip_epochs, lr=config.lr,
        seed=int(stage_rng(config.seed, _STREAM_IP).integers(2**31)), batch_size=config.batch_size,
        hidden=(config.ip_hidden1, config.ip_hidden2))
    logger.info("propagator: L1 %.6f -> %.6f", ip_report.initial_loss, ip_report.final_loss)

    model_after, it_losses, skipped = pcf_oriented_training(
        model, ip, before.sf, data.raw[train_idx], data.labels[train_idx], config)
    after = _stage(model_after, data, train_idx, test_idx, config, subset)
    logger.info("after IT: sphere error %.6f, held-out %.4f deg",
                after.sphere_error, np.degrees(after.heldout_error))

    return PipelineResult(config=config, data=data, train_idx=train_idx, test_idx=test_idx,
                          model_before=model, model_after=model_after, head=head, ip=ip,
                          ip_report=ip_report, before=before, after=after,
                          pretrain_losses=pre_losses, it_losses=it_losses, it_skipped=skipped)
