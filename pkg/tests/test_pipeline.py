import numpy as np
import pytest

from pcfgaze import geom
from pcfgaze import pipeline as pl
from pcfgaze import propagator as pp
from pcfgaze import spherical as sp
from pcfgaze.errors import InvalidInputError

SMALL = dict(k=15, subset_size=300, n_samples=400, holdout=100, pretrain_epochs=3, ip_epochs=5,
             it_epochs=2, lr=1e-3, feature_dim=8, model_hidden=16, ip_hidden1=32, ip_hidden2=16)


class IdentityFeatures:
    """Feature model that passes oracle features straight through."""

    def features(self, x):
        return np.asarray(x, dtype=float)


@pytest.fixture(scope="module")
def small_run():
    return pl.run_pipeline(pl.PipelineConfig(**SMALL))


# --- synthetic data ---------------------------------------------------------------

def test_synth_identity_map():
    data, feats = pl.synth_sphere_dataset(10, 3, 0.0, 0.5, 0.5, seed=0, rotate=False)
    np.testing.assert_array_equal(feats, data.labels)
    np.testing.assert_array_equal(data.raw[:, :3], data.labels)


def test_synth_is_isometric():
    data, feats = pl.synth_sphere_dataset(200, 20, 0.0, 0.6, 1.0, seed=2)
    fd = np.linalg.norm(feats[:, None] - feats[None], axis=-1)
    chord = np.linalg.norm(data.labels[:, None] - data.labels[None], axis=-1)
    np.testing.assert_allclose(fd, chord, atol=1e-10)


def test_synth_ranges_and_reproducibility():
    a, fa = pl.synth_sphere_dataset(300, 8, 0.01, (-0.2, 0.4), (0.1, 0.9), seed=5)
    b, fb = pl.synth_sphere_dataset(300, 8, 0.01, (-0.2, 0.4), (0.1, 0.9), seed=5)
    np.testing.assert_array_equal(fa, fb)
    np.testing.assert_array_equal(a.raw, b.raw)
    np.testing.assert_allclose(np.linalg.norm(a.labels, axis=1), 1.0, atol=1e-12)
    ang = geom.vector_to_angles(a.labels)
    assert ang[:, 0].min() >= -0.2 - 1e-12 and ang[:, 0].max() <= 0.4 + 1e-12
    assert ang[:, 1].min() >= 0.1 - 1e-12 and ang[:, 1].max() <= 0.9 + 1e-12


@pytest.mark.parametrize("kw", [
    dict(pitch_range=(0.5, 0.2)), dict(pitch_range=2.0), dict(yaw_range=(-4.0, 0.0)),
    dict(d=2), dict(n=5), dict(noise_sigma=-1.0),
])
def test_synth_invalid(kw):
    args = dict(n=50, d=3, noise_sigma=0.0, pitch_range=0.5, yaw_range=0.5, seed=0)
    args.update(kw)
    with pytest.raises(InvalidInputError):
        pl.synth_sphere_dataset(**args)


def test_local_euclidean_tracks_angle(noiseless_sphere):
    data, feats, _, _, _ = noiseless_sphere
    f, lab = feats[:1000], data.labels[:1000]
    ang = geom.angular_difference(lab[:, None], lab[None])
    l2 = np.linalg.norm(f[:, None] - f[None], axis=-1)
    iu = np.triu_indices(len(f), 1)
    near = ang[iu] < np.radians(10)
    assert np.corrcoef(l2[iu][near], ang[iu][near])[0, 1] >= 0.99


# --- config -------------------------------------------------------------------------

def test_config_defaults():
    c = pl.PipelineConfig()
    assert (c.k, c.subset_size, c.pretrain_epochs, c.it_epochs, c.ip_epochs) == (300, 2000, 10, 10, 100)
    assert c.lr == 1e-4 and c.batch_size == 64


def test_config_text_round_trip():
    c = pl.PipelineConfig(k=12, lr=3e-3, noise=0.05)
    assert pl.PipelineConfig.from_mapping(pl.parse_config_text(c.to_text())) == c


def test_config_parse_comments_and_errors():
    vals = pl.parse_config_text("# comment\nk = 7  # trailing\n\nlr=0.01\n")
    assert pl.PipelineConfig.from_mapping(vals).k == 7
    with pytest.raises(InvalidInputError):
        pl.parse_config_text("k 7")
    with pytest.raises(InvalidInputError):
        pl.PipelineConfig.from_mapping({"bogus": "1"})
    with pytest.raises(InvalidInputError):
        pl.PipelineConfig.from_mapping({"k": "seven"})
    with pytest.raises(InvalidInputError):
        pl.PipelineConfig(lr=0.0)
    with pytest.raises(InvalidInputError):
        pl.PipelineConfig(k=0)


# --- pretraining --------------------------------------------------------------------

def _toy_model(raw, activation="tanh", seed=0):
    rng = np.random.default_rng(seed)
    model = pl.MlpFeatureModel.create(raw.shape[1], 8, hidden=8, activation=activation, rng=rng)
    return model, pl.init_head(8, rng=rng)


def test_pretrain_zero_epochs():
    data, _ = pl.synth_sphere_dataset(50, 3, 0.0, 0.5, 0.5, seed=0)
    model, head = _toy_model(data.raw)
    m2, h2, losses = pl.pretrain(model, head, data.raw, data.labels, pl.PipelineConfig(pretrain_epochs=0))
    assert losses == []
    for a, b in zip(m2.tensors() + h2.tensors(), model.tensors() + head.tensors()):
        np.testing.assert_array_equal(a, b)


def test_pretrain_realizable_instance():
    data, _ = pl.synth_sphere_dataset(500, 3, 0.0, 0.5, 0.8, seed=1)
    design = np.c_[data.raw, np.ones(data.n)]
    coef = np.linalg.lstsq(design, data.labels, rcond=None)[0]
    assert np.abs(design @ coef - data.labels).mean() < 1e-12  # exactly realizable by a linear map
    model, head = _toy_model(data.raw, activation="identity")
    # L1 under Adam settles at roughly lr, so anneal in stages
    for lr in (1e-2, 1e-3, 1e-4):
        cfg = pl.PipelineConfig(pretrain_epochs=300, lr=lr, batch_size=500)
        model, head, losses = pl.pretrain(model, head, data.raw, data.labels, cfg)
    assert losses[-1] < 1e-3


def test_pretrain_deterministic():
    data, _ = pl.synth_sphere_dataset(120, 3, 0.01, 0.5, 0.5, seed=3)
    cfg = pl.PipelineConfig(pretrain_epochs=3, lr=1e-3, batch_size=32)
    runs = [pl.pretrain(*_toy_model(data.raw), data.raw, data.labels, cfg)[2] for _ in range(2)]
    assert runs[0] == runs[1]


def test_pretrain_rejects_empty():
    model, head = _toy_model(np.zeros((1, 7)))
    with pytest.raises(InvalidInputError):
        pl.pretrain(model, head, np.zeros((0, 7)), np.zeros((0, 3)), pl.PipelineConfig())


# --- PCF construction ---------------------------------------------------------------

def test_build_pcf_clamps_subset_and_k():
    data, feats = pl.synth_sphere_dataset(60, 5, 0.0, 0.5, 0.8, seed=0)
    geo, emb, used = pl.build_pcf(IdentityFeatures(), feats, pl.PipelineConfig(k=300, subset_size=2000))
    np.testing.assert_array_equal(used, np.arange(60))
    assert geo.k == 59 and emb.coords.shape == (60, 3)


def test_build_pcf_subset_deterministic():
    _, feats = pl.synth_sphere_dataset(300, 5, 0.0, 0.5, 0.8, seed=0)
    cfg = pl.PipelineConfig(k=10, subset_size=100, seed=4)
    a, b = pl.build_pcf(IdentityFeatures(), feats, cfg), pl.build_pcf(IdentityFeatures(), feats, cfg)
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[1].coords, b[1].coords)
    other = pl.build_pcf(IdentityFeatures(), feats, pl.PipelineConfig(k=10, subset_size=100, seed=5))
    assert not np.array_equal(a[2], other[2])


def test_heldout_error_improves_with_subset_size(noiseless_sphere):
    data, feats, _, _, _ = noiseless_sphere
    errs = []
    for n_sub in (200, 500, 2000):
        cfg = pl.PipelineConfig(k=20, subset_size=n_sub)
        geo, emb, used = pl.build_pcf(IdentityFeatures(), feats[:2000], cfg)
        sf = sp.fit_spherical(emb, data.labels[used])
        pred = pl.infer(IdentityFeatures(), geo, emb, sf, feats[2000:])
        errs.append(pl.mean_angular_error(pred, data.labels[2000:]))
    assert errs[0] > errs[1] > errs[2]
    assert np.degrees(errs[2]) < 2.0


# --- inference ----------------------------------------------------------------------

def test_infer_empty(noisy_sphere):
    _, feats, geo, emb = noisy_sphere
    out = pl.infer(IdentityFeatures(), geo, emb, sp.identity_params(), feats[:0])
    assert out.shape == (0, 2)


def test_infer_training_sample_self_consistent(noisy_sphere):
    data, feats, geo, emb = noisy_sphere
    sf = sp.fit_spherical(emb, data.labels[:2000])
    idx = np.arange(0, 2000, 50)
    pred = geom.angles_to_vector(pl.infer(IdentityFeatures(), geo, emb, sf, feats[idx]))
    ref = geom.angles_to_vector(sp.sf_forward(sf, emb.coords[idx]))
    assert np.degrees(geom.angular_difference(pred, ref)).max() < 0.5


def test_infer_oracle_heldout(noisy_sphere):
    data, feats, geo, emb = noisy_sphere
    sf = sp.fit_spherical(emb, data.labels[:2000])
    pred = pl.infer(IdentityFeatures(), geo, emb, sf, feats[2000:])
    assert np.degrees(pl.mean_angular_error(pred, data.labels[2000:])) < 2.0


# --- PCF-oriented training -------------------------------------------------------------

def test_it_zero_epochs_and_frozen_components(small_run):
    r = small_run
    cfg = pl.PipelineConfig(**{**SMALL, "it_epochs": 0})
    raw, lab = r.data.raw[r.train_idx], r.data.labels[r.train_idx]
    ip_bytes, sf_vec = pp.params_to_bytes(r.ip), r.before.sf.to_vector().copy()
    model, losses, _ = pl.pcf_oriented_training(r.model_before, r.ip, r.before.sf, raw, lab, cfg)
    assert losses == []
    for a, b in zip(model.tensors(), r.model_before.tensors()):
        np.testing.assert_array_equal(a, b)
    model, losses, _ = pl.pcf_oriented_training(r.model_before, r.ip, r.before.sf, raw, lab,
                                                pl.PipelineConfig(**SMALL))
    assert len(losses) == SMALL["it_epochs"]
    assert pp.params_to_bytes(r.ip) == ip_bytes
    np.testing.assert_array_equal(r.before.sf.to_vector(), sf_vec)


def test_it_skips_uninvertible_labels(small_run):
    r = small_run
    narrow = sp.SphericalFitParams(center=np.zeros(3), euler_zyx=np.zeros(3), k1=0.1, b1=0.0,
                                   k2=1.0, b2=0.0, radius=1.0)
    raw, lab = r.data.raw[r.train_idx], r.data.labels[r.train_idx]
    cfg = pl.PipelineConfig(**{**SMALL, "it_epochs": 1})
    _, _, skipped = pl.pcf_oriented_training(r.model_before, r.ip, narrow, raw, lab, cfg)
    expected = np.sum(~sp.invertible_mask(narrow, geom.vector_to_angles(lab)))
    assert skipped == expected > 0


def test_pipeline_end_to_end_deterministic(small_run):
    again = pl.run_pipeline(pl.PipelineConfig(**SMALL))
    assert again.summary() == small_run.summary()
    for a, b in zip(again.model_after.tensors(), small_run.model_after.tensors()):
        np.testing.assert_array_equal(a, b)


def test_pipeline_summary_finite(small_run):
    s = small_run.summary()
    assert all(np.isfinite(v) for v in s.values())
    assert len(small_run.pretrain_losses) == SMALL["pretrain_epochs"]
    assert small_run.ip_report.epochs == SMALL["ip_epochs"]
