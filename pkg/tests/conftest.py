"""Shared fixtures: small synthetic cohorts and once-per-session trained
models (training is the slow part; several modules verify against it)."""

import numpy as np
import pytest

from icurisk.data import Normalizer, SynthConfig, preprocess, synth_generate
from icurisk.model import Dims
from icurisk.training import TrainConfig, train

LINEAR_DIMS = Dims(latent_dim=4, static_dim=7, feature_dim=6, transition_hidden=8,
                   emission_hidden=8, rnn_dim=16, attention_dim=6, predictor_hidden=3)


@pytest.fixture(scope="session")
def linear_cohort():
    """LGSSM records (d=4, M=6, T=20, 30% missing) plus their preprocessing."""
    cfg = SynthConfig(n_records=700, latent_dim=4, feature_dim=6, t_min=20, t_max=20,
                      missing_rate=0.3, prevalence=0.3, seed=11)
    ds = synth_generate(cfg)
    normalizer = Normalizer.fit(ds.records[:500])
    records = preprocess(ds.records, normalizer)
    return ds, records


@pytest.fixture(scope="session")
def trained_linear(linear_cohort):
    """Linear-mode model trained purely on the ELBO (no labels)."""
    _, records = linear_cohort
    cfg = TrainConfig(dims=LINEAR_DIMS, alpha=1.0, mc_samples=1, learning_rate=3e-3,
                      batch_size=128, max_epochs=60, patience=60, seed=0,
                      linear_mode=True, supervised=False)
    params, _ = train(records[:500], records[500:600], cfg)
    return params


@pytest.fixture(scope="session")
def classif_cohort():
    """Small nonlinear classification cohort with slow latent modes."""
    cfg = SynthConfig(n_records=1200, latent_dim=4, feature_dim=8, t_min=12, t_max=20,
                      missing_rate=0.25, prevalence=0.15, seed=7,
                      spectral_radius=0.97, mode_decays=(0.97, 0.9, 0.6, 0.45),
                      process_noise=0.35, obs_noise=0.25, static_drive=0.5,
                      readout_scale=10.0, readout_mode_weights=(1.0, 0.6, 0.3, 0.3))
    ds = synth_generate(cfg)
    normalizer = Normalizer.fit(ds.records[:900])
    records = preprocess(ds.records, normalizer)
    return ds, records


@pytest.fixture(scope="session")
def trained_classifier(classif_cohort):
    """Quick supervised run: enough to rank well above chance, not tuned."""
    _, records = classif_cohort
    dims = Dims(latent_dim=12, static_dim=7, feature_dim=8, transition_hidden=32,
                emission_hidden=16, rnn_dim=16, attention_dim=12, predictor_hidden=4)
    cfg = TrainConfig(dims=dims, alpha=0.1, mc_samples=1, learning_rate=2e-3,
                      batch_size=128, max_epochs=15, patience=15, seed=3, val_samples=3)
    params, _ = train(records[:900], records[900:1050], cfg)
    return params


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
