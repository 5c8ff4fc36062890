"""
Pytest configuration and shared fixtures.
"""

import numpy as np
import pytest

from phantom import generate_centre
from preprocess import preprocess_pair
from schemas import (
    CentreSpec,
    ExperimentConfig,
    FederationConfig,
    MetricConfig,
    ParadigmConfig,
    PreprocessConfig,
    StrategyConfig,
    TrainingConfig,
    UNetConfig,
)


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(20240607)


@pytest.fixture
def micro_unet_config():
    """Smallest U-Net that still has a pool/upsample level and a residual block."""
    return UNetConfig(input_size=8, depth=1, base_channels=2, blocks_per_level=1)


@pytest.fixture
def small_unet_config():
    return UNetConfig(input_size=16, depth=2, base_channels=4, blocks_per_level=1)


@pytest.fixture
def small_centre_spec():
    return CentreSpec(centre_id="T", n_patients=5, shape=(24, 24, 24))


@pytest.fixture(scope="session")
def tiny_experiment_config():
    """Two 16^3 centres plus an unseen one; one round of FedAvg.

    Small enough that a full experiment (generation, preprocessing, training
    and evaluation) finishes in seconds.
    """
    centres = [
        CentreSpec(centre_id="A", n_patients=5, shape=(16, 16, 16), fov_cut_fraction=0.1),
        CentreSpec(centre_id="B", n_patients=5, shape=(16, 16, 16), orientation="IAR", contrast_gain=1.2),
    ]
    unseen = CentreSpec(centre_id="E", n_patients=5, shape=(16, 16, 16), bias_amplitude=0.2)
    return ExperimentConfig(
        seed=7,
        federation=FederationConfig(num_clients=2, rounds=1, local_epochs=1, strategy=StrategyConfig(), seed=7),
        centres=centres,
        unseen=unseen,
        preprocess=PreprocessConfig(target_dim=16, bias_poly_degree=2, bias_iters=2),
        model=UNetConfig(input_size=16, depth=2, base_channels=4, blocks_per_level=1),
        paradigm=ParadigmConfig(kind="random_multi_2d", patch_size=12),
        training=TrainingConfig(lr=1e-3, batch_size=8, augmentation="none", slice_stride=4),
        metrics=MetricConfig(),
    )


@pytest.fixture(scope="session")
def tiny_cohorts(tiny_experiment_config):
    """Preprocessed cohorts of the tiny experiment keyed by centre id."""
    cfg = tiny_experiment_config
    cohorts = {}
    for spec in list(cfg.centres) + [cfg.unseen]:
        cohort = generate_centre(spec, cfg.seed)
        patients = [
            preprocess_pair(p.mri, p.ct, p.mask, cfg.preprocess, patient_id=p.patient_id) for p in cohort.pairs
        ]
        cohorts[spec.centre_id] = (patients, cohort.train, cohort.val, cohort.test)
    return cohorts


@pytest.fixture
def prepared_patient(tiny_cohorts):
    """One preprocessed 16^3 patient."""
    return tiny_cohorts["A"][0][0]
