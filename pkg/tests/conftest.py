import datetime as dt

import numpy as np
import pytest
import torch

from tif.datagen import GeneratorSpec, Sample, TemporalDataset

torch.set_num_threads(1)


def small_spec(seed: int = 0, **overrides) -> GeneratorSpec:
    """A 60-feature, 6-month dataset that trains in well under a second."""
    n_months = overrides.pop("n_months", 6)
    kw = dict(
        dim=60,
        n_train_months=n_months - 2,
        n_test_months=2,
        samples_per_month=200,
        benign_malware_ratio=3.0,
        n_families=2,
        family_schedule=[[0.5, 0.5]] * n_months,
        stable_features=[(0, 0.05, 0.8), (1, 0.1, 0.8), (2, 0.05, 0.7)],
        unstable_features=[(3, 0.05, 0.9, 2, 0.05), (4, 0.05, 0.9, 2, 0.05)],
        family_features=[(5, 0, 0.9), (6, 1, 0.9)],
        noise_features=[(j, 0.05) for j in range(7, 60)],
        seed=seed,
    )
    kw.update(overrides)
    return GeneratorSpec(**kw)


@pytest.fixture
def tiny_dataset() -> TemporalDataset:
    d = dt.date
    samples = [
        Sample("a", d(2014, 1, 3), 0, None, (1, 4)),
        Sample("b", d(2014, 1, 20), 1, "famA", (0, 2, 7)),
        Sample("c", d(2014, 2, 1), 1, "famB", ()),
    ]
    return TemporalDataset(8, samples)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
