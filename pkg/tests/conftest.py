"""Shared builders for the test suite.

Each helper returns freshly constructed objects so tests cannot leak
state into one another through cached datasets.
"""

import numpy as np
import pytest

from flowlab.data import GmmSpec, LatentDataset, Rng, generate_gmm, make_gmm_spec


@pytest.fixture
def small_gmm():
    """4-component, d=8 mixture with well-separated means."""
    spec = make_gmm_spec(d=8, components=4, mean_scale=6.0, scale=0.5, seed=3)
    return generate_gmm(spec, 200)


@pytest.fixture
def tiny_dataset():
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    return LatentDataset(data=rows, ids=np.arange(3))


def tight_clusters(k: int, per: int, d: int, spread: float, sep: float, seed: int) -> LatentDataset:
    """k isotropic bundles with means sep apart and within-bundle spread."""
    g = Rng(seed).generator
    means = sep * g.standard_normal((k, d))
    data = np.concatenate([means[j] + spread * g.standard_normal((per, d)) for j in range(k)])
    labels = np.repeat(np.arange(k), per)
    return LatentDataset(data=data, ids=np.arange(k * per), labels=labels)
