import numpy as np
import pytest

from cbedit.model import Dataset
from cbedit.training import ModelSpec, TrainConfig, train_two_stage


def make_dataset(seed=0, n=12, d_in=5, k=3, d_out=3, binary_concepts=True):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d_in))
    C = rng.uniform(size=(n, k))
    if binary_concepts:
        C = C.round()
    y = rng.integers(0, d_out, size=n)
    return Dataset(X, C, y, d_out)


def quadratic_dataset(seed=0, n=200, d_in=5, k=4, d_out=3):
    """Soft concept targets in (0, 1) for the mse-link configuration."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d_in))
    W = rng.normal(size=(k, d_in)) * 0.8
    C = 1.0 / (1.0 + np.exp(-(X @ W.T)))
    y = rng.integers(0, d_out, size=n)
    return Dataset(X, C, y, d_out)


QUAD_SPEC = ModelSpec(hidden=(), concept_link="mse", label_loss="mse")
QUAD_DELTA = 1e-3
QUAD_CONFIG = TrainConfig(seed=7, max_iters=100000, step_size=3e-3,
                          grad_tol=1e-11, l2_reg=QUAD_DELTA)


@pytest.fixture(scope="session")
def quadratic_setup():
    """Trained fully-quadratic configuration (linear g + f, mse both stages)."""
    D = quadratic_dataset()
    trained = train_two_stage(D, QUAD_SPEC, QUAD_CONFIG)
    return D, trained
