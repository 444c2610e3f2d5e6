import numpy as np
import pytest

from cbedit.errors import ConfigError, DivergenceError
from cbedit.model import Dataset, concept_params, label_params
from cbedit.training import (
    ModelSpec,
    TrainConfig,
    train_concept_stage,
    train_stage,
    train_two_stage,
)


def separable_dataset():
    # One concept, cleanly separable by the first coordinate.
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    c = (X[:, 0] > 0).astype(float)[:, None]
    y = c[:, 0].astype(int)
    return Dataset(X, c, y, 2)


def test_converges_to_first_order_point():
    D = separable_dataset()
    cfg = TrainConfig(seed=1, max_iters=50000, step_size=5e-3, grad_tol=1e-6,
                      l2_reg=0.05)
    g, info = train_concept_stage(D, ModelSpec(), cfg)
    assert info.converged
    assert info.grad_norm <= 1e-6


def test_ridge_shrinks_parameters():
    D = separable_dataset()
    g_free, _ = train_concept_stage(
        D, ModelSpec(), TrainConfig(seed=1, max_iters=20000, step_size=2e-3,
                                    grad_tol=1e-7, l2_reg=0.0))
    # The huge ridge needs a step below its own stability limit.
    g_ridge, _ = train_concept_stage(
        D, ModelSpec(), TrainConfig(seed=1, max_iters=20000, step_size=5e-4,
                                    grad_tol=1e-7, l2_reg=1e3))
    assert (np.linalg.norm(concept_params(g_ridge))
            <= np.linalg.norm(concept_params(g_free)))


def test_same_seed_is_bitwise_identical():
    D = separable_dataset()
    cfg = TrainConfig(seed=3, max_iters=500, step_size=1e-3, grad_tol=1e-9,
                      l2_reg=0.01)
    spec = ModelSpec(hidden=(4,))
    a = train_two_stage(D, spec, cfg)
    b = train_two_stage(D, spec, cfg)
    np.testing.assert_array_equal(concept_params(a.g), concept_params(b.g))
    np.testing.assert_array_equal(label_params(a.f), label_params(b.f))


def test_divergence_raises():
    # The quadratic mse objective genuinely explodes under an oversized
    # step (tanh networks saturate instead and merely oscillate).
    D = separable_dataset()
    cfg = TrainConfig(seed=0, max_iters=5000, step_size=1e4, grad_tol=1e-9)
    with pytest.raises(DivergenceError):
        train_concept_stage(D, ModelSpec(concept_link="mse"), cfg)


def test_label_stage_requires_concept_predictor():
    D = separable_dataset()
    with pytest.raises(ConfigError):
        train_stage("label", D, TrainConfig(), ModelSpec())


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(step_size=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_tol=-1.0)
