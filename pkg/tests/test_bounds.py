import numpy as np
import pytest

from cbedit.bounds import (
    SIGMOID_SECOND_DERIV_SUP,
    BoundInputs,
    error_bound,
    estimate_bound_inputs,
    remove_concept_label_terms_stage1,
    _exclusion_cell_mask,
)
from cbedit.editing import (
    ConceptLabelEdit,
    ConceptRemoval,
    DataRemoval,
    EditBackend,
    edit_remove_concepts,
    edit_remove_data,
)
from cbedit.errors import ConfigError, UnsupportedModelError
from cbedit.model import Dataset, LabelPredictor, concept_params
from cbedit.training import ModelSpec, TrainConfig, train_concept_stage

DELTA = 0.1
SPEC = ModelSpec(hidden=(), concept_link="sigmoid-bce")
CONFIG = TrainConfig(seed=5, max_iters=40000, step_size=4e-3, grad_tol=1e-9,
                     l2_reg=DELTA)


def logistic_instance(seed, n=60, d_in=4, k=3, d_out=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d_in))
    W = rng.normal(size=(k, d_in))
    C = (1.0 / (1.0 + np.exp(-(X @ W.T))) > 0.5).astype(float)
    y = rng.integers(0, d_out, size=n)
    return Dataset(X, C, y, d_out), rng


def dummy_label(D):
    return LabelPredictor(np.zeros((D.num_classes, D.k)), np.zeros(D.num_classes))


class TestErrorBoundFormula:
    def base_inputs(self, level="data", c_grad=1.0, cardinality=2):
        return BoundInputs(level=level, c_h=0.5, c_h_minus=10.0, c_grad=c_grad,
                           sigma_min=2.0, sigma_min_removed=1.5, delta=DELTA,
                           cardinality=cardinality)

    def test_zero_gradient_gives_zero_bound(self):
        assert error_bound(self.base_inputs(c_grad=0.0)) == 0.0

    def test_doubling_cardinality_at_least_doubles_second_term(self):
        one = error_bound(self.base_inputs(cardinality=1))
        two = error_bound(self.base_inputs(cardinality=2))
        assert two >= 2.0 * one - 1e-12

    def test_monotone_decreasing_in_delta(self):
        lo = error_bound(BoundInputs("data", 0.5, 10.0, 1.0, 2.0, 1.5, 0.05, 2))
        hi = error_bound(BoundInputs("data", 0.5, 10.0, 1.0, 2.0, 1.5, 0.5, 2))
        assert hi < lo

    def test_requires_positive_delta(self):
        with pytest.raises(ConfigError):
            error_bound(BoundInputs("data", 0.5, 10.0, 1.0, 2.0, 1.5, 0.0, 2))

    def test_concept_label_level_ignores_cardinality_multiplier(self):
        a = error_bound(self.base_inputs(level="concept_label", cardinality=1))
        b = error_bound(self.base_inputs(level="concept_label", cardinality=5))
        assert a == b


class TestSigmoidConstant:
    def test_sup_of_second_derivative(self):
        s = np.linspace(-12, 12, 200001)
        sig = 1.0 / (1.0 + np.exp(-s))
        second = sig * (1 - sig) * (1 - 2 * sig)
        assert np.abs(second).max() == pytest.approx(SIGMOID_SECOND_DERIV_SUP,
                                                     rel=1e-6)


class TestEstimateBoundInputs:
    def test_mse_link_gives_zero_lipschitz(self):
        D, _ = logistic_instance(0)
        g, _ = train_concept_stage(
            D, ModelSpec(hidden=(), concept_link="mse"),
            TrainConfig(seed=1, max_iters=5000, step_size=2e-3, grad_tol=1e-8,
                        l2_reg=DELTA))
        bi = estimate_bound_inputs(D, g, DataRemoval((0, 1)), DELTA)
        assert bi.c_h == 0.0 and bi.c_h_minus == 0.0

    def test_empty_removal_gives_zero_gradient(self):
        D, _ = logistic_instance(1)
        g, _ = train_concept_stage(D, SPEC, CONFIG)
        bi = estimate_bound_inputs(D, g, DataRemoval(()), DELTA)
        assert bi.c_grad == 0.0

    def test_nonconvex_model_rejected(self):
        D, _ = logistic_instance(2)
        from cbedit.training import init_concept_predictor

        g = init_concept_predictor(ModelSpec(hidden=(4,)), D.d_in, D.k, 0)
        with pytest.raises(UnsupportedModelError):
            estimate_bound_inputs(D, g, DataRemoval((0,)), DELTA)

    def test_lipschitz_constant_dominates_difference_quotients(self):
        # Grid search the per-term Hessian difference quotient; the analytic
        # constant must dominate it.
        rng = np.random.default_rng(7)
        D, _ = logistic_instance(7, n=10, d_in=1, k=1, d_out=2)
        g, _ = train_concept_stage(
            D, SPEC, TrainConfig(seed=7, max_iters=3000, step_size=5e-3,
                                 grad_tol=1e-7, l2_reg=DELTA))
        bi = estimate_bound_inputs(D, g, ConceptLabelEdit(((0, 0, 1.0),)), DELTA)
        x_h = np.hstack([D.inputs, np.ones((D.n, 1))])

        def term_hessian(theta, i):
            s = x_h[i] @ theta
            p = 1.0 / (1.0 + np.exp(-s))
            return p * (1 - p) * np.outer(x_h[i], x_h[i])

        worst = 0.0
        for _ in range(200):
            t1 = rng.normal(size=2)
            t2 = rng.normal(size=2)
            for i in range(D.n):
                num = np.linalg.norm(term_hessian(t1, i) - term_hessian(t2, i), 2)
                worst = max(worst, num / np.linalg.norm(t1 - t2))
        assert worst <= bi.c_h + 1e-9


class TestBoundValidity:
    """Measured stage-1 edit error never exceeds the bound (convex regime)."""

    @pytest.mark.parametrize("seed", [100, 101, 102])
    def test_data_level(self, seed):
        D, rng = logistic_instance(seed)
        g, _ = train_concept_stage(D, SPEC, CONFIG)
        G = tuple(sorted(rng.choice(D.n, size=2, replace=False).tolist()))
        req = DataRemoval(G)
        bound = error_bound(estimate_bound_inputs(D, g, req, DELTA))
        g_retrain, _ = train_concept_stage(D.without_rows(list(G)), SPEC, CONFIG)
        for rows_mode in ("remaining", "all"):
            backend = EditBackend(name="exact", curvature_mode="hessian",
                                  l2=DELTA, hessian_rows=rows_mode)
            g_e, _, _ = edit_remove_data(g, dummy_label(D), D, req, backend)
            err = np.linalg.norm(concept_params(g_e) - concept_params(g_retrain))
            assert err <= bound

    @pytest.mark.parametrize("seed", [103, 104])
    def test_concept_level(self, seed):
        D, rng = logistic_instance(seed)
        g, _ = train_concept_stage(D, SPEC, CONFIG)
        req = ConceptRemoval((int(rng.integers(0, D.k)),))
        bound = error_bound(estimate_bound_inputs(D, g, req, DELTA))
        backend = EditBackend(name="exact", curvature_mode="hessian", l2=DELTA)
        g_e, _, _ = edit_remove_concepts(g, dummy_label(D), D, req, backend)
        g_retrain, _ = train_concept_stage(
            D.without_concepts(list(req.concepts)), SPEC, CONFIG)
        err = np.linalg.norm(concept_params(g_e) - concept_params(g_retrain))
        assert err <= bound

    @pytest.mark.parametrize("seed", [105, 106])
    def test_concept_label_level(self, seed):
        D, rng = logistic_instance(seed)
        g, _ = train_concept_stage(D, SPEC, CONFIG)
        cells = {(int(rng.integers(0, D.n)), int(rng.integers(0, D.k)))
                 for _ in range(3)}
        pairs = tuple((i, j, float(D.concepts[i, j])) for i, j in sorted(cells))
        req = ConceptLabelEdit(pairs)
        bound = error_bound(estimate_bound_inputs(D, g, req, DELTA))
        g_e = remove_concept_label_terms_stage1(g, D, req, DELTA)
        g_retrain, _ = train_concept_stage(
            D, SPEC, CONFIG, cell_mask=_exclusion_cell_mask(D, pairs))
        err = np.linalg.norm(concept_params(g_e) - concept_params(g_retrain))
        assert err <= bound
