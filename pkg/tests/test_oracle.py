import numpy as np
import pytest

from cbedit.editing import ConceptLabelEdit, ConceptRemoval, DataRemoval
from cbedit.errors import DimensionError
from cbedit.model import LabelPredictor, concept_params, label_params
from cbedit.oracle import compare, evaluate_pair, retrain_after_edit
from cbedit.scenario import ScenarioConfig, inject_noise, synth_dataset
from cbedit.training import ModelSpec, TrainConfig, train_two_stage

from conftest import make_dataset

SPEC = ModelSpec(hidden=())
CONFIG = TrainConfig(seed=4, max_iters=3000, step_size=2e-3, grad_tol=1e-8,
                     l2_reg=0.1)


@pytest.fixture(scope="module")
def trained():
    D = make_dataset(seed=30, n=40, d_in=4, k=3)
    return D, train_two_stage(D, SPEC, CONFIG)


class TestRetrainAfterEdit:
    def test_empty_edit_reproduces_original_bitwise(self, trained):
        D, tm = trained
        rt = retrain_after_edit(D, ConceptLabelEdit(()), SPEC, CONFIG)
        np.testing.assert_array_equal(concept_params(rt.g), concept_params(tm.g))
        np.testing.assert_array_equal(label_params(rt.f), label_params(tm.f))

    def test_concept_removal_shrinks_output_dim(self, trained):
        D, _ = trained
        rt = retrain_after_edit(D, ConceptRemoval((1,)), SPEC, CONFIG)
        assert rt.g.k == D.k - 1
        assert rt.f.k == D.k - 1

    def test_retraining_is_idempotent(self, trained):
        D, _ = trained
        req = DataRemoval((0, 5))
        a = retrain_after_edit(D, req, SPEC, CONFIG)
        b = retrain_after_edit(D, req, SPEC, CONFIG)
        np.testing.assert_array_equal(concept_params(a.g), concept_params(b.g))
        np.testing.assert_array_equal(label_params(a.f), label_params(b.f))

    def test_noise_undo_recovers_clean_optimum(self):
        # Correcting the corrupted cells back trains on exactly the clean
        # data, so the same seed gives bitwise-identical parameters.
        config = ScenarioConfig(n=60, d_in=4, k=3, num_classes=3, model="linear",
                                noise_level="concept_label", noise_fraction=0.1,
                                train=CONFIG)
        train_D, _ = synth_dataset(config)
        clean = train_two_stage(train_D, SPEC, CONFIG)
        noisy_D, undo = inject_noise(train_D, "concept_label", 0.1, config.seed)
        rt = retrain_after_edit(noisy_D, undo, SPEC, CONFIG)
        np.testing.assert_array_equal(concept_params(rt.g),
                                      concept_params(clean.g))
        np.testing.assert_array_equal(label_params(rt.f), label_params(clean.f))


class TestCompare:
    def test_identical_models(self, trained):
        D, tm = trained
        rep = compare(tm.g, tm.f, tm.g, tm.f, D)
        assert rep.concept_l2 == 0.0 and rep.label_l2 == 0.0
        assert rep.agreement == 1.0

    def test_positively_scaled_logits_keep_argmax(self, trained):
        D, tm = trained
        scaled = LabelPredictor(2.0 * tm.f.weights, 2.0 * tm.f.bias)
        rep = compare(tm.g, tm.f, tm.g, scaled, D)
        assert rep.agreement == 1.0
        assert rep.label_l2 > 0.0

    def test_agreement_matches_naive_loop(self, trained):
        D, tm = trained
        other = train_two_stage(D, SPEC, TrainConfig(
            seed=77, max_iters=300, step_size=2e-3, grad_tol=1e-8, l2_reg=0.5))
        rep = compare(tm.g, tm.f, other.g, other.f, D)
        pred_a = tm.f.predict(tm.g.predict(D.inputs))
        pred_b = other.f.predict(other.g.predict(D.inputs))
        expected = sum(int(a == b) for a, b in zip(pred_a, pred_b)) / D.n
        assert rep.agreement == pytest.approx(expected)

    def test_distance_is_symmetric(self, trained):
        D, tm = trained
        other = train_two_stage(D, SPEC, TrainConfig(
            seed=9, max_iters=2000, step_size=2e-3, grad_tol=1e-8, l2_reg=0.1))
        ab = compare(tm.g, tm.f, other.g, other.f, D)
        ba = compare(other.g, other.f, tm.g, tm.f, D)
        assert ab.concept_l2 == ba.concept_l2
        assert ab.label_l2 == ba.label_l2

    def test_shape_mismatch_raises(self, trained):
        D, tm = trained
        reduced = retrain_after_edit(D, ConceptRemoval((0,)), SPEC, CONFIG)
        with pytest.raises(DimensionError):
            compare(tm.g, tm.f, reduced.g, reduced.f, D)

    def test_json_has_stable_key_order(self, trained):
        D, tm = trained
        a = compare(tm.g, tm.f, tm.g, tm.f, D).to_json()
        b = compare(tm.g, tm.f, tm.g, tm.f, D).to_json()
        assert a == b

    def test_metrics_bounded(self, trained):
        D, tm = trained
        m = evaluate_pair(tm.g, tm.f, D)
        assert 0.0 <= m["accuracy"] <= 1.0
        assert 0.0 <= m["macro_f1"] <= 1.0
