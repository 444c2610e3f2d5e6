import numpy as np
import pytest

from cbedit.editing import ConceptLabelEdit, ConceptRemoval, DataRemoval
from cbedit.errors import ConfigError
from cbedit.scenario import ScenarioConfig, inject_noise, scenario_hash, synth_dataset
from cbedit.serialize import dataset_to_csv


class TestScenarioConfig:
    def test_json_roundtrip(self):
        cfg = ScenarioConfig(seed=3, noise_level="concept", noise_fraction=0.2)
        again = ScenarioConfig.from_dict(
            __import__("json").loads(cfg.to_json()))
        assert again == cfg

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(noise_fraction=0.7)

    def test_invalid_level_rejected(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(noise_level="bogus")

    def test_hash_tracks_content(self):
        a = ScenarioConfig(seed=1)
        b = ScenarioConfig(seed=2)
        assert scenario_hash(a) != scenario_hash(b)
        assert scenario_hash(a) == scenario_hash(ScenarioConfig(seed=1))


class TestSynthDataset:
    def test_same_seed_gives_identical_csv_bytes(self):
        cfg = ScenarioConfig(seed=11)
        a_train, a_test = synth_dataset(cfg)
        b_train, b_test = synth_dataset(cfg)
        assert dataset_to_csv(a_train) == dataset_to_csv(b_train)
        assert dataset_to_csv(a_test) == dataset_to_csv(b_test)

    def test_split_sizes(self):
        cfg = ScenarioConfig(n=300)
        train, test = synth_dataset(cfg)
        assert train.n == 240 and test.n == 60

    def test_single_concept_two_classes_is_deterministic_map(self):
        cfg = ScenarioConfig(n=200, d_in=3, k=1, num_classes=2)
        train, test = synth_dataset(cfg)
        for D in (train, test):
            for value in (0.0, 1.0):
                mask = D.concepts[:, 0] == value
                if mask.any():
                    assert len(set(D.labels[mask].tolist())) == 1

    def test_concepts_are_binary(self):
        train, _ = synth_dataset(ScenarioConfig())
        assert set(np.unique(train.concepts)) <= {0.0, 1.0}

    def test_default_scenario_is_learnable(self):
        # A trained model must clear the majority-class macro-F1 by a wide
        # margin, i.e. the concepts genuinely carry the labels.
        from sklearn.metrics import f1_score

        from cbedit.oracle import evaluate_pair
        from cbedit.training import TrainConfig, train_two_stage

        cfg = ScenarioConfig(noise_level=None)
        train, test = synth_dataset(cfg)
        quick = TrainConfig(seed=0, max_iters=8000, step_size=3e-3,
                            grad_tol=1e-6, l2_reg=0.05)
        tm = train_two_stage(train, cfg.model_spec(), quick)
        trained_f1 = evaluate_pair(tm.g, tm.f, test)["macro_f1"]
        majority = np.bincount(train.labels).argmax()
        majority_f1 = f1_score(test.labels,
                               np.full(test.n, majority),
                               average="macro",
                               labels=list(range(cfg.num_classes)),
                               zero_division=0)
        assert trained_f1 >= majority_f1 + 0.2


class TestInjectNoise:
    def test_zero_fraction_is_identity(self):
        train, _ = synth_dataset(ScenarioConfig())
        noisy, undo = inject_noise(train, "data", 0.0, 0)
        np.testing.assert_array_equal(noisy.labels, train.labels)
        assert undo == ConceptLabelEdit(())

    def test_concept_label_request_restores_dataset(self):
        train, _ = synth_dataset(ScenarioConfig())
        noisy, undo = inject_noise(train, "concept_label", 0.1, 5)
        assert isinstance(undo, ConceptLabelEdit)
        restored = noisy.concepts.copy()
        for i, j, val in undo.pairs:
            assert noisy.concepts[i, j] == 1.0 - val
            restored[i, j] = val
        np.testing.assert_array_equal(restored, train.concepts)

    def test_data_level_flips_exact_count(self):
        cfg = ScenarioConfig(n=300)
        train, _ = synth_dataset(cfg)
        noisy, undo = inject_noise(train, "data", 0.1, 1)
        assert isinstance(undo, DataRemoval)
        flipped = int((noisy.labels != train.labels).sum())
        assert flipped == len(undo.rows) == round(0.1 * train.n)

    def test_concept_level_returns_removal_request(self):
        train, _ = synth_dataset(ScenarioConfig())
        noisy, undo = inject_noise(train, "concept", 0.1, 2)
        assert isinstance(undo, ConceptRemoval)
        assert len(undo.concepts) == 1
        j = undo.concepts[0]
        changed = (noisy.concepts[:, j] != train.concepts[:, j]).sum()
        # flips cover the positive half-space of a random direction
        assert 0.3 * train.n <= changed <= 0.7 * train.n
        untouched = [c for c in range(train.k) if c != j]
        np.testing.assert_array_equal(noisy.concepts[:, untouched],
                                      train.concepts[:, untouched])

    def test_noise_is_deterministic(self):
        train, _ = synth_dataset(ScenarioConfig())
        a, req_a = inject_noise(train, "data", 0.1, 9)
        b, req_b = inject_noise(train, "data", 0.1, 9)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert req_a == req_b
