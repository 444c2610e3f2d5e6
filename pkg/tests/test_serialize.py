import numpy as np
import pytest

from cbedit.errors import ConfigError, DimensionError
from cbedit.model import concept_params, label_params
from cbedit.scenario import ScenarioConfig, synth_dataset
from cbedit.serialize import (
    checkpoint_from_json,
    checkpoint_to_json,
    dataset_from_csv,
    dataset_to_csv,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from cbedit.training import ModelSpec, TrainConfig, train_two_stage

from conftest import make_dataset


class TestDatasetCsv:
    def test_roundtrip_preserves_bits(self):
        D = make_dataset(seed=40, n=15, d_in=4, k=3, binary_concepts=False)
        text = dataset_to_csv(D)
        back = dataset_from_csv(text, num_classes=D.num_classes)
        np.testing.assert_array_equal(back.inputs, D.inputs)
        np.testing.assert_array_equal(back.concepts, D.concepts)
        np.testing.assert_array_equal(back.labels, D.labels)
        assert dataset_to_csv(back) == text

    def test_header_validation(self):
        with pytest.raises(DimensionError):
            dataset_from_csv("a,b,c\n1,2,0\n")

    def test_file_roundtrip_with_names(self, tmp_path):
        train, _ = synth_dataset(ScenarioConfig(n=50, d_in=3, k=2))
        path = tmp_path / "train.csv"
        save_dataset(path, train)
        assert (tmp_path / "train.names.json").exists()
        back = load_dataset(path, num_classes=train.num_classes)
        assert back.names == train.names
        np.testing.assert_array_equal(back.inputs, train.inputs)


class TestCheckpoint:
    def test_roundtrip_preserves_bits(self):
        D = make_dataset(seed=41, n=20, d_in=4, k=3)
        tm = train_two_stage(D, ModelSpec(hidden=(3,)),
                             TrainConfig(seed=2, max_iters=200, step_size=1e-3,
                                         grad_tol=1e-9, l2_reg=0.1))
        text = checkpoint_to_json(tm.g, tm.f)
        g2, f2 = checkpoint_from_json(text)
        np.testing.assert_array_equal(concept_params(g2), concept_params(tm.g))
        np.testing.assert_array_equal(label_params(f2), label_params(tm.f))
        assert checkpoint_to_json(g2, f2) == text

    def test_file_roundtrip(self, tmp_path):
        D = make_dataset(seed=42, n=10, d_in=3, k=2)
        tm = train_two_stage(D, ModelSpec(),
                             TrainConfig(seed=3, max_iters=100, step_size=1e-3,
                                         grad_tol=1e-9))
        path = tmp_path / "model.json"
        save_checkpoint(path, tm.g, tm.f)
        g2, f2 = load_checkpoint(path)
        np.testing.assert_array_equal(concept_params(g2), concept_params(tm.g))
        np.testing.assert_array_equal(label_params(f2), label_params(tm.f))

    def test_malformed_checkpoint_rejected(self):
        with pytest.raises(ConfigError):
            checkpoint_from_json("{}")
        with pytest.raises(ConfigError):
            checkpoint_from_json('{"layers": "nope", "link": 1, "label": {}}')
