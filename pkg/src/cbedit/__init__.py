"""Closed-form editing of concept bottleneck models.

A concept bottleneck model predicts human-interpretable concepts from the
input and a class label from the concepts.  This package trains such
models at desk scale and then *edits* them in closed form, without
retraining, at three levels: correcting individual concept annotations,
removing whole concepts, and removing training rows.  Each edit is a
damped Newton step built from exact dense curvature or an
eigenvalue-corrected Kronecker-factored approximation, with retraining
oracles and analytic error bounds to verify the edits against.
"""

from .editing import (
    ConceptLabelEdit,
    ConceptRemoval,
    DataRemoval,
    EditBackend,
    EditReport,
    concept_importance,
    edit,
    edit_concept_labels,
    edit_remove_concepts,
    edit_remove_data,
)
from .errors import (
    CbeditError,
    ConfigError,
    DimensionError,
    DivergenceError,
    NotPositiveDefiniteError,
    NumericalError,
    StaleOperatorError,
    UnsupportedModelError,
)
from .model import ConceptPredictor, Dataset, DenseLayer, LabelPredictor
from .oracle import ComparisonReport, compare, evaluate_pair, retrain_after_edit
from .scenario import ScenarioConfig, inject_noise, synth_dataset
from .training import ModelSpec, TrainConfig, train_two_stage

__all__ = [
    "CbeditError",
    "ComparisonReport",
    "ConceptLabelEdit",
    "ConceptPredictor",
    "ConceptRemoval",
    "ConfigError",
    "DataRemoval",
    "Dataset",
    "DenseLayer",
    "DimensionError",
    "DivergenceError",
    "EditBackend",
    "EditReport",
    "LabelPredictor",
    "ModelSpec",
    "NotPositiveDefiniteError",
    "NumericalError",
    "ScenarioConfig",
    "StaleOperatorError",
    "TrainConfig",
    "UnsupportedModelError",
    "compare",
    "concept_importance",
    "edit",
    "edit_concept_labels",
    "edit_remove_concepts",
    "edit_remove_data",
    "evaluate_pair",
    "inject_noise",
    "retrain_after_edit",
    "synth_dataset",
    "train_two_stage",
]

__version__ = "0.1.0"
