"""Ground-truth retraining and model comparison metrics.

The retraining oracle applies an edit request to the dataset itself
(correct annotations, drop concept columns, drop rows) and retrains both
stages from the same fixed-seed initialization, producing the reference
models every closed-form edit is measured against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import f1_score

from .editing import EditRequest, apply_request_to_dataset
from .errors import DimensionError
from .model import (
    ConceptPredictor,
    Dataset,
    LabelPredictor,
    concept_params,
    label_params,
)
from .training import ModelSpec, TrainConfig, TrainedModel, train_two_stage

Array = np.ndarray


def predict_labels(g: ConceptPredictor, f: LabelPredictor, X: Array) -> Array:
    return f.predict(g.predict(X))


def evaluate_pair(g: ConceptPredictor, f: LabelPredictor, D: Dataset) -> dict:
    """Accuracy and macro-F1 of the two-stage pipeline on a dataset."""
    pred = predict_labels(g, f, D.inputs)
    acc = float((pred == D.labels).mean())
    f1 = float(f1_score(D.labels, pred, average="macro",
                        labels=list(range(D.num_classes)), zero_division=0))
    return {"accuracy": acc, "macro_f1": f1}


def retrain_after_edit(D: Dataset, req: EditRequest, spec: ModelSpec,
                       config: TrainConfig) -> TrainedModel:
    """Retrain both stages from scratch on the edited dataset."""
    edited = apply_request_to_dataset(D, req)
    return train_two_stage(edited, spec, config)


@dataclass
class ComparisonReport:
    concept_l2: float
    concept_rel: float
    label_l2: float
    label_rel: float
    metrics_a: dict
    metrics_b: dict
    agreement: float
    wall_times: dict | None = None

    def to_json(self) -> str:
        payload = {
            "concept_l2": self.concept_l2,
            "concept_rel": self.concept_rel,
            "label_l2": self.label_l2,
            "label_rel": self.label_rel,
            "metrics_a": self.metrics_a,
            "metrics_b": self.metrics_b,
            "agreement": self.agreement,
            "wall_times": self.wall_times,
        }
        return json.dumps(payload, sort_keys=True)


def _rel(dist: float, ref: Array) -> float:
    denom = float(np.linalg.norm(ref))
    return dist / denom if denom > 0 else (0.0 if dist == 0.0 else float("inf"))


def compare(g_a: ConceptPredictor, f_a: LabelPredictor,
            g_b: ConceptPredictor, f_b: LabelPredictor,
            test: Dataset, wall_times: dict | None = None) -> ComparisonReport:
    """Parameter distances, per-model metrics and prediction agreement.

    Model shapes must match (concept-level comparisons pass the reduced
    predictors on the reduced dataset).  Relative distances are taken
    against the second model, conventionally the retraining reference.
    """
    va, vb = concept_params(g_a), concept_params(g_b)
    wa, wb = label_params(f_a), label_params(f_b)
    if va.shape != vb.shape or wa.shape != wb.shape:
        raise DimensionError("model pairs have incompatible shapes")
    concept_l2 = float(np.linalg.norm(va - vb))
    label_l2 = float(np.linalg.norm(wa - wb))
    pred_a = predict_labels(g_a, f_a, test.inputs)
    pred_b = predict_labels(g_b, f_b, test.inputs)
    return ComparisonReport(
        concept_l2=concept_l2,
        concept_rel=_rel(concept_l2, vb),
        label_l2=label_l2,
        label_rel=_rel(label_l2, wb),
        metrics_a=evaluate_pair(g_a, f_a, test),
        metrics_b=evaluate_pair(g_b, f_b, test),
        agreement=float((pred_a == pred_b).mean()),
        wall_times=wall_times,
    )
