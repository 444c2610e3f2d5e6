"""Scenario configuration, synthetic data generation, and noise injection.

The synthetic generator draws standard-normal inputs, derives binary
concepts by thresholding a random linear-sigmoid map at 0.5, and labels
each row by the argmax of a linear map of its concepts.  The label map's
columns decay geometrically, so concepts have genuinely graded relevance
(early concepts matter, late ones barely do), which gives the importance
experiments a real signal to find.  Everything is a pure function of the
seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .editing import (
    ConceptLabelEdit,
    ConceptRemoval,
    DataRemoval,
    EditRequest,
)
from .errors import ConfigError
from .model import Dataset, sigmoid
from .training import ModelSpec, TrainConfig

NOISE_LEVELS = ("concept_label", "concept", "data")

LABEL_COLUMN_DECAY = 0.65


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment's full recipe: data, model, noise, backend, training."""

    seed: int = 0
    n: int = 300
    d_in: int = 10
    k: int = 8
    num_classes: int = 4
    model: str = "mlp"                 # "linear" | "mlp"
    hidden: tuple[int, ...] = (8,)
    concept_link: str = "sigmoid-bce"
    label_loss: str = "softmax-ce"
    noise_level: str | None = "data"
    noise_fraction: float = 0.1
    backend: str = "exact"
    curvature_mode: str = "auto"
    extra_damping: float = 2.0
    label_extra_damping: float = 0.5
    h_tilde_mode: str = "recompute"
    ridge_alpha: float = 1e-6
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        seed=0, max_iters=20000, step_size=3e-3, grad_tol=1e-6, l2_reg=0.05))
    repetitions: int = 5

    def __post_init__(self) -> None:
        if min(self.n, self.d_in, self.k) < 1 or self.num_classes < 2:
            raise ConfigError("dimensions must be positive (at least 2 classes)")
        if not (0.0 <= self.noise_fraction <= 0.5):
            raise ConfigError("noise fraction must lie in [0, 0.5]")
        if self.noise_level is not None and self.noise_level not in NOISE_LEVELS:
            raise ConfigError(f"unknown noise level {self.noise_level!r}")
        if self.model not in ("linear", "mlp"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be positive")

    def model_spec(self) -> ModelSpec:
        hidden = () if self.model == "linear" else tuple(self.hidden)
        return ModelSpec(hidden=hidden, concept_link=self.concept_link,
                         label_loss=self.label_loss)

    def edit_backend(self):
        from .editing import EditBackend

        return EditBackend(name=self.backend, curvature_mode=self.curvature_mode,
                           l2=self.train.l2_reg, extra_damping=self.extra_damping,
                           label_extra_damping=self.label_extra_damping,
                           h_tilde_mode=self.h_tilde_mode,
                           ridge_alpha=self.ridge_alpha)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["hidden"] = list(self.hidden)
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioConfig":
        data = dict(payload)
        try:
            if "train" in data and isinstance(data["train"], dict):
                data["train"] = TrainConfig(**data["train"])
            if "hidden" in data:
                data["hidden"] = tuple(data["hidden"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad scenario config: {exc}") from exc


def scenario_hash(config: ScenarioConfig) -> str:
    return hashlib.sha256(config.to_json().encode()).hexdigest()[:16]


def synth_dataset(config: ScenarioConfig,
                  seed: int | None = None) -> tuple[Dataset, Dataset]:
    """Deterministic synthetic (train, test) split, 80/20.

    Labels are a deterministic function of the binary concepts, so the
    concepts are genuinely predictive of the labels by construction.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 11])
    n, d_in, k, d_out = config.n, config.d_in, config.k, config.num_classes
    X = rng.normal(size=(n, d_in))
    # Concept functionals live in a low-rank latent subspace, so concepts
    # are partially redundant: removing one leaves correlated partners
    # carrying most of its label information (the regime where concept
    # removal is recoverable) without making the concept covariance so
    # ill-conditioned that damped Newton steps cannot track retraining.
    rank = max(1, min(d_in, 3))
    mix = rng.normal(size=(k, rank))
    basis = rng.normal(size=(rank, d_in)) / np.sqrt(d_in)
    W_c = mix @ basis
    b_c = 0.2 * rng.normal(size=k)
    concepts = (sigmoid(X @ W_c.T + b_c) > 0.5).astype(np.float64)
    decay = LABEL_COLUMN_DECAY ** np.arange(k)
    W_y = rng.normal(size=(d_out, k)) * decay
    # Per-class score offsets keep the argmax classes roughly balanced
    # (macro-F1 degenerates on near-empty classes).  The offsets are fit
    # by a short deterministic iteration because argmax shares respond to
    # them in lumps (concepts are binary, so scores take few distinct
    # values).
    scores = concepts @ W_y.T
    target = np.full(d_out, 1.0 / d_out)
    offsets = np.zeros(d_out)
    step = scores.std() + 1e-12
    for _ in range(200):
        shares = np.bincount(np.argmax(scores - offsets, axis=1),
                             minlength=d_out) / n
        offsets += step * (shares - target)
    labels = np.argmax(scores - offsets, axis=1)
    names = [f"concept_{j}" for j in range(k)]
    n_train = int(round(0.8 * n))
    train = Dataset(X[:n_train], concepts[:n_train], labels[:n_train], d_out,
                    list(names))
    test = Dataset(X[n_train:], concepts[n_train:], labels[n_train:], d_out,
                   list(names))
    return train, test


def inject_noise(D: Dataset, level: str | None, fraction: float, seed: int
                 ) -> tuple[Dataset, EditRequest]:
    """Corrupt the dataset and return the request that exactly undoes it.

    * ``concept_label``: pick ``fraction`` of the rows and flip one random
      concept cell in each (one corrupted annotation per affected datum);
      the undo request corrects each cell back to its original value.
    * ``data``: shift ``fraction`` of the rows' labels to the next class,
      drawing the rows from the most populous classes first; the undo
      request removes those rows.  Concentrated, systematic mislabeling is
      what a trainer actually picks up (and a removal cures); uniformly
      random relabeling mostly washes out at this scale.
    * ``concept``: flip ``fraction`` of the concepts on the half-space of
      rows with positive projection onto a random input direction; the
      undo request removes the corrupted concepts entirely.  Flipping an
      input-dependent subset makes the corruption *learnable*, so the
      corrupted concept feeds confident false signal to the label stage
      instead of washing out as unlearnable noise.
    """
    if fraction < 0 or fraction > 0.5:
        raise ConfigError("noise fraction must lie in [0, 0.5]")
    if level is None or fraction == 0.0:
        return D, ConceptLabelEdit(())
    rng = np.random.default_rng([seed, 23])
    concepts = D.concepts.copy()
    labels = D.labels.copy()
    names = list(D.names) if D.names is not None else None

    if level == "concept_label":
        m = int(round(fraction * D.n))
        rows = np.sort(rng.choice(D.n, size=m, replace=False))
        cols = rng.integers(0, D.k, size=m)
        pairs = []
        for i, j in zip(rows.tolist(), cols.tolist()):
            pairs.append((i, j, float(D.concepts[i, j])))
            concepts[i, j] = 1.0 - concepts[i, j]
        noisy = Dataset(D.inputs.copy(), concepts, labels, D.num_classes, names)
        return noisy, ConceptLabelEdit(tuple(pairs))

    if level == "data":
        m = int(round(fraction * D.n))
        counts = np.bincount(D.labels, minlength=D.num_classes)
        chosen: list[int] = []
        for cls in np.argsort(-counts):
            pool = np.flatnonzero(D.labels == cls)
            take = min(m - len(chosen), pool.size)
            if take > 0:
                chosen.extend(rng.choice(pool, size=take, replace=False).tolist())
            if len(chosen) == m:
                break
        rows = np.sort(np.asarray(chosen, dtype=np.intp))
        labels[rows] = (labels[rows] + 1) % D.num_classes
        noisy = Dataset(D.inputs.copy(), concepts, labels, D.num_classes, names)
        return noisy, DataRemoval(tuple(int(i) for i in rows))

    if level == "concept":
        m = max(1, int(round(fraction * D.k)))
        cols = np.sort(rng.choice(D.k, size=m, replace=False))
        direction = rng.normal(size=D.d_in)
        rows = np.flatnonzero(D.inputs @ direction > 0.0)
        for j in cols:
            concepts[rows, j] = 1.0 - concepts[rows, j]
        noisy = Dataset(D.inputs.copy(), concepts, labels, D.num_classes, names)
        return noisy, ConceptRemoval(tuple(int(j) for j in cols))

    raise ConfigError(f"unknown noise level {level!r}")
