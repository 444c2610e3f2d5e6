"""Deterministic full-batch gradient-descent training for both stages.

Initialization is Xavier-uniform from a seeded generator, so a given
(config, dataset, architecture) triple always produces bit-identical
parameters.  The optimizer is plain full-batch gradient descent; it stops
when the gradient norm reaches ``grad_tol`` or after ``max_iters`` steps,
and raises :class:`DivergenceError` if the loss goes non-finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import (
    ConceptPredictor,
    Dataset,
    DenseLayer,
    LabelPredictor,
    concept_params,
    grad_concept_params,
    grad_label_params_from_concepts,
    label_params,
    with_concept_params,
    with_label_params,
)

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    max_iters: int = 20000
    step_size: float = 1e-3
    grad_tol: float = 1e-8
    l2_reg: float = 0.0

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.grad_tol <= 0:
            raise ConfigError("grad_tol must be positive")
        if self.l2_reg < 0:
            raise ConfigError("l2_reg must be nonnegative")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be nonnegative")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: hidden widths, links, bias usage."""

    hidden: tuple[int, ...] = ()
    concept_link: str = "sigmoid-bce"
    label_loss: str = "softmax-ce"
    label_bias: bool = True

    @property
    def is_linear(self) -> bool:
        return len(self.hidden) == 0


@dataclass
class TrainInfo:
    converged: bool
    n_iters: int
    grad_norm: float
    final_loss: float


def _xavier_layer(rng: np.random.Generator, fan_out: int, fan_in: int,
                  activation: str) -> DenseLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return DenseLayer(w, np.zeros(fan_out), activation)


def init_concept_predictor(spec: ModelSpec, d_in: int, k: int, seed: int
                           ) -> ConceptPredictor:
    rng = np.random.default_rng([seed, 0])
    dims = [d_in, *spec.hidden, k]
    layers = []
    for i, (m, q) in enumerate(zip(dims[:-1], dims[1:])):
        act = "tanh" if i < len(dims) - 2 else "identity"
        layers.append(_xavier_layer(rng, q, m, act))
    return ConceptPredictor(layers, spec.concept_link)


def init_label_predictor(spec: ModelSpec, k: int, d_out: int, seed: int
                         ) -> LabelPredictor:
    rng = np.random.default_rng([seed, 1])
    limit = np.sqrt(6.0 / (k + d_out))
    w = rng.uniform(-limit, limit, size=(d_out, k))
    b = np.zeros(d_out) if spec.label_bias else None
    return LabelPredictor(w, b)


def _descend(params: Array, grad_fn, loss_fn, config: TrainConfig
             ) -> tuple[Array, TrainInfo]:
    theta = params.copy()
    grad = grad_fn(theta)
    gnorm = float(np.linalg.norm(grad))
    it = 0
    while gnorm > config.grad_tol and it < config.max_iters:
        theta = theta - config.step_size * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(
                f"non-finite parameters at iteration {it}; reduce step_size")
        grad = grad_fn(theta)
        gnorm = float(np.linalg.norm(grad))
        if not np.isfinite(gnorm):
            raise DivergenceError(
                f"non-finite gradient at iteration {it}; reduce step_size")
        it += 1
    loss = loss_fn(theta)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite final loss; reduce step_size")
    return theta, TrainInfo(gnorm <= config.grad_tol, it, gnorm, float(loss))


def train_concept_stage(D: Dataset, spec: ModelSpec, config: TrainConfig,
                        cell_mask: Array | None = None
                        ) -> tuple[ConceptPredictor, TrainInfo]:
    """Fit the concept predictor on the dataset's concept annotations.

    ``cell_mask`` (n-by-k of 0/1) drops individual (row, concept) loss
    terms, which the retraining oracle uses to excise corrupted cells.
    """
    from .model import concept_loss  # local import avoids a cycle in docs builds

    g0 = init_concept_predictor(spec, D.d_in, D.k, config.seed)

    def grad_fn(theta: Array) -> Array:
        g = with_concept_params(g0, theta)
        return grad_concept_params(g, D, l2=config.l2_reg, cell_mask=cell_mask)

    def loss_fn(theta: Array) -> float:
        g = with_concept_params(g0, theta)
        return concept_loss(g, D, l2=config.l2_reg, cell_mask=cell_mask)

    theta, info = _descend(concept_params(g0), grad_fn, loss_fn, config)
    return with_concept_params(g0, theta), info


def train_label_stage(D: Dataset, g: ConceptPredictor, spec: ModelSpec,
                      config: TrainConfig) -> tuple[LabelPredictor, TrainInfo]:
    """Fit the linear label predictor on concepts produced by ``g``."""
    from .model import label_loss

    C = g.predict(D.inputs)
    f0 = init_label_predictor(spec, g.k, D.num_classes, config.seed)

    def grad_fn(theta: Array) -> Array:
        f = with_label_params(f0, theta)
        return grad_label_params_from_concepts(
            f, C, D.labels, loss_kind=spec.label_loss, l2=config.l2_reg)

    def loss_fn(theta: Array) -> float:
        f = with_label_params(f0, theta)
        return label_loss(f, C, D.labels, loss_kind=spec.label_loss,
                          l2=config.l2_reg)

    theta, info = _descend(label_params(f0), grad_fn, loss_fn, config)
    return with_label_params(f0, theta), info


def train_stage(which: str, D: Dataset, config: TrainConfig, spec: ModelSpec,
                g: ConceptPredictor | None = None,
                cell_mask: Array | None = None):
    """Train one stage; the label stage requires a trained concept predictor."""
    if which == "concept":
        return train_concept_stage(D, spec, config, cell_mask)
    if which == "label":
        if g is None:
            raise ConfigError("label stage needs a trained concept predictor")
        return train_label_stage(D, g, spec, config)
    raise ConfigError(f"unknown stage {which!r}")


@dataclass
class TrainedModel:
    g: ConceptPredictor
    f: LabelPredictor
    concept_info: TrainInfo
    label_info: TrainInfo


def train_two_stage(D: Dataset, spec: ModelSpec, config: TrainConfig,
                    cell_mask: Array | None = None) -> TrainedModel:
    g, g_info = train_concept_stage(D, spec, config, cell_mask)
    f, f_info = train_label_stage(D, g, spec, config)
    return TrainedModel(g, f, g_info, f_info)
