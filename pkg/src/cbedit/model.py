"""Two-stage concept model: data container, predictors, losses, gradients.

The model maps inputs to concepts through a small dense network g and
concepts to class logits through a linear map f.  Everything here is plain
float64 numpy, fully deterministic, and sized for dense linear algebra.

Loss conventions (used consistently by the curvature and editing modules):

* concept stage, ``sigmoid-bce`` link: per-(row, concept) binary
  cross-entropy on the logit, ``(1 - c) * s + softplus(-s)``;
* concept stage, ``mse`` link: ``0.5 * (s - c)**2`` on the raw output;
* label stage, ``softmax-ce``: ``logsumexp(z) - z[y]``;
* label stage, ``mse``: ``0.5 * ||z - onehot(y)||**2``.

Losses are *sums* over the included rows/concepts (``scale="mean"`` divides
by the number of included rows), plus an optional ridge term
``(l2 / 2) * ||params||^2``.  Gradient functions include the ridge gradient
``l2 * params`` whenever ``l2 > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, UnsupportedModelError

Array = np.ndarray

ACTIVATIONS = ("tanh", "identity")
CONCEPT_LINKS = ("sigmoid-bce", "mse")
LABEL_LOSSES = ("softmax-ce", "mse")


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Array) -> Array:
    return np.logaddexp(0.0, x)


def log_softmax(z: Array) -> Array:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: Array) -> Array:
    return np.exp(log_softmax(z))


def one_hot(labels: Array, num_classes: int) -> Array:
    eye = np.eye(num_classes, dtype=np.float64)
    return eye[np.asarray(labels, dtype=np.intp)]


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """n rows of (input vector, concept vector in [0,1]^k, class label)."""

    inputs: Array
    concepts: Array
    labels: Array
    num_classes: int
    names: list[str] | None = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.concepts = np.asarray(self.concepts, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.validate()

    def validate(self) -> None:
        if self.inputs.ndim != 2 or self.concepts.ndim != 2 or self.labels.ndim != 1:
            raise DimensionError("inputs/concepts must be 2-D, labels 1-D")
        n = self.inputs.shape[0]
        if self.concepts.shape[0] != n or self.labels.shape[0] != n:
            raise DimensionError("inputs, concepts and labels must share the row count")
        if n < 1 or self.k < 1:
            raise DimensionError("need at least one row and one concept")
        if self.num_classes < 2:
            raise DimensionError("need at least two classes")
        if not np.all(np.isfinite(self.inputs)) or not np.all(np.isfinite(self.concepts)):
            raise DimensionError("non-finite dataset entries")
        if self.concepts.min() < 0.0 or self.concepts.max() > 1.0:
            raise DimensionError("concept values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DimensionError("labels out of range")
        if self.names is not None and len(self.names) != self.k:
            raise DimensionError("names must list one entry per concept")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def k(self) -> int:
        return self.concepts.shape[1]

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        names = list(self.names) if self.names is not None else None
        return Dataset(self.inputs[rows], self.concepts[rows], self.labels[rows],
                       self.num_classes, names)

    def without_rows(self, rows: Sequence[int]) -> "Dataset":
        keep = np.setdiff1d(np.arange(self.n), np.asarray(rows, dtype=np.intp))
        return self.subset(keep)

    def without_concepts(self, concept_idx: Sequence[int]) -> "Dataset":
        keep = np.setdiff1d(np.arange(self.k), np.asarray(concept_idx, dtype=np.intp))
        names = [self.names[j] for j in keep] if self.names is not None else None
        return Dataset(self.inputs, self.concepts[:, keep], self.labels,
                       self.num_classes, names)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: Array
    bias: Array
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("layer weights must be 2-D, bias 1-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError("bias length must equal the layer fan-out")
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def _act(z: Array, kind: str) -> Array:
    return np.tanh(z) if kind == "tanh" else z


def _act_prime(z: Array, kind: str) -> Array:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class ConceptPredictor:
    """Dense network from input space to k concept outputs.

    The final layer always has identity activation; its raw outputs are the
    concept logits.  Under the ``sigmoid-bce`` link the predicted concepts
    are ``sigmoid(logits)``; under ``mse`` they are the logits themselves.
    ``frozen_rows`` marks final-layer rows pinned at zero by a concept
    removal edit; the corresponding concept *outputs* are forced to zero
    in :meth:`predict` so the linear label stage sees dead input slots,
    matching the deleted-column predictor exactly.
    """

    layers: list[DenseLayer]
    concept_link: str = "sigmoid-bce"
    frozen_rows: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("concept predictor needs at least one layer")
        if self.concept_link not in CONCEPT_LINKS:
            raise DimensionError(f"unknown concept link {self.concept_link!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.fan_in != prev.fan_out:
                raise DimensionError("layer dimensions do not chain")
        if self.layers[-1].activation != "identity":
            raise DimensionError("final concept layer must be identity (logits)")
        for layer in self.layers:
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise DimensionError("non-finite parameters")
        if self.frozen_rows is not None:
            if not set(self.frozen_rows) <= set(range(self.k)):
                raise DimensionError("frozen rows must index final-layer rows")

    @property
    def d_in(self) -> int:
        return self.layers[0].fan_in

    @property
    def k(self) -> int:
        return self.layers[-1].fan_out

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ConceptPredictor":
        return ConceptPredictor([l.copy() for l in self.layers], self.concept_link,
                                self.frozen_rows)

    def logits(self, X: Array) -> Array:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d_in:
            raise DimensionError(f"expected {self.d_in} input features, got {X.shape[1]}")
        a = X
        for layer in self.layers:
            a = _act(a @ layer.weights.T + layer.bias, layer.activation)
        return a

    def predict(self, X: Array) -> Array:
        """Predicted concepts: sigmoid of the logits under bce, raw under mse.

        Frozen (removed) rows produce exactly zero.
        """
        s = self.logits(X)
        out = sigmoid(s) if self.concept_link == "sigmoid-bce" else s
        if self.frozen_rows:
            out = out.copy()
            out[:, list(self.frozen_rows)] = 0.0
        return out


@dataclass
class LabelPredictor:
    """Linear map from concept space to class logits, with optional bias.

    The bias is treated as a homogeneous coordinate: products behave like
    ``[W b] @ [c; 1]``, so deleting concept columns never touches it.
    """

    weights: Array
    bias: Array | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionError("label weights must be 2-D")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise DimensionError("label bias length must equal the class count")
        arrays = [self.weights] + ([self.bias] if self.bias is not None else [])
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DimensionError("non-finite parameters")

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    def copy(self) -> "LabelPredictor":
        return LabelPredictor(self.weights.copy(),
                              None if self.bias is None else self.bias.copy())

    def logits(self, C: Array) -> Array:
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        if C.shape[1] != self.k:
            raise DimensionError(f"expected {self.k} concepts, got {C.shape[1]}")
        z = C @ self.weights.T
        if self.bias is not None:
            z = z + self.bias
        return z

    def predict(self, C: Array) -> Array:
        return np.argmax(self.logits(C), axis=1)

    def without_columns(self, concept_idx: Sequence[int]) -> "LabelPredictor":
        keep = np.setdiff1d(np.arange(self.k), np.asarray(concept_idx, dtype=np.intp))
        return LabelPredictor(self.weights[:, keep],
                              None if self.bias is None else self.bias.copy())


def forward_concepts(g: ConceptPredictor, x: Array) -> Array:
    """Concept prediction for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward_concepts expects a single input vector")
    return g.predict(x[None, :])[0]


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSegment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    """Row-major weights followed by bias, layer by layer."""

    segments: tuple[ParamSegment, ...]

    @property
    def size(self) -> int:
        last = self.segments[-1]
        return last.offset + last.size

    def segment(self, name: str) -> ParamSegment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)


def concept_layout(g: ConceptPredictor) -> ParamLayout:
    segs: list[ParamSegment] = []
    offset = 0
    for i, layer in enumerate(g.layers):
        segs.append(ParamSegment(f"layer{i}.weights", offset, layer.weights.shape))
        offset += layer.weights.size
        segs.append(ParamSegment(f"layer{i}.bias", offset, layer.bias.shape))
        offset += layer.bias.size
    return ParamLayout(tuple(segs))


def label_layout(f: LabelPredictor) -> ParamLayout:
    segs = [ParamSegment("weights", 0, f.weights.shape)]
    offset = f.weights.size
    if f.bias is not None:
        segs.append(ParamSegment("bias", offset, f.bias.shape))
    return ParamLayout(tuple(segs))


def concept_params(g: ConceptPredictor) -> Array:
    parts = []
    for layer in g.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts)


def with_concept_params(g: ConceptPredictor, vec: Array) -> ConceptPredictor:
    vec = np.asarray(vec, dtype=np.float64)
    layout = concept_layout(g)
    if vec.shape != (layout.size,):
        raise DimensionError(f"expected parameter vector of length {layout.size}")
    layers = []
    for i, layer in enumerate(g.layers):
        w_seg = layout.segment(f"layer{i}.weights")
        b_seg = layout.segment(f"layer{i}.bias")
        w = vec[w_seg.offset:w_seg.offset + w_seg.size].reshape(w_seg.shape)
        b = vec[b_seg.offset:b_seg.offset + b_seg.size]
        layers.append(DenseLayer(w.copy(), b.copy(), layer.activation))
    return ConceptPredictor(layers, g.concept_link, g.frozen_rows)


def label_params(f: LabelPredictor) -> Array:
    parts = [f.weights.ravel()]
    if f.bias is not None:
        parts.append(f.bias)
    return np.concatenate(parts)


def with_label_params(f: LabelPredictor, vec: Array) -> LabelPredictor:
    vec = np.asarray(vec, dtype=np.float64)
    layout = label_layout(f)
    if vec.shape != (layout.size,):
        raise DimensionError(f"expected parameter vector of length {layout.size}")
    w = vec[:f.weights.size].reshape(f.weights.shape).copy()
    b = vec[f.weights.size:].copy() if f.bias is not None else None
    return LabelPredictor(w, b)


def concept_param_count(g: ConceptPredictor) -> int:
    return concept_layout(g).size


def label_param_count(f: LabelPredictor) -> int:
    return label_layout(f).size


# ---------------------------------------------------------------------------
# Index-set handling
# ---------------------------------------------------------------------------


def _as_index_array(idx: Sequence[int] | None, size: int, what: str) -> Array:
    if idx is None:
        return np.arange(size, dtype=np.intp)
    arr = np.asarray(sorted(set(int(i) for i in idx)), dtype=np.intp)
    if arr.size and (arr[0] < 0 or arr[-1] >= size):
        raise DimensionError(f"{what} indices out of range")
    return arr


def _inclusion_mask(D: Dataset,
                    include_concepts: Sequence[int] | None,
                    include_rows: Sequence[int] | None,
                    cell_mask: Array | None) -> Array:
    """n-by-k 0/1 weights selecting which (row, concept) loss terms count."""
    mask = np.zeros((D.n, D.k))
    rows = _as_index_array(include_rows, D.n, "row")
    cols = _as_index_array(include_concepts, D.k, "concept")
    if rows.size and cols.size:
        mask[np.ix_(rows, cols)] = 1.0
    if cell_mask is not None:
        cell_mask = np.asarray(cell_mask, dtype=np.float64)
        if cell_mask.shape != (D.n, D.k):
            raise DimensionError("cell_mask must be n-by-k")
        mask = mask * cell_mask
    return mask


# ---------------------------------------------------------------------------
# Concept stage: forward cache, losses, gradients
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Per-layer activations (``acts[0]`` is the input batch) and pre-activations."""

    acts: list[Array]
    preacts: list[Array]

    @property
    def logits(self) -> Array:
        return self.preacts[-1]


def concept_forward_cache(g: ConceptPredictor, X: Array) -> ForwardCache:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != g.d_in:
        raise DimensionError(f"expected {g.d_in} input features, got {X.shape[1]}")
    acts = [X]
    preacts = []
    a = X
    for layer in g.layers:
        z = a @ layer.weights.T + layer.bias
        preacts.append(z)
        a = _act(z, layer.activation)
        acts.append(a)
    return ForwardCache(acts, preacts)


def concept_cell_losses(g: ConceptPredictor, D: Dataset) -> Array:
    """Unweighted per-(row, concept) loss matrix, no regularizer."""
    s = g.logits(D.inputs)
    c = D.concepts
    if g.concept_link == "sigmoid-bce":
        return (1.0 - c) * s + softplus(-s)
    return 0.5 * (s - c) ** 2


def concept_loss(g: ConceptPredictor, D: Dataset,
                 include_concepts: Sequence[int] | None = None,
                 include_rows: Sequence[int] | None = None,
                 *, l2: float = 0.0, scale: str = "sum",
                 cell_mask: Array | None = None) -> float:
    """Concept-stage loss summed over the included (row, concept) terms.

    ``scale="mean"`` divides the data term by the number of included rows
    (the regularizer is never scaled).  An empty row set returns just the
    regularizer.
    """
    mask = _inclusion_mask(D, include_concepts, include_rows, cell_mask)
    total = float((concept_cell_losses(g, D) * mask).sum())
    if scale == "mean":
        n_rows = int((mask.sum(axis=1) > 0).sum())
        total /= max(n_rows, 1)
    elif scale != "sum":
        raise DimensionError(f"unknown scale {scale!r}")
    if l2 > 0.0:
        vec = concept_params(g)
        total += 0.5 * l2 * float(vec @ vec)
    return total


def concept_output_grad(g: ConceptPredictor, D: Dataset,
                        include_concepts: Sequence[int] | None = None,
                        include_rows: Sequence[int] | None = None,
                        cell_mask: Array | None = None,
                        corrected: Array | None = None) -> Array:
    """d(loss)/d(logits), an n-by-k matrix, zero outside the included terms.

    ``corrected`` substitutes an alternative concept matrix (same shape) as
    the target, used when differencing gradients for an edit.
    """
    s = g.logits(D.inputs)
    c = D.concepts if corrected is None else np.asarray(corrected, dtype=np.float64)
    mask = _inclusion_mask(D, include_concepts, include_rows, cell_mask)
    if g.concept_link == "sigmoid-bce":
        dS = sigmoid(s) - c
    else:
        dS = s - c
    return dS * mask


def concept_backprop(g: ConceptPredictor, cache: ForwardCache, dS: Array
                     ) -> tuple[Array, list[tuple[Array, Array]]]:
    """Backpropagate output-logit gradients through the network.

    Returns the flat summed parameter gradient and, per layer, the pair
    ``(delta, a_prev)`` of per-sample pre-activation gradients (n, fan_out)
    and layer inputs (n, fan_in) from which per-sample parameter gradients
    are outer products.
    """
    per_layer: list[tuple[Array, Array]] = [None] * g.n_layers  # type: ignore
    delta = np.asarray(dS, dtype=np.float64)
    for idx in range(g.n_layers - 1, -1, -1):
        layer = g.layers[idx]
        per_layer[idx] = (delta, cache.acts[idx])
        if idx > 0:
            prev = g.layers[idx - 1]
            delta = (delta @ layer.weights) * _act_prime(cache.preacts[idx - 1],
                                                         prev.activation)
    parts = []
    for delta_l, a_prev in per_layer:
        parts.append((delta_l.T @ a_prev).ravel())
        parts.append(delta_l.sum(axis=0))
    return np.concatenate(parts), per_layer


def grad_concept_params(g: ConceptPredictor, D: Dataset,
                        include_concepts: Sequence[int] | None = None,
                        include_rows: Sequence[int] | None = None,
                        *, l2: float = 0.0, scale: str = "sum",
                        cell_mask: Array | None = None,
                        corrected: Array | None = None) -> Array:
    """Flat gradient of :func:`concept_loss` with respect to g's parameters."""
    cache = concept_forward_cache(g, D.inputs)
    dS = concept_output_grad(g, D, include_concepts, include_rows, cell_mask, corrected)
    if scale == "mean":
        mask = _inclusion_mask(D, include_concepts, include_rows, cell_mask)
        n_rows = int((mask.sum(axis=1) > 0).sum())
        dS = dS / max(n_rows, 1)
    elif scale != "sum":
        raise DimensionError(f"unknown scale {scale!r}")
    flat, _ = concept_backprop(g, cache, dS)
    if l2 > 0.0:
        flat = flat + l2 * concept_params(g)
    return flat


def concept_per_sample_grads(g: ConceptPredictor, D: Dataset,
                             include_concepts: Sequence[int] | None = None,
                             include_rows: Sequence[int] | None = None,
                             cell_mask: Array | None = None) -> Array:
    """n-by-P matrix of per-sample gradients of the per-sample summed loss.

    Rows outside ``include_rows`` are zero.  No regularizer term.
    """
    cache = concept_forward_cache(g, D.inputs)
    dS = concept_output_grad(g, D, include_concepts, include_rows, cell_mask)
    _, per_layer = concept_backprop(g, cache, dS)
    parts = []
    for delta_l, a_prev in per_layer:
        parts.append(np.einsum("no,ni->noi", delta_l, a_prev).reshape(D.n, -1))
        parts.append(delta_l)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# Label stage: losses and gradients
# ---------------------------------------------------------------------------


def label_row_losses(f: LabelPredictor, concept_batch: Array, labels: Array,
                     loss_kind: str = "softmax-ce") -> Array:
    z = f.logits(concept_batch)
    labels = np.asarray(labels, dtype=np.intp)
    if loss_kind == "softmax-ce":
        lse = np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) \
            + z.max(axis=1)
        return lse - z[np.arange(z.shape[0]), labels]
    if loss_kind == "mse":
        t = one_hot(labels, f.d_out)
        return 0.5 * ((z - t) ** 2).sum(axis=1)
    raise DimensionError(f"unknown label loss {loss_kind!r}")


def label_loss(f: LabelPredictor, concept_batch: Array, labels: Array,
               include_rows: Sequence[int] | None = None,
               *, loss_kind: str = "softmax-ce", l2: float = 0.0,
               scale: str = "sum") -> float:
    """Label-stage loss summed over the included rows plus optional ridge."""
    concept_batch = np.atleast_2d(np.asarray(concept_batch, dtype=np.float64))
    losses = label_row_losses(f, concept_batch, labels, loss_kind)
    rows = _as_index_array(include_rows, concept_batch.shape[0], "row")
    total = float(losses[rows].sum())
    if scale == "mean":
        total /= max(rows.size, 1)
    elif scale != "sum":
        raise DimensionError(f"unknown scale {scale!r}")
    if l2 > 0.0:
        vec = label_params(f)
        total += 0.5 * l2 * float(vec @ vec)
    return total


def label_output_grad(f: LabelPredictor, concept_batch: Array, labels: Array,
                      include_rows: Sequence[int] | None = None,
                      loss_kind: str = "softmax-ce") -> Array:
    """d(loss)/d(logits), n-by-d_out, zero outside the included rows."""
    z = f.logits(concept_batch)
    t = one_hot(labels, f.d_out)
    if loss_kind == "softmax-ce":
        dZ = softmax(z) - t
    elif loss_kind == "mse":
        dZ = z - t
    else:
        raise DimensionError(f"unknown label loss {loss_kind!r}")
    rows = _as_index_array(include_rows, z.shape[0], "row")
    keep = np.zeros((z.shape[0], 1))
    keep[rows] = 1.0
    return dZ * keep


def _label_grad_from_dZ(f: LabelPredictor, concept_batch: Array, dZ: Array) -> Array:
    gw = (dZ.T @ concept_batch).ravel()
    if f.bias is not None:
        return np.concatenate([gw, dZ.sum(axis=0)])
    return gw


def grad_label_params(f: LabelPredictor, g_like: ConceptPredictor, D: Dataset,
                      include_rows: Sequence[int] | None = None,
                      *, loss_kind: str = "softmax-ce", l2: float = 0.0,
                      scale: str = "sum") -> Array:
    """Flat gradient of the label loss, concepts produced by ``g_like``."""
    C = g_like.predict(D.inputs)
    return grad_label_params_from_concepts(f, C, D.labels, include_rows,
                                           loss_kind=loss_kind, l2=l2, scale=scale)


def grad_label_params_from_concepts(f: LabelPredictor, concept_batch: Array,
                                    labels: Array,
                                    include_rows: Sequence[int] | None = None,
                                    *, loss_kind: str = "softmax-ce",
                                    l2: float = 0.0, scale: str = "sum") -> Array:
    concept_batch = np.atleast_2d(np.asarray(concept_batch, dtype=np.float64))
    dZ = label_output_grad(f, concept_batch, labels, include_rows, loss_kind)
    if scale == "mean":
        rows = _as_index_array(include_rows, concept_batch.shape[0], "row")
        dZ = dZ / max(rows.size, 1)
    elif scale != "sum":
        raise DimensionError(f"unknown scale {scale!r}")
    flat = _label_grad_from_dZ(f, concept_batch, dZ)
    if l2 > 0.0:
        flat = flat + l2 * label_params(f)
    return flat


def label_per_sample_grads(f: LabelPredictor, concept_batch: Array, labels: Array,
                           include_rows: Sequence[int] | None = None,
                           loss_kind: str = "softmax-ce") -> Array:
    """n-by-P per-sample label gradients; excluded rows are zero."""
    concept_batch = np.atleast_2d(np.asarray(concept_batch, dtype=np.float64))
    dZ = label_output_grad(f, concept_batch, labels, include_rows, loss_kind)
    parts = [np.einsum("no,ni->noi", dZ, concept_batch).reshape(dZ.shape[0], -1)]
    if f.bias is not None:
        parts.append(dZ)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# Output-space Hessians (exact curvature for linear maps)
# ---------------------------------------------------------------------------


def concept_output_hessians(g: ConceptPredictor, D: Dataset,
                            include_concepts: Sequence[int] | None = None,
                            include_rows: Sequence[int] | None = None,
                            cell_mask: Array | None = None) -> Array:
    """Per-sample diagonal of d2(loss)/d(logits)2, an n-by-k matrix.

    The concept loss separates per concept, so the output Hessian is
    diagonal: ``sigmoid'(s)`` terms under bce, ones under mse, masked to
    the included terms.
    """
    s = g.logits(D.inputs)
    mask = _inclusion_mask(D, include_concepts, include_rows, cell_mask)
    if g.concept_link == "sigmoid-bce":
        p = sigmoid(s)
        return p * (1.0 - p) * mask
    return mask


def label_output_hessians(f: LabelPredictor, concept_batch: Array, labels: Array,
                          include_rows: Sequence[int] | None = None,
                          loss_kind: str = "softmax-ce") -> Array:
    """Per-sample d2(loss)/d(logits)2, an (n, d_out, d_out) stack."""
    z = f.logits(concept_batch)
    n, q = z.shape
    rows = _as_index_array(include_rows, n, "row")
    keep = np.zeros(n)
    keep[rows] = 1.0
    if loss_kind == "softmax-ce":
        p = softmax(z)
        H = -np.einsum("na,nb->nab", p, p)
        H[:, np.arange(q), np.arange(q)] += p
    elif loss_kind == "mse":
        H = np.broadcast_to(np.eye(q), (n, q, q)).copy()
    else:
        raise DimensionError(f"unknown label loss {loss_kind!r}")
    return H * keep[:, None, None]


def linear_map_hessian(inputs: Array, output_hessians: Array, has_bias: bool) -> Array:
    """Exact loss Hessian of a linear map ``z = W x (+ b)``.

    ``inputs`` is (n, m) and ``output_hessians`` an (n, q, q) stack of
    per-sample output-space Hessians.  The flat layout is row-major W then
    bias, matching the predictors' parameter vectors.
    """
    A = np.asarray(output_hessians, dtype=np.float64)
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n, q, _ = A.shape
    m = X.shape[1]
    H_ww = np.einsum("nab,nc,nd->acbd", A, X, X, optimize=True).reshape(q * m, q * m)
    if not has_bias:
        return H_ww
    H_wb = np.einsum("nab,nc->acb", A, X, optimize=True).reshape(q * m, q)
    H_bb = A.sum(axis=0)
    top = np.hstack([H_ww, H_wb])
    bottom = np.hstack([H_wb.T, H_bb])
    return np.vstack([top, bottom])


def is_linear_concept_predictor(g: ConceptPredictor) -> bool:
    return g.n_layers == 1


def require_linear_concept_predictor(g: ConceptPredictor, what: str) -> None:
    if not is_linear_concept_predictor(g):
        raise UnsupportedModelError(
            f"{what} requires a single-layer (linear) concept predictor")


# ---------------------------------------------------------------------------
# Column helpers (the linear-map projection identity)
# ---------------------------------------------------------------------------


def delete_columns(W: Array, idx: Sequence[int]) -> Array:
    keep = np.setdiff1d(np.arange(W.shape[1]), np.asarray(idx, dtype=np.intp))
    return np.asarray(W)[:, keep]


def delete_entries(c: Array, idx: Sequence[int]) -> Array:
    keep = np.setdiff1d(np.arange(len(c)), np.asarray(idx, dtype=np.intp))
    return np.asarray(c)[keep]


def zero_entries(c: Array, idx: Sequence[int]) -> Array:
    out = np.array(c, dtype=np.float64, copy=True)
    out[np.asarray(idx, dtype=np.intp)] = 0.0
    return out
