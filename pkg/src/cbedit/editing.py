"""Closed-form model edits: concept-label fixes, concept removal, data removal.

Every edit is a damped Newton step (or two, one per stage) computed from
the trained models and the dataset, leaving the originals untouched.  The
three levels share the same skeleton:

1. move the concept predictor toward the optimum of the edited
   concept-stage objective;
2. move the label predictor toward the optimum of the label-stage
   objective evaluated on the *edited* concept predictor's outputs.

Curvature comes from an exact dense backend (Hessian for convex
configurations, gradient-outer-product Gauss-Newton otherwise) or from
eigenvalue-corrected Kronecker factors.  Stage-2 curvature for the label
predictor is always exact: the map is one linear layer and the dense
solve is cheap.

For data removal, ``hessian_rows`` picks the row set behind the stage-1
and intermediate (A-step) solves: ``"remaining"`` uses the surviving rows,
which makes the edit an exact Newton step (and reproduces retraining
exactly on quadratic objectives), while ``"all"`` keeps the full-dataset
curvature of the classical influence-function update, whose stage-1
update is exactly additive over disjoint removal sets.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .curvature import (
    CurvatureOperator,
    build_exact,
    estimate_H_householder,
    estimate_H_ridge,
)
from .ekfac import KroneckerFactor, collect_factors, ekfac_ihvp
from .errors import ConfigError, DimensionError, NumericalError
from .model import (
    ConceptPredictor,
    Dataset,
    DenseLayer,
    LabelPredictor,
    concept_layout,
    concept_params,
    grad_concept_params,
    grad_label_params_from_concepts,
    label_params,
    with_concept_params,
    with_label_params,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# Edit requests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConceptLabelEdit:
    """Correct individual concept annotations: (row, concept, new value)."""

    pairs: tuple[tuple[int, int, float], ...]

    level = "concept_label"

    def validate(self, D: Dataset) -> None:
        seen = set()
        for i, j, val in self.pairs:
            if not (0 <= i < D.n and 0 <= j < D.k):
                raise DimensionError(f"pair ({i}, {j}) out of range")
            if not (0.0 <= val <= 1.0):
                raise DimensionError("corrected concept values must lie in [0, 1]")
            if (i, j) in seen:
                raise DimensionError(f"duplicate pair ({i}, {j})")
            seen.add((i, j))


@dataclass(frozen=True)
class ConceptRemoval:
    """Remove whole concepts (final-layer rows of g, columns of f)."""

    concepts: tuple[int, ...]

    level = "concept"

    def validate(self, D: Dataset) -> None:
        idx = set(self.concepts)
        if len(idx) != len(self.concepts):
            raise DimensionError("duplicate concept indices")
        if not idx <= set(range(D.k)):
            raise DimensionError("concept indices out of range")
        if len(idx) >= D.k:
            raise DimensionError("cannot remove every concept")


@dataclass(frozen=True)
class DataRemoval:
    """Remove whole training rows."""

    rows: tuple[int, ...]

    level = "data"

    def validate(self, D: Dataset) -> None:
        idx = set(self.rows)
        if len(idx) != len(self.rows):
            raise DimensionError("duplicate row indices")
        if not idx <= set(range(D.n)):
            raise DimensionError("row indices out of range")
        if len(idx) >= D.n:
            raise DimensionError("cannot remove every row")


EditRequest = Union[ConceptLabelEdit, ConceptRemoval, DataRemoval]


def request_to_json(req: EditRequest) -> str:
    if isinstance(req, ConceptLabelEdit):
        payload = {"level": "concept_label",
                   "pairs": [[int(i), int(j), float(v)] for i, j, v in req.pairs]}
    elif isinstance(req, ConceptRemoval):
        payload = {"level": "concept", "concepts": [int(j) for j in req.concepts]}
    elif isinstance(req, DataRemoval):
        payload = {"level": "data", "rows": [int(i) for i in req.rows]}
    else:
        raise ConfigError(f"unknown edit request type {type(req)!r}")
    return json.dumps(payload, sort_keys=True)


def request_from_json(text: str) -> EditRequest:
    try:
        payload = json.loads(text)
        level = payload["level"]
        if level == "concept_label":
            return ConceptLabelEdit(tuple((int(i), int(j), float(v))
                                          for i, j, v in payload["pairs"]))
        if level == "concept":
            return ConceptRemoval(tuple(int(j) for j in payload["concepts"]))
        if level == "data":
            return DataRemoval(tuple(int(i) for i in payload["rows"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed edit request: {exc}") from exc
    raise ConfigError(f"unknown edit level {level!r}")


def apply_request_to_dataset(D: Dataset, req: EditRequest) -> Dataset:
    """The dataset the retraining oracle should train on."""
    req.validate(D)
    if isinstance(req, ConceptLabelEdit):
        concepts = D.concepts.copy()
        for i, j, val in req.pairs:
            concepts[i, j] = val
        return Dataset(D.inputs.copy(), concepts, D.labels.copy(), D.num_classes,
                       list(D.names) if D.names is not None else None)
    if isinstance(req, ConceptRemoval):
        return D.without_concepts(list(req.concepts))
    if isinstance(req, DataRemoval):
        return D.without_rows(list(req.rows))
    raise ConfigError(f"unknown edit request type {type(req)!r}")


# ---------------------------------------------------------------------------
# Backend configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditBackend:
    """How the edits obtain curvature.

    ``name``: ``"exact"`` (dense) or ``"ekfac"`` (Kronecker factors) for
    the concept stage; the label stage is always dense.
    ``curvature_mode``: dense flavor for the concept stage; ``"auto"``
    picks the exact Hessian for a linear concept predictor and
    Gauss-Newton otherwise.
    ``l2``: the ridge coefficient of the *training objective*; it enters
    the edits' gradient terms and the curvature diagonal.  Pass the value
    training used, or the edits target a different objective than the
    retraining reference.
    ``extra_damping``: additional concept-stage curvature diagonal beyond
    ``l2``, for stabilizing Gauss-Newton steps on non-convex models.
    ``label_extra_damping``: the label stage's counterpart; it defaults to
    zero because the label stage is convex with an exact Hessian, where
    the undamped (beyond ``l2``) Newton step is the right one.  Both must
    be zero for the edits to reproduce retraining exactly on quadratic
    objectives.
    ``ekfac_damping``: overrides the damping for EK-FAC blocks; ``None``
    falls back to ``l2 + extra_damping`` if positive, else to 1% of each
    block's mean corrected eigenvalue.
    """

    name: str = "exact"
    curvature_mode: str = "auto"
    l2: float = 0.0
    extra_damping: float = 0.0
    label_extra_damping: float = 0.0
    hessian_rows: str = "remaining"
    h_tilde_mode: str = "recompute"
    ridge_alpha: float = 1e-6
    ekfac_damping: float | None = None
    dense_cap: int = 2000

    @property
    def damping(self) -> float:
        """Concept-stage curvature diagonal."""
        return self.l2 + self.extra_damping

    @property
    def label_damping(self) -> float:
        """Label-stage curvature diagonal."""
        return self.l2 + self.label_extra_damping

    def __post_init__(self) -> None:
        if self.name not in ("exact", "ekfac"):
            raise ConfigError(f"unknown backend {self.name!r}")
        if self.curvature_mode not in ("auto", "hessian", "gauss-newton"):
            raise ConfigError(f"unknown curvature mode {self.curvature_mode!r}")
        if self.hessian_rows not in ("remaining", "all"):
            raise ConfigError(f"unknown hessian_rows {self.hessian_rows!r}")
        if self.h_tilde_mode not in ("recompute", "householder", "ridge"):
            raise ConfigError(f"unknown h_tilde_mode {self.h_tilde_mode!r}")
        if min(self.l2, self.extra_damping, self.label_extra_damping) < 0:
            raise ConfigError("l2 and damping values must be nonnegative")
        if self.ridge_alpha <= 0:
            raise ConfigError("ridge_alpha must be positive")


class _EkfacSolver:
    """Adapter giving EK-FAC factors the dense operator's solve interface.

    Factors carry mean-scaled statistics; the edit formulas are sum-scaled,
    so eigenvalues are multiplied by each factor's sample count.
    """

    def __init__(self, factors: list[KroneckerFactor], damping: float,
                 fallback: float | None):
        self.factors = factors
        lams = []
        for fa in factors:
            lam = damping
            if fallback is not None:
                lam = fallback
            if lam <= 0.0:
                lam = 0.01 * fa.n_samples * float(fa.lam_corrected.mean())
            lams.append(lam)
        self.lams = lams
        self.scales = [float(fa.n_samples) for fa in factors]

    def solve(self, v: Array) -> Array:
        return ekfac_ihvp(self.factors, v, self.lams, self.scales)


def _concept_mode(backend: EditBackend, g: ConceptPredictor) -> str:
    if backend.curvature_mode != "auto":
        return backend.curvature_mode
    return "hessian" if g.n_layers == 1 else "gauss-newton"


def _concept_solver(g: ConceptPredictor, D: Dataset, backend: EditBackend,
                    include_concepts: Sequence[int] | None = None,
                    include_rows: Sequence[int] | None = None,
                    coord_subset: Array | None = None,
                    final_rows: Sequence[int] | None = None):
    if backend.name == "ekfac":
        factors = collect_factors(g, D, include_concepts, include_rows,
                                  final_rows=final_rows)
        return _EkfacSolver(factors, backend.damping, backend.ekfac_damping)
    return build_exact("concept-stage", g, None, D,
                       include_concepts=include_concepts,
                       include_rows=include_rows,
                       damping=backend.damping,
                       mode=_concept_mode(backend, g),
                       coord_subset=coord_subset,
                       dense_cap=backend.dense_cap)


def _label_operator(f: LabelPredictor, concept_batch: Array, D: Dataset,
                    backend: EditBackend, label_loss: str,
                    include_rows: Sequence[int] | None = None) -> CurvatureOperator:
    return build_exact("label-stage", None, f, D,
                       include_rows=include_rows,
                       damping=backend.label_damping,
                       mode="hessian",
                       label_loss=label_loss,
                       concept_batch=concept_batch,
                       dense_cap=backend.dense_cap)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EditReport:
    level: str
    backend: str
    curvature_mode: str
    stage1_update_norm: float = 0.0
    stage2_update_norm: float = 0.0
    stage1_seconds: float = 0.0
    stage2_seconds: float = 0.0
    h_tilde_mode: str | None = None
    a_norm: float | None = None
    b_norm: float | None = None
    zero_row_indices: tuple[int, ...] | None = None
    stage1_full_space: ConceptPredictor | None = None
    stage2_full_space: LabelPredictor | None = None

    def to_json(self) -> str:
        payload = {
            "level": self.level,
            "backend": self.backend,
            "curvature_mode": self.curvature_mode,
            "stage1_update_norm": self.stage1_update_norm,
            "stage2_update_norm": self.stage2_update_norm,
            "stage1_seconds": self.stage1_seconds,
            "stage2_seconds": self.stage2_seconds,
            "h_tilde_mode": self.h_tilde_mode,
            "a_norm": self.a_norm,
            "b_norm": self.b_norm,
            "zero_row_indices": (list(self.zero_row_indices)
                                 if self.zero_row_indices is not None else None),
        }
        return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# Concept-label level
# ---------------------------------------------------------------------------


def edit_concept_labels(g: ConceptPredictor, f: LabelPredictor, D: Dataset,
                        req: ConceptLabelEdit, backend: EditBackend,
                        label_loss: str = "softmax-ce"
                        ) -> tuple[ConceptPredictor, LabelPredictor, EditReport]:
    """Two-stage closed-form correction of individual concept annotations.

    Stage 1 subtracts the damped-inverse-curvature image of the gradient
    difference between corrected and original annotations over the edited
    pairs.  Stage 2 then moves the label predictor against the concepts
    the edited stage-1 model produces.  Pairs whose corrected value equals
    the original contribute an exactly zero update.
    """
    req.validate(D)
    report = EditReport("concept_label", backend.name, _concept_mode(backend, g))
    if not req.pairs:
        return g.copy(), f.copy(), report

    t0 = time.perf_counter()
    cell_mask = np.zeros((D.n, D.k))
    corrected = D.concepts.copy()
    for i, j, val in req.pairs:
        cell_mask[i, j] = 1.0
        corrected[i, j] = val
    grad_new = grad_concept_params(g, D, cell_mask=cell_mask, corrected=corrected)
    grad_old = grad_concept_params(g, D, cell_mask=cell_mask)
    diff = grad_new - grad_old
    # Curvature of the corrected objective.  Exact Hessians are
    # target-independent for both links, so this only affects the
    # gradient-covariance backends, where the corrected cells' (large)
    # gradients must appear or the solve amplifies exactly the directions
    # the update moves in.
    D_fixed = apply_request_to_dataset(D, req)
    solver = _concept_solver(g, D_fixed, backend)
    step = solver.solve(diff)
    g_edit = with_concept_params(g, concept_params(g) - step)
    report.stage1_update_norm = float(np.linalg.norm(step))
    report.stage1_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    C_old = g.predict(D.inputs)
    C_new = g_edit.predict(D.inputs)
    v = (grad_label_params_from_concepts(f, C_new, D.labels, loss_kind=label_loss)
         - grad_label_params_from_concepts(f, C_old, D.labels, loss_kind=label_loss))
    op_f = _label_operator(f, C_new, D, backend, label_loss)
    step_f = op_f.solve(v)
    f_edit = with_label_params(f, label_params(f) - step_f)
    report.stage2_update_norm = float(np.linalg.norm(step_f))
    report.stage2_seconds = time.perf_counter() - t1
    return g_edit, f_edit, report


# ---------------------------------------------------------------------------
# Concept level
# ---------------------------------------------------------------------------


def final_row_coords(g: ConceptPredictor, rows: Sequence[int]) -> Array:
    """Flat parameter indices of the given final-layer rows (weights + bias)."""
    layout = concept_layout(g)
    last = g.n_layers - 1
    w_seg = layout.segment(f"layer{last}.weights")
    b_seg = layout.segment(f"layer{last}.bias")
    fan_in = g.layers[last].fan_in
    coords = []
    for r in rows:
        start = w_seg.offset + r * fan_in
        coords.extend(range(start, start + fan_in))
        coords.append(b_seg.offset + r)
    return np.asarray(sorted(coords), dtype=np.intp)


def _drop_final_rows(g: ConceptPredictor, rows: Sequence[int]) -> ConceptPredictor:
    keep = np.setdiff1d(np.arange(g.k), np.asarray(rows, dtype=np.intp))
    last = g.layers[-1]
    reduced = DenseLayer(last.weights[keep].copy(), last.bias[keep].copy(),
                         last.activation)
    return ConceptPredictor([l.copy() for l in g.layers[:-1]] + [reduced],
                            g.concept_link)


def edit_remove_concepts(g: ConceptPredictor, f: LabelPredictor, D: Dataset,
                         req: ConceptRemoval, backend: EditBackend,
                         label_loss: str = "softmax-ce"
                         ) -> tuple[ConceptPredictor, LabelPredictor, EditReport]:
    """Remove whole concepts from both stages.

    Stage 1 takes a Newton step on the remaining-concept loss restricted
    to the subspace where the removed final-layer rows are zero: those
    rows' parameters are excluded from the solve and then pinned at
    exactly zero, after which the rows are dropped to produce a predictor
    with ``k - |M|`` outputs.  Stage 2 edits the label predictor against
    the zero-slot concepts and deletes the corresponding columns; both
    orderings agree because zeroed input slots of a linear map contribute
    nothing.
    """
    req.validate(D)
    if not req.concepts:
        raise DimensionError("concept removal needs a nonempty index set")
    M = sorted(set(int(j) for j in req.concepts))
    keep = np.setdiff1d(np.arange(D.k), np.asarray(M, dtype=np.intp))
    report = EditReport("concept", backend.name, _concept_mode(backend, g),
                        zero_row_indices=tuple(M))

    t0 = time.perf_counter()
    theta = concept_params(g)
    frozen_coords = final_row_coords(g, M)
    free_coords = np.setdiff1d(np.arange(theta.size), frozen_coords)
    # Gradient of the remaining-concept objective (regularizer included via
    # the backend damping's companion l2 term) at the original parameters.
    v_full = grad_concept_params(g, D, include_concepts=keep, l2=backend.l2)
    if backend.name == "ekfac":
        solver = _concept_solver(g, D, backend, include_concepts=keep,
                                 final_rows=keep)
        masked = v_full.copy()
        masked[frozen_coords] = 0.0
        step_full = solver.solve(masked)
    else:
        op = _concept_solver(g, D, backend, include_concepts=keep,
                             coord_subset=free_coords)
        step_full = np.zeros_like(theta)
        step_full[free_coords] = op.solve(v_full[free_coords])
    theta_star = theta - step_full
    theta_star[frozen_coords] = 0.0
    g_star = with_concept_params(g, theta_star)
    g_star.frozen_rows = tuple(M)
    report.stage1_update_norm = float(np.linalg.norm(theta_star - theta))
    report.stage1_full_space = g_star
    report.stage1_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    C_star = g_star.predict(D.inputs)
    phi = label_params(f)
    v_f = grad_label_params_from_concepts(f, C_star, D.labels,
                                          loss_kind=label_loss, l2=backend.l2)
    op_f = _label_operator(f, C_star, D, backend, label_loss)
    step_f = op_f.solve(v_f)
    f_zero = with_label_params(f, phi - step_f)
    report.stage2_full_space = f_zero
    f_edit = f_zero.without_columns(M)
    report.stage2_update_norm = float(np.linalg.norm(step_f))
    report.stage2_seconds = time.perf_counter() - t1

    g_edit = _drop_final_rows(g_star, M)
    return g_edit, f_edit, report


# ---------------------------------------------------------------------------
# Data level
# ---------------------------------------------------------------------------


def edit_remove_data(g: ConceptPredictor, f: LabelPredictor, D: Dataset,
                     req: DataRemoval, backend: EditBackend,
                     label_loss: str = "softmax-ce"
                     ) -> tuple[ConceptPredictor, LabelPredictor, EditReport]:
    """Remove whole training rows from both stages.

    Stage 1 adds the damped-inverse-curvature image of the removed rows'
    summed concept-stage gradients.  Stage 2 applies two corrections: the
    intermediate step A moves the label predictor to the remaining-row
    optimum at the old concepts, and B accounts for the concept
    predictor's own shift.  The curvature behind B is either recomputed at
    the intermediate predictor over the remaining rows, or reconstructed
    from the single pair (removed-gradient, curvature @ removed-gradient)
    by a scaled Householder reflection or a ridge least-squares estimate.
    """
    req.validate(D)
    report = EditReport("data", backend.name, _concept_mode(backend, g),
                        h_tilde_mode=backend.h_tilde_mode)
    if not req.rows:
        return g.copy(), f.copy(), report

    G = sorted(set(int(i) for i in req.rows))
    remaining = np.setdiff1d(np.arange(D.n), np.asarray(G, dtype=np.intp))
    stage_rows = remaining if backend.hessian_rows == "remaining" else None

    t0 = time.perf_counter()
    theta = concept_params(g)
    removed_grad = grad_concept_params(g, D, include_rows=G)
    solver = _concept_solver(g, D, backend, include_rows=stage_rows)
    step = solver.solve(removed_grad)
    g_edit = with_concept_params(g, theta + step)
    report.stage1_update_norm = float(np.linalg.norm(step))
    report.stage1_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    C_old = g.predict(D.inputs)
    phi = label_params(f)

    # A: Newton step toward the remaining-row optimum at the old concepts.
    v_a = grad_label_params_from_concepts(f, C_old, D.labels, include_rows=remaining,
                                          loss_kind=label_loss, l2=backend.l2)
    op_a = _label_operator(f, C_old, D, backend, label_loss,
                           include_rows=stage_rows)
    a_vec = -op_a.solve(v_a)
    f_mid = with_label_params(f, phi + a_vec)

    # B: correct for the concept predictor's shift.
    C_new = g_edit.predict(D.inputs)
    bracket = (grad_label_params_from_concepts(f_mid, C_new, D.labels,
                                               include_rows=remaining,
                                               loss_kind=label_loss)
               - grad_label_params_from_concepts(f_mid, C_old, D.labels,
                                                 include_rows=remaining,
                                                 loss_kind=label_loss))
    if backend.h_tilde_mode == "recompute":
        op_b = _label_operator(f_mid, C_new, D, backend, label_loss,
                               include_rows=remaining)
        b_vec = -op_b.solve(bracket)
    else:
        u = grad_label_params_from_concepts(f, C_old, D.labels, include_rows=G,
                                            loss_kind=label_loss)
        if float(np.linalg.norm(u)) == 0.0:
            raise NumericalError(
                "estimation modes need a nonzero removed-set gradient")
        op_full = _label_operator(f, C_old, D, backend, label_loss)
        w = op_full.matvec(u)
        if backend.h_tilde_mode == "householder":
            estimate = estimate_H_householder(u, w)
            b_vec = -estimate.solve(bracket)
        else:
            # The rank-one ridge estimate carries curvature information only
            # along u; complete it with a scaled identity at its own
            # curvature scale |w|/|u| so the solve does not amplify the
            # orthogonal complement by 1/damping.
            estimate = estimate_H_ridge(u, w, backend.ridge_alpha)
            scale = float(np.linalg.norm(w) / np.linalg.norm(u))
            b_vec = -estimate.solve(bracket, damping=scale)

    f_edit = with_label_params(f, phi + a_vec + b_vec)
    report.a_norm = float(np.linalg.norm(a_vec))
    report.b_norm = float(np.linalg.norm(b_vec))
    report.stage2_update_norm = float(np.linalg.norm(a_vec + b_vec))
    report.stage2_seconds = time.perf_counter() - t1
    return g_edit, f_edit, report


def edit(g: ConceptPredictor, f: LabelPredictor, D: Dataset, req: EditRequest,
         backend: EditBackend, label_loss: str = "softmax-ce"
         ) -> tuple[ConceptPredictor, LabelPredictor, EditReport]:
    """Dispatch an edit request to its level's procedure."""
    if isinstance(req, ConceptLabelEdit):
        return edit_concept_labels(g, f, D, req, backend, label_loss)
    if isinstance(req, ConceptRemoval):
        return edit_remove_concepts(g, f, D, req, backend, label_loss)
    if isinstance(req, DataRemoval):
        return edit_remove_data(g, f, D, req, backend, label_loss)
    raise ConfigError(f"unknown edit request type {type(req)!r}")


# ---------------------------------------------------------------------------
# Concept importance
# ---------------------------------------------------------------------------


def concept_importance(g: ConceptPredictor, f: LabelPredictor, D: Dataset,
                       backend: EditBackend, metric: str = "param-norm",
                       eval_data: Dataset | None = None,
                       label_loss: str = "softmax-ce"
                       ) -> list[tuple[int, float]]:
    """Rank concepts by the impact of removing each one.

    ``param-norm`` scores a concept by the parameter movement its removal
    induces across both stages; ``f1-delta`` scores it by the macro-F1
    drop of the edited model on ``eval_data``.  Returns (concept, score)
    pairs in descending score order, ties broken by ascending index.
    """
    from .oracle import evaluate_pair  # local import, oracle depends on editing

    if metric not in ("param-norm", "f1-delta"):
        raise ConfigError(f"unknown importance metric {metric!r}")
    if metric == "f1-delta":
        if eval_data is None:
            raise ConfigError("f1-delta ranking needs an evaluation split")
        base_f1 = evaluate_pair(g, f, eval_data)["macro_f1"]

    scores = []
    for j in range(D.k):
        g_j, f_j, report = edit_remove_concepts(g, f, D, ConceptRemoval((j,)),
                                                backend, label_loss)
        if metric == "param-norm":
            score = float(np.hypot(report.stage1_update_norm,
                                   report.stage2_update_norm))
        else:
            eval_j = eval_data.without_concepts([j])
            score = base_f1 - evaluate_pair(g_j, f_j, eval_j)["macro_f1"]
        scores.append((j, score))
    return sorted(scores, key=lambda item: (-item[1], item[0]))
