"""Closed-form error bounds for the concept-stage edits (convex regime).

For a convex concept stage (single linear layer) the distance between the
closed-form edit and true retraining is bounded by

    C_H^- * (C' * m)^2 / (2 * (sigma'_min + delta)^3)
      + |(2 delta + sigma_min + sigma'_min)
         / ((delta + sigma'_min) * (delta + sigma_min))| * C' * m

where C_H^- is a cardinality-scaled Hessian-Lipschitz constant of the
per-term loss, C' the gradient norm of the removed loss part at the
trained parameters, sigma_min / sigma'_min the smallest eigenvalues of
the full and remaining unregularized Hessians, and m the edit cardinality
(1 for the concept-label level, whose C' already covers the whole removed
part).  The ridge strength delta appears once, in the bound formula; the
sigmas are taken from the unregularized Hessians.

The bounds target the *removal* form of each edit: dropping annotation
terms, concepts, or rows.  :func:`remove_concept_label_terms_stage1`
provides that removal-form concept-label edit (the editing module's
concept-label operation corrects annotations instead of dropping them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import build_exact
from .editing import ConceptLabelEdit, ConceptRemoval, DataRemoval, EditRequest
from .errors import ConfigError
from .model import (
    ConceptPredictor,
    Dataset,
    concept_params,
    grad_concept_params,
    require_linear_concept_predictor,
    with_concept_params,
)

# Largest magnitude of the second derivative of the sigmoid, attained at
# sigmoid(s) = (3 +/- sqrt(3)) / 6.
SIGMOID_SECOND_DERIV_SUP = 1.0 / (6.0 * np.sqrt(3.0))

LEVELS = ("concept_label", "concept", "data")


@dataclass(frozen=True)
class BoundInputs:
    """Everything the closed-form bound consumes.

    ``c_h_minus`` is the cardinality-scaled Hessian-Lipschitz constant
    ((n k + |S_e|), (k + |M|) or (n + |G|)) times the per-term constant
    ``c_h``; ``cardinality`` multiplies C' for the concept and data levels.
    """

    level: str
    c_h: float
    c_h_minus: float
    c_grad: float
    sigma_min: float
    sigma_min_removed: float
    delta: float
    cardinality: int

    def validate(self) -> None:
        if self.level not in LEVELS:
            raise ConfigError(f"unknown bound level {self.level!r}")
        values = (self.c_h, self.c_h_minus, self.c_grad, self.sigma_min,
                  self.sigma_min_removed, self.delta)
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ConfigError("bound inputs must be finite and nonnegative")
        if self.delta <= 0:
            raise ConfigError("the bound requires delta > 0")
        if self.cardinality < 0:
            raise ConfigError("cardinality must be nonnegative")


def error_bound(inputs: BoundInputs) -> float:
    """Evaluate the level-appropriate bound; decreasing in delta."""
    inputs.validate()
    mult = inputs.cardinality if inputs.level in ("concept", "data") else 1
    removed = inputs.c_grad * mult
    d, s, sr = inputs.delta, inputs.sigma_min, inputs.sigma_min_removed
    term1 = inputs.c_h_minus * removed ** 2 / (2.0 * (sr + d) ** 3)
    term2 = abs((2.0 * d + s + sr) / ((d + sr) * (d + s))) * removed
    return float(term1 + term2)


def _hessian_min_eig(g: ConceptPredictor, D: Dataset, *,
                     include_concepts=None, include_rows=None, cell_mask=None,
                     coord_subset=None) -> float:
    op = build_exact("concept-stage", g, None, D,
                     include_concepts=include_concepts,
                     include_rows=include_rows,
                     cell_mask=cell_mask,
                     coord_subset=coord_subset,
                     damping=0.0, mode="hessian")
    return float(max(np.linalg.eigvalsh(op.matrix).min(), 0.0))


def _per_row_cubed_norms(D: Dataset) -> np.ndarray:
    # Homogeneous inputs: the bias coordinate contributes to the Lipschitz
    # constant exactly like a constant-one feature.
    sq = (D.inputs ** 2).sum(axis=1) + 1.0
    return sq ** 1.5


def _exclusion_cell_mask(D: Dataset, pairs) -> np.ndarray:
    mask = np.ones((D.n, D.k))
    for i, j, _ in pairs:
        mask[i, j] = 0.0
    return mask


def _pair_cell_mask(D: Dataset, pairs) -> np.ndarray:
    mask = np.zeros((D.n, D.k))
    for i, j, _ in pairs:
        mask[i, j] = 1.0
    return mask


def estimate_bound_inputs(D: Dataset, g: ConceptPredictor, req: EditRequest,
                          delta: float) -> BoundInputs:
    """Measure the bound's inputs on a concrete convex instance.

    Requires a single-layer concept predictor.  The Hessian-Lipschitz
    constant is analytic: zero for the mse link, and for the logistic link
    ``sup|sigmoid''| * max_i |x_i|^3`` per loss term (the concept level
    sums over rows because its per-term unit is a whole concept's loss).
    Smallest eigenvalues come from dense eigensolves of the unregularized
    Hessians; the concept level takes the remaining-term eigenvalue over
    the free parameter subspace the edit actually moves in.
    """
    require_linear_concept_predictor(g, "bound estimation")
    req.validate(D)
    if delta <= 0:
        raise ConfigError("the bound requires delta > 0")

    cubed = _per_row_cubed_norms(D)
    logistic = g.concept_link == "sigmoid-bce"
    sigma_min = _hessian_min_eig(g, D)

    if isinstance(req, ConceptLabelEdit):
        c_h = SIGMOID_SECOND_DERIV_SUP * float(cubed.max()) if logistic else 0.0
        card = len(req.pairs)
        c_grad = float(np.linalg.norm(
            grad_concept_params(g, D, cell_mask=_pair_cell_mask(D, req.pairs))))
        sigma_removed = _hessian_min_eig(
            g, D, cell_mask=_exclusion_cell_mask(D, req.pairs))
        scale = D.n * D.k + card
        return BoundInputs("concept_label", c_h, scale * c_h, c_grad,
                           sigma_min, sigma_removed, delta, card)

    if isinstance(req, ConceptRemoval):
        c_h = SIGMOID_SECOND_DERIV_SUP * float(cubed.sum()) if logistic else 0.0
        M = sorted(req.concepts)
        keep = np.setdiff1d(np.arange(D.k), M)
        c_grad = max(
            (float(np.linalg.norm(grad_concept_params(g, D, include_concepts=[j])))
             for j in M), default=0.0)
        from .editing import final_row_coords

        frozen = final_row_coords(g, M)
        free = np.setdiff1d(np.arange(concept_params(g).size), frozen)
        sigma_removed = _hessian_min_eig(g, D, include_concepts=keep,
                                         coord_subset=free)
        scale = D.k + len(M)
        return BoundInputs("concept", c_h, scale * c_h, c_grad,
                           sigma_min, sigma_removed, delta, len(M))

    if isinstance(req, DataRemoval):
        c_h = SIGMOID_SECOND_DERIV_SUP * float(cubed.max()) if logistic else 0.0
        G = sorted(req.rows)
        remaining = np.setdiff1d(np.arange(D.n), G)
        c_grad = float(np.linalg.norm(grad_concept_params(g, D, include_rows=G)))
        sigma_removed = _hessian_min_eig(g, D, include_rows=remaining)
        scale = D.n + len(G)
        return BoundInputs("data", c_h, scale * c_h, c_grad,
                           sigma_min, sigma_removed, delta, len(G))

    raise ConfigError(f"unknown edit request type {type(req)!r}")


def remove_concept_label_terms_stage1(g: ConceptPredictor, D: Dataset,
                                      req: ConceptLabelEdit, delta: float,
                                      mode: str = "hessian") -> ConceptPredictor:
    """Concept-stage edit that *drops* the annotation terms in ``req``.

    This is the removal form the concept-label bound describes: the
    full-data damped curvature applied to the removed terms' summed
    gradient, added to the trained parameters.  The retraining reference
    minimizes the same objective with those (row, concept) cells excluded
    (train with the matching cell mask).
    """
    req.validate(D)
    removed_grad = grad_concept_params(g, D, cell_mask=_pair_cell_mask(D, req.pairs))
    op = build_exact("concept-stage", g, None, D, damping=delta, mode=mode)
    return with_concept_params(g, concept_params(g) + op.solve(removed_grad))
