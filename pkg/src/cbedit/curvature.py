"""Exact curvature operators and damped inverse-Hessian-vector products.

A :class:`CurvatureOperator` holds a dense symmetric curvature matrix H
(exact Hessian or gradient-outer-product Gauss-Newton) together with a
damping value, and applies ``(H + damping * I)^{-1} v`` through a cached
Cholesky factorization.  Exact Hessian mode is limited to the convex
configurations (linear concept predictor, or the label stage); deeper
concept networks must use Gauss-Newton mode.

Also here: the two single-equation estimators that reconstruct a linear
operator A from one known pair ``A u = w`` (a scaled Householder
reflection, and a Frobenius-ridge least-squares solution).  They are used
by the accelerated data-level edit to stand in for a recomputed
label-stage curvature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    NotPositiveDefiniteError,
    NumericalError,
    StaleOperatorError,
    UnsupportedModelError,
)
from .model import (
    ConceptPredictor,
    Dataset,
    LabelPredictor,
    concept_output_hessians,
    concept_param_count,
    concept_params,
    concept_per_sample_grads,
    is_linear_concept_predictor,
    label_output_hessians,
    label_param_count,
    label_params,
    label_per_sample_grads,
    linear_map_hessian,
)

Array = np.ndarray

DEFAULT_DENSE_CAP = 2000


def params_fingerprint(vec: Array) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class CurvatureOperator:
    """Damped SPD solve handle for one stage's curvature.

    ``matrix`` is the *undamped* curvature; ``solve`` applies
    ``(matrix + damping * I)^{-1}`` and ``matvec`` the forward product.
    The operator remembers a fingerprint of the parameters it was built
    at and refuses to solve if the subject model has since changed.
    """

    kind: str                      # "exact-hessian" | "gauss-newton" | "ekfac"
    subject: str                   # "concept-stage" | "label-stage"
    damping: float
    matrix: Array
    fingerprint: str
    _chol: Array | None = None

    def __post_init__(self) -> None:
        if self.damping < 0:
            raise DimensionError("damping must be nonnegative")
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        damped = self.matrix + self.damping * np.eye(self.matrix.shape[0])
        try:
            self._chol = scipy.linalg.cholesky(damped, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                f"damped {self.kind} curvature is not positive definite "
                f"(damping={self.damping}); raise the damping or use "
                "gauss-newton mode") from exc

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def check_current(self, current_params: Array) -> None:
        if params_fingerprint(current_params) != self.fingerprint:
            raise StaleOperatorError(
                "curvature operator is stale: the model changed since build")

    def solve(self, v: Array) -> Array:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}")
        return scipy.linalg.cho_solve((self._chol, True), v)

    def matvec(self, v: Array) -> Array:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}")
        return self.matrix @ v + self.damping * v

    @classmethod
    def from_matrix(cls, H: Array, damping: float, subject: str = "label-stage",
                    kind: str = "exact-hessian", fingerprint: str = ""
                    ) -> "CurvatureOperator":
        return cls(kind, subject, damping, np.asarray(H, dtype=np.float64),
                   fingerprint)


def ihvp(op: CurvatureOperator, v: Array,
         current_params: Array | None = None) -> Array:
    """Solve ``(H + damping I) x = v``; linear in v.

    Passing the subject's current parameter vector enables the staleness
    check (an operator built at different parameters raises).
    """
    if current_params is not None:
        op.check_current(current_params)
    return op.solve(v)


def _check_cap(p: int, dense_cap: int) -> None:
    if p > dense_cap:
        raise UnsupportedModelError(
            f"{p} parameters exceed the dense curvature cap ({dense_cap})")


def build_exact(subject: str,
                g: ConceptPredictor | None,
                f: LabelPredictor | None,
                D: Dataset,
                *,
                include_concepts: Sequence[int] | None = None,
                include_rows: Sequence[int] | None = None,
                cell_mask: Array | None = None,
                damping: float = 0.0,
                mode: str = "gauss-newton",
                label_loss: str = "softmax-ce",
                concept_batch: Array | None = None,
                coord_subset: Array | None = None,
                dense_cap: int = DEFAULT_DENSE_CAP) -> CurvatureOperator:
    """Assemble the dense curvature of one stage's loss over the given masks.

    ``mode="hessian"`` is the exact loss Hessian (convex configurations
    only); ``mode="gauss-newton"`` is the per-sample gradient outer-product
    sum.  For the label stage, concepts come from ``g`` unless an explicit
    ``concept_batch`` is supplied (used when the curvature must be taken at
    edited concept outputs).  ``coord_subset`` restricts the assembled
    matrix to those flat parameter coordinates, for solves over a
    parameter subspace.
    """
    if mode not in ("hessian", "gauss-newton"):
        raise DimensionError(f"unknown curvature mode {mode!r}")

    def _restrict(H: Array) -> Array:
        if coord_subset is None:
            return H
        idx = np.asarray(coord_subset, dtype=np.intp)
        return H[np.ix_(idx, idx)]

    if subject == "concept-stage":
        if g is None:
            raise DimensionError("concept-stage curvature needs a concept predictor")
        p = concept_param_count(g)
        _check_cap(p, dense_cap)
        if mode == "hessian":
            if not is_linear_concept_predictor(g):
                raise UnsupportedModelError(
                    "exact-hessian mode needs a linear concept predictor; "
                    "use gauss-newton")
            diag = concept_output_hessians(g, D, include_concepts, include_rows,
                                           cell_mask)
            n, k = diag.shape
            A = np.zeros((n, k, k))
            A[:, np.arange(k), np.arange(k)] = diag
            H = linear_map_hessian(D.inputs, A, has_bias=True)
            kind = "exact-hessian"
        else:
            G = concept_per_sample_grads(g, D, include_concepts, include_rows,
                                         cell_mask)
            H = G.T @ G
            kind = "gauss-newton"
        return CurvatureOperator(kind, subject, damping, _restrict(H),
                                 params_fingerprint(concept_params(g)))

    if subject == "label-stage":
        if f is None:
            raise DimensionError("label-stage curvature needs a label predictor")
        p = label_param_count(f)
        _check_cap(p, dense_cap)
        if concept_batch is None:
            if g is None:
                raise DimensionError(
                    "label-stage curvature needs concepts: pass g or concept_batch")
            C = g.predict(D.inputs)
        else:
            C = np.asarray(concept_batch, dtype=np.float64)
        if mode == "hessian":
            A = label_output_hessians(f, C, D.labels, include_rows, label_loss)
            if f.bias is not None:
                H = linear_map_hessian(C, A, has_bias=True)
            else:
                H = linear_map_hessian(C, A, has_bias=False)
            kind = "exact-hessian"
        else:
            G = label_per_sample_grads(f, C, D.labels, include_rows, label_loss)
            H = G.T @ G
            kind = "gauss-newton"
        return CurvatureOperator(kind, subject, damping, _restrict(H),
                                 params_fingerprint(label_params(f)))

    raise DimensionError(f"unknown subject {subject!r}")


# ---------------------------------------------------------------------------
# Single-equation operator estimators
# ---------------------------------------------------------------------------


@dataclass
class DenseLinearOperator:
    """A materialized square operator with forward and (damped) solve."""

    matrix: Array

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionError("operator matrix must be square")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, v: Array) -> Array:
        return self.matrix @ v

    def solve(self, v: Array, damping: float = 0.0) -> Array:
        A = self.matrix + damping * np.eye(self.dim)
        try:
            return scipy.linalg.solve(A, np.asarray(v, dtype=np.float64))
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(
                "estimated operator is singular; add damping") from exc


def estimate_H_householder(u: Array, w: Array) -> DenseLinearOperator:
    """Operator A with ``A u = w`` built from a scaled Householder reflection.

    ``A = (|w| / |u|) * (I - 2 v v^T / v^T v)`` with ``v = u/|u| - w/|w|``;
    when the two directions coincide the reflection degenerates to the
    scaled identity.  The reflection part is orthogonal and involutive, so
    A is always invertible.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if u.shape != w.shape or u.ndim != 1:
        raise DimensionError("u and w must be vectors of equal length")
    nu = np.linalg.norm(u)
    nw = np.linalg.norm(w)
    if nu == 0.0 or nw == 0.0:
        raise NumericalError("householder estimate needs nonzero vectors")
    scale = nw / nu
    v = u / nu - w / nw
    vv = float(v @ v)
    eye = np.eye(u.shape[0])
    if vv < 1e-24:
        return DenseLinearOperator(scale * eye)
    return DenseLinearOperator(scale * (eye - 2.0 * np.outer(v, v) / vv))


def estimate_H_ridge(x: Array, y: Array, alpha: float) -> DenseLinearOperator:
    """Frobenius-ridge solution of ``A x = y``: ``A = y x^T (x x^T + a I)^{-1}``.

    For a single vector equation this reduces (Sherman-Morrison) to the
    rank-one matrix ``y x^T / (alpha + |x|^2)``, which satisfies the
    stationarity condition ``(A x - y) x^T + alpha A = 0`` exactly.  The
    result is rank one, so solves against it require damping.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("x and y must be vectors of equal length")
    if alpha <= 0:
        raise DimensionError("ridge weight alpha must be positive")
    return DenseLinearOperator(np.outer(y, x) / (alpha + float(x @ x)))
