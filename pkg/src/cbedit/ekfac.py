"""Kronecker-factored, eigenvalue-corrected curvature for dense layers.

Per layer, the gradient covariance is approximated by the Kronecker
product ``Omega (x) Gamma`` of the homogeneous-input second moment and the
pre-activation-gradient second moment (both averaged over the covered
rows), and the eigenvalues of that product are replaced by the corrected
values ``Lambda*_i = mean_j ((Q_Omega (x) Q_Gamma)^T grad_j)_i^2``, the
diagonal of the exact gradient covariance in the Kronecker eigenbasis.

Solves never materialize the Kronecker product: with the column-stacking
convention, ``(Q_Omega (x) Q_Gamma)^T vec(V) = vec(Q_Gamma^T V Q_Omega)``,
so each layer's solve is two small matrix products and an elementwise
divide.  Factors are averaged (``1/n``); callers that need the sum-scaled
curvature of the editing formulas pass ``eigen_scale=n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalError
from .model import (
    ConceptPredictor,
    Dataset,
    LabelPredictor,
    _as_index_array,
    concept_backprop,
    concept_forward_cache,
    concept_output_grad,
    label_output_grad,
)

Array = np.ndarray

_RANK_DEFICIENT_TOL = 1e-300


@dataclass
class KroneckerFactor:
    """Factored curvature block for one dense layer.

    ``lam_corrected`` is stored as a (fan_out, fan_in+1) matrix whose
    entry (r, c) is the corrected eigenvalue for the Kronecker eigenpair
    (omega eigenvector c, gamma eigenvector r).  ``rows`` restricts the
    block to a subset of output rows (used when final-layer rows are
    excluded from a Newton system); ``None`` means all rows.
    """

    layer_index: int
    omega: Array
    gamma: Array
    q_omega: Array
    lam_omega: Array
    q_gamma: Array
    lam_gamma: Array
    lam_corrected: Array
    n_samples: int
    rows: Array | None = None
    full_fan_out: int | None = None

    @property
    def fan_out(self) -> int:
        """Row count of the covered block (restricted when ``rows`` is set)."""
        return self.gamma.shape[0]

    @property
    def layout_fan_out(self) -> int:
        """Row count in the flat parameter layout (always the full layer)."""
        return self.full_fan_out if self.full_fan_out is not None else self.fan_out

    @property
    def fan_in_h(self) -> int:
        """Homogeneous fan-in (inputs plus the bias coordinate)."""
        return self.omega.shape[0]

    @property
    def block_dim(self) -> int:
        return self.fan_out * self.fan_in_h

    @property
    def rank_deficient(self) -> bool:
        return bool(self.lam_corrected.min() <= _RANK_DEFICIENT_TOL)

    def solve_matrix(self, V: Array, lam: float, eigen_scale: float = 1.0) -> Array:
        """Apply ``(scale * block + lam I)^{-1}`` to a (fan_out, fan_in+1) matrix."""
        denom = eigen_scale * self.lam_corrected + lam
        if denom.min() <= 0.0:
            raise NumericalError(
                f"singular EK-FAC block for layer {self.layer_index}; "
                "a rank-deficient factor needs positive damping")
        Y = self.q_gamma.T @ V @ self.q_omega
        Y = Y / denom
        return self.q_gamma @ Y @ self.q_omega.T

    def dense_block(self, lam: float = 0.0, eigen_scale: float = 1.0) -> Array:
        """Materialized block in column-stacked vec order (for tests/diagnostics)."""
        Q = np.kron(self.q_omega, self.q_gamma)
        diag = eigen_scale * self.lam_corrected.reshape(-1, order="F") + lam
        return Q @ np.diag(diag) @ Q.T


def _factor_from_samples(layer_index: int, a_prev: Array, delta: Array,
                         rows: Array | None = None,
                         full_fan_out: int | None = None) -> KroneckerFactor:
    n = a_prev.shape[0]
    a_h = np.hstack([a_prev, np.ones((n, 1))])
    omega = (a_h.T @ a_h) / n
    gamma = (delta.T @ delta) / n
    lam_omega, q_omega = np.linalg.eigh(omega)
    lam_gamma, q_gamma = np.linalg.eigh(gamma)
    proj_g = delta @ q_gamma
    proj_a = a_h @ q_omega
    lam_corrected = (proj_g ** 2).T @ (proj_a ** 2) / n
    return KroneckerFactor(layer_index, omega, gamma, q_omega, lam_omega,
                           q_gamma, lam_gamma, lam_corrected, n, rows,
                           full_fan_out)


def collect_factors(g: ConceptPredictor, D: Dataset,
                    include_concepts: Sequence[int] | None = None,
                    include_rows: Sequence[int] | None = None,
                    cell_mask: Array | None = None,
                    final_rows: Sequence[int] | None = None
                    ) -> list[KroneckerFactor]:
    """Per-layer factors of the concept-stage gradient covariance.

    The covered loss terms follow the same masks as the loss functions.
    ``final_rows`` restricts the last layer's block to a subset of output
    rows (the remaining rows are excluded from any solve).
    """
    rows = _as_index_array(include_rows, D.n, "row")
    cache = concept_forward_cache(g, D.inputs)
    dS = concept_output_grad(g, D, include_concepts, include_rows, cell_mask)
    _, per_layer = concept_backprop(g, cache, dS)
    factors = []
    for idx, (delta, a_prev) in enumerate(per_layer):
        delta = delta[rows]
        a_prev = a_prev[rows]
        row_subset = None
        full = delta.shape[1]
        if final_rows is not None and idx == g.n_layers - 1:
            row_subset = _as_index_array(final_rows, g.k, "concept")
            delta = delta[:, row_subset]
        factors.append(_factor_from_samples(idx, a_prev, delta, row_subset, full))
    return factors


def collect_label_factors(f: LabelPredictor, concept_batch: Array, labels: Array,
                          include_rows: Sequence[int] | None = None,
                          loss_kind: str = "softmax-ce") -> list[KroneckerFactor]:
    """Single-block factors for the (one-layer) label predictor."""
    from .errors import UnsupportedModelError

    if f.bias is None:
        raise UnsupportedModelError(
            "label-stage EK-FAC folds the bias as a homogeneous coordinate; "
            "a bias-free label predictor is not supported here")
    concept_batch = np.atleast_2d(np.asarray(concept_batch, dtype=np.float64))
    rows = _as_index_array(include_rows, concept_batch.shape[0], "row")
    dZ = label_output_grad(f, concept_batch, labels, include_rows, loss_kind)
    return [_factor_from_samples(0, concept_batch[rows], dZ[rows])]


def _gather_block(factor: KroneckerFactor, v: Array, offset: int,
                  q_full: int, m: int) -> Array:
    W = v[offset:offset + q_full * m].reshape(q_full, m)
    b = v[offset + q_full * m: offset + q_full * m + q_full]
    V = np.hstack([W, b[:, None]])
    if factor.rows is not None:
        V = V[factor.rows]
    return V


def _scatter_block(factor: KroneckerFactor, X: Array, out: Array, offset: int,
                   q_full: int, m: int) -> None:
    if factor.rows is not None:
        full = np.zeros((q_full, m + 1))
        full[factor.rows] = X
        X = full
    out[offset:offset + q_full * m] = X[:, :m].ravel()
    out[offset + q_full * m: offset + q_full * m + q_full] = X[:, m]


def ekfac_ihvp(factors: list[KroneckerFactor], v: Array,
               lam: float | Sequence[float],
               eigen_scale: float | Sequence[float] = 1.0) -> Array:
    """Block-diagonal damped inverse applied to a flat parameter vector.

    Each layer's block is ``(eigen_scale * Q diag(Lambda*) Q^T + lam I)``;
    cross-layer blocks are zero.  ``lam`` and ``eigen_scale`` may be
    scalars or per-layer sequences.
    """
    v = np.asarray(v, dtype=np.float64)
    lams = np.broadcast_to(np.asarray(lam, dtype=np.float64), (len(factors),))
    scales = np.broadcast_to(np.asarray(eigen_scale, dtype=np.float64),
                             (len(factors),))
    offset = 0
    out = np.zeros_like(v)
    for factor, lam_l, scale_l in zip(factors, lams, scales):
        q_full = factor.layout_fan_out
        m = factor.fan_in_h - 1
        V = _gather_block(factor, v, offset, q_full, m)
        X = factor.solve_matrix(V, float(lam_l), float(scale_l))
        _scatter_block(factor, X, out, offset, q_full, m)
        offset += q_full * (m + 1)
    if offset != v.shape[0]:
        raise DimensionError(
            f"flat vector length {v.shape[0]} does not match factors ({offset})")
    return out


def kron_eig_check(omega: Array, gamma: Array) -> tuple[Array, Array]:
    """Eigenpairs of ``omega (x) gamma`` from the factor eigenpairs.

    Diagnostic utility: returns eigenvalues ``lam_i * mu_j`` matched with
    eigenvector columns ``q_i (x) p_j`` of the Kronecker product.
    """
    omega = np.asarray(omega, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if not np.allclose(omega, omega.T) or not np.allclose(gamma, gamma.T):
        raise DimensionError("kron_eig_check expects symmetric inputs")
    lam_o, q_o = np.linalg.eigh(omega)
    lam_g, q_g = np.linalg.eigh(gamma)
    return np.kron(lam_o, lam_g), np.kron(q_o, q_g)
