"""Gauss-Hermite quadrature against Gaussian measures.

Used wherever an expectation over a Gaussian frozen equilibrium is needed:
centering checks, effective coefficients, conditional means of observables.
Tensor-product rules are capped at dimension 3; higher dimensions should go
through Monte Carlo sampling of the equilibrium instead.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "gauss_hermite",
    "gaussian_nodes",
    "gaussian_expect",
    "gaussian_expect_batch",
]

MAX_TENSOR_DIM = 3
DEFAULT_ORDER = 20


def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating exactly against N(0, 1).

    Polynomials up to degree 2*order - 1 are integrated exactly.
    """
    h_nodes, h_weights = np.polynomial.hermite.hermgauss(order)
    return np.sqrt(2.0) * h_nodes, h_weights / np.sqrt(np.pi)


def gaussian_nodes(cov, order: int = DEFAULT_ORDER, mean=None):
    """Tensor-product rule for N(mean, cov) in dimension d <= 3.

    Returns (nodes, weights) with nodes of shape (order**d, d).
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    if cov.shape != (d, d):
        raise ValueError("cov must be a square matrix")
    if d > MAX_TENSOR_DIM:
        raise ValueError(
            f"tensor Gauss-Hermite capped at d={MAX_TENSOR_DIM}; "
            f"got d={d} (use Monte Carlo equilibrium sampling instead)"
        )
    base, w1 = gauss_hermite(order)
    grids = np.meshgrid(*([base] * d), indexing="ij")
    std_nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w1] * d), indexing="ij")
    weights = np.ones(order**d)
    for wg in wgrids:
        weights = weights * wg.ravel()
    chol = np.linalg.cholesky(cov)
    nodes = std_nodes @ chol.T
    if mean is not None:
        nodes = nodes + np.asarray(mean, dtype=float)
    return nodes, weights


def gaussian_expect(f, cov, order: int = DEFAULT_ORDER, mean=None) -> np.ndarray:
    """E[f(X)] for X ~ N(mean, cov); f vectorized over leading axes."""
    nodes, weights = gaussian_nodes(cov, order=order, mean=mean)
    vals = np.asarray(f(nodes))
    return np.tensordot(weights, vals, axes=(0, 0))


def gaussian_expect_batch(f, covs, order: int = DEFAULT_ORDER, args=()):
    """Per-sample Gaussian expectations with sample-dependent covariance.

    covs has shape (n, d, d); f(x, *args) is evaluated at node arrays of
    shape (K, n, d) with any extra args broadcast along the n axis, and the
    result (K, n, ...) is contracted with the weights to give (n, ...).
    """
    covs = np.asarray(covs, dtype=float)
    n, d = covs.shape[0], covs.shape[-1]
    if d > MAX_TENSOR_DIM:
        raise ValueError(f"tensor Gauss-Hermite capped at d={MAX_TENSOR_DIM}")
    base, w1 = gauss_hermite(order)
    grids = np.meshgrid(*([base] * d), indexing="ij")
    std_nodes = np.stack([g.ravel() for g in grids], axis=-1)  # (K, d)
    wgrids = np.meshgrid(*([w1] * d), indexing="ij")
    weights = np.ones(order**d)
    for wg in wgrids:
        weights = weights * wg.ravel()
    chol = np.linalg.cholesky(covs)  # (n, d, d)
    nodes = np.einsum("kj,nij->kni", std_nodes, chol)  # (K, n, d)
    vals = np.asarray(f(nodes, *args))
    return np.tensordot(weights, vals, axes=(0, 0))
