"""Entanglement affinity, thresholded adjacency and the normalized propagator.

All differentiable pieces take and return :class:`~grace.numerics.Var` and
work on a single ``(d, c)`` feature matrix or a batch ``(B, d, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import (
    EigenResult,
    Var,
    add,
    expand_dims,
    matmul,
    mul,
    power,
    reduce_sum,
    sym_eigen,
    transpose,
)

ZERO_TOL = 1e-8


def entangle(X) -> Var:
    """Affinity ``X X^T`` between all node pairs."""
    if not isinstance(X, Var):
        X = Var(X)
    return matmul(X, transpose(X))


def threshold_mask(x_fe: np.ndarray, q: float = 0.5) -> np.ndarray:
    """Boolean mask of entries strictly above ``q`` times the mean of all entries."""
    if q <= 0:
        raise ValueError(f"threshold factor q must be positive, got {q}")
    x_fe = np.asarray(x_fe, dtype=float)
    cutoff = q * x_fe.mean(axis=(-2, -1), keepdims=True)
    return x_fe > cutoff


def threshold_affinity(x_fe, q: float = 0.5) -> Var:
    """Zero every affinity entry not exceeding ``q * mean(X_FE)``.

    The mask is computed from the values and held constant for
    differentiation; kept entries pass gradients through unchanged.
    """
    xv = x_fe.value if isinstance(x_fe, Var) else np.asarray(x_fe, dtype=float)
    return mul(x_fe, threshold_mask(xv, q).astype(float))


def propagator(A, normalize: bool = True) -> Var:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``.

    With ``normalize=False`` the self-looped adjacency ``A + I`` is returned
    unchanged.
    """
    av = A.value if isinstance(A, Var) else np.asarray(A, dtype=float)
    d = av.shape[-1]
    a_hat = add(A, np.eye(d))
    if not normalize:
        return a_hat
    deg = reduce_sum(a_hat, axis=-1)
    if np.any(deg.value <= 0):
        raise AssertionError("non-positive degree after adding self-loops")
    inv_sqrt = power(deg, -0.5)
    return mul(mul(expand_dims(inv_sqrt, -1), a_hat), expand_dims(inv_sqrt, -2))


@dataclass(frozen=True)
class LaplacianDiagnostics:
    eigenvalues: np.ndarray
    zero_multiplicity: int
    component_count: int

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass(frozen=True, eq=False)
class EntangledGraph:
    """Dense single-sample graph; every matrix is ``(d, d)``."""

    X_FE: np.ndarray
    A: np.ndarray
    A_hat: np.ndarray
    D_hat: np.ndarray
    M: np.ndarray
    q: float = 0.5

    @property
    def d(self) -> int:
        return self.M.shape[0]

    @property
    def L_norm(self) -> np.ndarray:
        return np.eye(self.d) - self.M

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.A))

    def edges(self) -> list[tuple[int, int]]:
        """Off-diagonal nonzeros of ``A_hat`` as ``(j, k)`` with ``j < k``."""
        j, k = np.nonzero(np.triu(self.A_hat, 1))
        return list(zip(j.tolist(), k.tolist()))

    @cached_property
    def eigen(self) -> EigenResult:
        """Eigendecomposition of ``L_norm`` (ascending)."""
        return sym_eigen(self.L_norm)


def build_propagator(A, q: float = 0.5, X_FE=None) -> EntangledGraph:
    """Assemble an :class:`EntangledGraph` from a thresholded adjacency."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if np.any(A < 0):
        raise ValueError("adjacency must be nonnegative")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    d = A.shape[0]
    A_hat = A + np.eye(d)
    D_hat = A_hat.sum(axis=1)
    assert np.all(D_hat >= 1.0), "self-loops guarantee degree >= 1"
    s = 1.0 / np.sqrt(D_hat)
    M = s[:, None] * A_hat * s[None, :]
    M = 0.5 * (M + M.T)
    return EntangledGraph(A if X_FE is None else np.asarray(X_FE), A, A_hat, D_hat, M, q)


def build_graph(X, q: float = 0.5) -> EntangledGraph:
    """Entangle, threshold and normalize a single ``(d, c)`` feature matrix."""
    Xv = X.value if isinstance(X, Var) else np.asarray(X, dtype=float)
    x_fe = Xv @ Xv.T
    x_fe = 0.5 * (x_fe + x_fe.T)
    A = np.where(threshold_mask(x_fe, q), x_fe, 0.0)
    return build_propagator(A, q, X_FE=x_fe)


def count_components(d: int, edges) -> int:
    """Connected components by union-find with path halving."""
    parent = list(range(d))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    n = d
    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            n -= 1
    return n


def diagnostics(g: EntangledGraph) -> LaplacianDiagnostics:
    lam = g.eigen.eigenvalues
    return LaplacianDiagnostics(
        eigenvalues=lam,
        zero_multiplicity=int(np.sum(lam <= ZERO_TOL)),
        component_count=count_components(g.d, g.edges()),
    )


def spectral_response(g: EntangledGraph) -> list[tuple[float, float]]:
    """``(lambda_i, ||M u_i|| / ||u_i||)`` for every eigenpair of ``L_norm``."""
    eig = g.eigen
    out = []
    for lam, u in zip(eig.eigenvalues, eig.eigenvectors.T):
        gain = np.linalg.norm(g.M @ u) / np.linalg.norm(u)
        out.append((float(lam), float(gain)))
    return out


def certificate(g: EntangledGraph) -> dict:
    """JSON-ready spectral certificate of one graph."""
    diag = diagnostics(g)
    return {
        "d": g.d,
        "q": g.q,
        "nnz": g.nnz,
        "eigenvalue_min": diag.lambda_min,
        "eigenvalue_max": diag.lambda_max,
        "interval_ok": bool(diag.lambda_min >= -ZERO_TOL and diag.lambda_max <= 2 + ZERO_TOL),
        "zero_multiplicity": diag.zero_multiplicity,
        "component_count": diag.component_count,
        "gain_table": [{"lambda": lam, "gain": gain} for lam, gain in spectral_response(g)],
    }


def random_feature_graph(seed: int, d: int = 16, c: int = 4, q: float = 0.5, sparsity: float = 0.5) -> EntangledGraph:
    """Graph from seeded nonnegative features.

    Roughly a fraction ``sparsity`` of entries are zeroed before entangling so
    that some graphs split into several components.
    """
    rng = np.random.default_rng([seed, 0x6A])
    X = rng.random((d, c)) * (rng.random((d, c)) >= sparsity)
    return build_graph(X, q)
