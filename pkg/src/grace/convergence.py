"""Executable checks of the contraction argument for ``Z -> relu(M Z W)``.

The Lipschitz constant of one layer map is bounded by
``L_f = L_sigma * lambda_max(M) * B_W`` with ``L_sigma = 1`` for the
rectifier and ``B_W`` the largest spectral norm among the weights. When
``L_f < 1`` the map is a contraction and fixed-point iteration converges
linearly at rate at most ``L_f``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .entanglement import EntangledGraph, ZERO_TOL
from .numerics import spectral_norm, sym_eigen

L_SIGMA = 1.0
PAPER_LAMBDA_BOUND = 2.0
RATIO_SLACK = 1e-6
# below this distance to Z* the Frobenius norm itself loses accuracy
DISTANCE_FLOOR = 1e-100


@dataclass
class TheoremAudit:
    lambda_max_M: float
    lambda_interval_Lnorm: tuple[float, float]
    interval_ok: bool
    B_W: float
    B_W_per_layer: list[float]
    L_f: float
    L_f_paper_bound: float
    L_sigma: float = L_SIGMA
    contraction_trace: list[float] = field(default_factory=list)
    distance_trace: list[float] = field(default_factory=list)
    step_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged_at: int | None = None
    residual_reached_at: int | None = None
    diverged_at: int | None = None
    bound_violations: list[int] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "contractive" if self.L_f < 1.0 else "non-contractive"

    @property
    def max_ratio(self) -> float | None:
        return max(self.contraction_trace) if self.contraction_trace else None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda_interval_Lnorm"] = list(self.lambda_interval_Lnorm)
        out["verdict"] = self.verdict
        return out


def _propagator_spectrum(g) -> tuple[float, tuple[float, float]]:
    if isinstance(g, EntangledGraph):
        lam = g.eigen.eigenvalues
    else:
        M = np.asarray(g, dtype=float)
        lam = 1.0 - sym_eigen(M).eigenvalues[::-1]
    return float(1.0 - lam[0]), (float(lam[0]), float(lam[-1]))


def _weights(model_or_weights) -> list[np.ndarray]:
    if hasattr(model_or_weights, "gcn_weights"):
        return list(model_or_weights.gcn_weights)
    if isinstance(model_or_weights, np.ndarray) and model_or_weights.ndim == 2:
        return [model_or_weights]
    return [np.atleast_2d(np.asarray(w, dtype=float)) for w in model_or_weights]


def audit_assumptions(g, model_or_weights) -> TheoremAudit:
    """Spectral interval of ``I - M``, weight norms and the layer Lipschitz bound.

    ``g`` is an :class:`EntangledGraph` or a bare propagator matrix;
    ``model_or_weights`` is a model exposing ``gcn_weights`` or a list of
    weight matrices.
    """
    lam_max, (lo, hi) = _propagator_spectrum(g)
    norms = [spectral_norm(W) for W in _weights(model_or_weights)]
    b_w = max(norms)
    return TheoremAudit(
        lambda_max_M=lam_max,
        lambda_interval_Lnorm=(lo, hi),
        interval_ok=bool(lo >= -ZERO_TOL and hi <= 2.0 + ZERO_TOL),
        B_W=b_w,
        B_W_per_layer=norms,
        L_f=L_SIGMA * lam_max * b_w,
        L_f_paper_bound=L_SIGMA * PAPER_LAMBDA_BOUND * b_w,
    )


def _layer_map(M, W):
    def f(Z):
        return np.maximum(M @ Z @ W, 0.0)

    return f


def measure_contraction(
    g,
    W,
    Z0,
    iters: int = 20000,
    tol: float = 1e-12,
    residual_target: float = 1e-10,
    divergence_norm: float = 1e12,
) -> TheoremAudit:
    """Iterate ``Z <- relu(M Z W)`` from ``Z0`` and record the rate toward ``Z*``.

    ``Z*`` is the final iterate: iteration runs past the point where the
    step ``||Z_{l+1} - Z_l||_F`` first falls below ``tol`` (recorded as
    ``converged_at``) until the iterate is exactly stationary or ``iters`` is
    exhausted. Ratios ``||Z_{l+1} - Z*|| / ||Z_l - Z*||`` are recorded while
    both distances stay above the estimation error of ``Z*`` (scaled by 1e8),
    so the trace is not polluted by the error of ``Z*`` itself.
    """
    M = g.M if isinstance(g, EntangledGraph) else np.asarray(g, dtype=float)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    audit = audit_assumptions(g, [W])
    f = _layer_map(M, W)

    # pass 1: locate Z*
    Z = Z0
    steps = []
    for l in range(iters):
        Zn = f(Z)
        nrm = np.linalg.norm(Zn)
        if not np.isfinite(nrm) or nrm > divergence_norm:
            audit.diverged_at = l + 1
            break
        step = float(np.linalg.norm(Zn - Z))
        steps.append(step)
        if audit.converged_at is None and step <= tol:
            audit.converged_at = l + 1
        if audit.residual_reached_at is None and step <= residual_target:
            audit.residual_reached_at = l + 1
        Z = Zn
        if step == 0.0:
            break
    audit.iterations = len(steps)
    audit.step_trace = steps
    if audit.diverged_at is not None:
        return audit
    z_star = Z

    last = steps[-1] if steps else 0.0
    if audit.L_f < 1.0:
        err = audit.L_f / (1.0 - audit.L_f) * last
    else:
        err = last
    floor = max(DISTANCE_FLOOR, 1e8 * err)

    # pass 2: distances to Z*
    Z = Z0
    dists = [float(np.linalg.norm(Z - z_star))]
    for _ in range(audit.iterations):
        Z = f(Z)
        dists.append(float(np.linalg.norm(Z - z_star)))
    audit.distance_trace = dists

    ratios = []
    for l in range(len(dists) - 1):
        if dists[l] <= floor or dists[l + 1] <= floor:
            break
        ratios.append(dists[l + 1] / dists[l])
    audit.contraction_trace = ratios

    if audit.L_f < 1.0 and dists[0] > 0:
        for l, dl in enumerate(dists):
            if dl <= floor:
                break
            if dl > audit.L_f**l * dists[0] * (1 + RATIO_SLACK):
                audit.bound_violations.append(l)
    return audit


def filter_identity_error(g: EntangledGraph, signal) -> float:
    """``||M s - sum_i (1 - lambda_i) (u_i . s) u_i||_inf``."""
    s = np.asarray(signal, dtype=float).reshape(g.d, -1)
    eig = g.eigen
    coeffs = eig.eigenvectors.T @ s
    spectral = eig.eigenvectors @ ((1.0 - eig.eigenvalues)[:, None] * coeffs)
    return float(np.max(np.abs(g.M @ s - spectral)))


def smoothing_audit(g: EntangledGraph, signal) -> dict:
    """Per-band energy of ``signal`` before and after one application of ``M``.

    Band ``i`` is the projection on eigenvector ``u_i`` of ``I - M``; its
    energy must scale by exactly ``(1 - lambda_i)^2``.
    """
    s = np.asarray(signal, dtype=float).reshape(g.d, -1)
    if not np.all(np.isfinite(s)):
        raise ValueError("signal must be finite")
    eig = g.eigen
    U, lam = eig.eigenvectors, eig.eigenvalues
    e_in = np.sum((U.T @ s) ** 2, axis=1)
    e_out = np.sum((U.T @ (g.M @ s)) ** 2, axis=1)
    expected = (1.0 - lam) ** 2 * e_in
    band_err = np.abs(e_out - expected)
    tol = 1e-8 * max(1.0, float(np.sum(s * s)))
    total_out = float(np.sum((g.M @ s) ** 2))
    return {
        "bands": [
            {"lambda": float(l), "gain": float((1 - l) ** 2), "energy_in": float(a), "energy_out": float(b)}
            for l, a, b in zip(lam, e_in, e_out)
        ],
        "energy_in": float(np.sum(s * s)),
        "energy_out": total_out,
        "energy_out_spectral": float(np.sum(expected)),
        "max_band_error": float(band_err.max(initial=0.0)),
        "ok": bool(band_err.max(initial=0.0) <= tol and abs(total_out - np.sum(expected)) <= tol),
    }


def weight_with_norm(rng: np.random.Generator, k: int, target: float) -> np.ndarray:
    """Random ``(k, k)`` matrix rescaled to spectral norm ``target``."""
    W = rng.standard_normal((k, k))
    return W * (target / spectral_norm(W))
