"""Continuous D-optimal design over a finite candidate set.

Maximises ``log det M(w)`` with ``M(w) = sum_i w_i (phi_i phi_i^T + lam I)``
over the probability simplex.  Because the weights sum to one, the ridge term
is exactly ``lam * I``; keeping it inside the sum makes ``M`` linear in ``w`` so
each step admits an exact line search.

The solver is a Frank-Wolfe / Fedorov-Wynn iteration with away steps: move
mass toward the candidate with the largest directional derivative, or away
from the support point with the smallest one, whichever gains more.  The step
length maximises the log-determinant exactly along the chosen segment, so the
objective never decreases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, validate_data

__all__ = [
    "DesignWeights",
    "CoresetSelection",
    "SingularDesignError",
    "default_ridge",
    "information_matrix",
    "log_det",
    "equivalence_gap",
    "solve_doptimal",
    "extract_coreset",
    "DOptimalDesign",
    "add_intercept",
]

log = logging.getLogger(__name__)


class SingularDesignError(np.linalg.LinAlgError):
    pass


@dataclass
class DesignWeights:
    weights: np.ndarray
    ridge: float
    iterations: int
    gap: float
    converged: bool
    tolerance: float
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def support_size(self) -> int:
        return int((self.weights > 1e-6).sum())


@dataclass
class CoresetSelection:
    indices: list[int]
    threshold_used: float
    min_size: int
    above_threshold: list[int]

    def __len__(self) -> int:
        return len(self.indices)


def add_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"need a non-empty (N, d) feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite entries")
    return X


def default_ridge(X, scale: float = 1e-8) -> float:
    """``scale * trace(M_uniform) / d``, falling back to ``scale`` for all-zero features."""
    X = np.asarray(X, dtype=float)
    tr = float(np.mean(np.sum(X * X, axis=1)))
    return scale * (tr / X.shape[1] if tr > 0 else 1.0)


def information_matrix(X, weights, ridge: float) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    w = np.asarray(weights, dtype=float)
    M = (X * w[:, None]).T @ X
    M = 0.5 * (M + M.T)
    M[np.diag_indices_from(M)] += ridge * w.sum()
    return M


def _chol(M: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(M, lower=True)
    except linalg.LinAlgError:
        raise SingularDesignError("information matrix is singular; the feature matrix is rank deficient") from None


def log_det(X, weights, ridge: float = 0.0) -> float:
    L = _chol(information_matrix(X, weights, ridge))
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _variances(X: np.ndarray, L: np.ndarray) -> np.ndarray:
    G = linalg.solve_triangular(L, X.T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", G, G)


def equivalence_gap(X, weights, ridge: float | None = None) -> float:
    """``max_i phi_i^T M(w)^-1 phi_i``; equals ``d`` at a D-optimal design."""
    X = _check_features(X)
    lam = default_ridge(X) if ridge is None else ridge
    L = _chol(information_matrix(X, weights, lam))
    return float(_variances(X, L).max())


def _line_search(mu: np.ndarray, alpha_max: float) -> float:
    """Maximise ``sum(log(1 + a * mu))`` over ``a`` in ``[0, alpha_max]``."""

    def slope(a):
        return float(np.sum(mu / (1.0 + a * mu)))

    if slope(0.0) <= 0:
        return 0.0
    if slope(alpha_max) >= 0:
        return alpha_max
    lo, hi = 0.0, alpha_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return lo


def solve_doptimal(
    X,
    tolerance: float = 1e-3,
    max_iterations: int = 5000,
    ridge_scale: float = 1e-8,
    record_history: bool = False,
) -> DesignWeights:
    """Approximate D-optimal weights for the rows of ``X``.

    Starts from uniform weights and stops once every directional derivative
    is within ``d * (1 + tolerance)`` (the equivalence-theorem certificate),
    or after ``max_iterations`` steps.
    """
    X = _check_features(X)
    N, d = X.shape
    lam = default_ridge(X, ridge_scale)
    w = np.full(N, 1.0 / N)
    target = d * (1.0 + tolerance)
    history: list[float] = []
    converged = False
    it = 0
    eye = np.eye(d)
    while True:
        M = information_matrix(X, w, lam)
        L = _chol(M)
        if record_history:
            history.append(2.0 * float(np.sum(np.log(np.diag(L)))))
        g = _variances(X, L)
        Linv = linalg.solve_triangular(L, eye, lower=True, check_finite=False)
        g_tot = g + lam * float(np.sum(Linv * Linv))
        j = int(np.argmax(g_tot))
        if g_tot[j] <= target:
            converged = True
            break
        if it >= max_iterations:
            break
        it += 1

        support = np.flatnonzero(w > 0)
        k = int(support[np.argmin(g_tot[support])])
        toward_gain = g_tot[j] - d
        away_gain = d - g_tot[k]
        if away_gain > toward_gain and w[k] < 1.0:
            a = X[k]
            # direction M - A_k, with A_k = a a^T + lam I
            Y = Linv @ a
            B = eye - np.outer(Y, Y) - lam * (Linv @ Linv.T)
            alpha_max = w[k] / (1.0 - w[k])
            alpha = _line_search(np.linalg.eigvalsh(0.5 * (B + B.T)), alpha_max)
            w = (1.0 + alpha) * w
            w[k] -= alpha
            if alpha >= alpha_max:
                w[k] = 0.0
        else:
            a = X[j]
            Y = Linv @ a
            B = np.outer(Y, Y) + lam * (Linv @ Linv.T) - eye
            alpha = _line_search(np.linalg.eigvalsh(0.5 * (B + B.T)), 1.0)
            w = (1.0 - alpha) * w
            w[j] += alpha
        w = np.maximum(w, 0.0)
        w /= w.sum()

    gap = float(g.max())
    result = DesignWeights(w, lam, it, gap, converged, tolerance, history)
    bound = d * (d + 1) // 2
    log.info("D-optimal design: %d iterations, gap %.6g (d=%d), support %d", it, gap, d, result.support_size)
    if result.support_size > bound:
        log.warning("design support %d exceeds d(d+1)/2 = %d", result.support_size, bound)
    if not converged:
        log.warning("D-optimal solver stopped at max_iterations=%d with gap %.6g > %.6g", max_iterations, gap, target)
    return result


def extract_coreset(weights, threshold: float = 1e-2, min_size: int = 10, uids=None) -> CoresetSelection:
    """Candidates with weight strictly above ``threshold``, padded to ``min_size``.

    Padding takes the heaviest excluded candidates (lower uid first on ties).
    The result is ordered by descending weight.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    ids = np.arange(len(w)) if uids is None else np.asarray(uids)
    order = np.lexsort((ids, -w))
    above = [int(ids[i]) for i in order if w[i] > threshold]
    chosen = list(above)
    if len(chosen) < min_size:
        taken = set(chosen)
        for i in order:
            if len(chosen) >= min_size:
                break
            if int(ids[i]) not in taken:
                chosen.append(int(ids[i]))
    return CoresetSelection(chosen, float(threshold), int(min_size), above)


class DOptimalDesign(BaseEstimator):
    """Estimator form of :func:`solve_doptimal`.

    ``fit(X)`` sets ``weights_``, ``gap_``, ``n_iter_``, ``ridge_`` and
    ``converged_``; ``coreset()`` thresholds the fitted weights.
    """

    def __init__(self, tolerance=1e-3, max_iterations=5000, ridge_scale=1e-8, fit_intercept=True):
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.ridge_scale = ridge_scale
        self.fit_intercept = fit_intercept

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=float)
        design = add_intercept(X) if self.fit_intercept else X
        res = solve_doptimal(design, self.tolerance, self.max_iterations, self.ridge_scale)
        self.weights_ = res.weights
        self.gap_ = res.gap
        self.n_iter_ = res.iterations
        self.ridge_ = res.ridge
        self.converged_ = res.converged
        self.result_ = res
        return self

    def coreset(self, threshold=1e-2, min_size=10, uids=None) -> CoresetSelection:
        check_is_fitted(self, "weights_")
        return extract_coreset(self.weights_, threshold, min_size, uids)

    def log_det(self, X) -> float:
        check_is_fitted(self, "weights_")
        X = validate_data(self, X, dtype=float, reset=False)
        design = add_intercept(X) if self.fit_intercept else X
        return log_det(design, self.weights_, self.ridge_)
