"""Weighted least-squares local surrogate, candidate ranking and recovery metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .design import add_intercept

__all__ = [
    "SurrogateModel",
    "RankReport",
    "fit_wls",
    "predict",
    "rank_candidates",
    "verification_set",
    "true_ranks",
    "rank_diagnostics",
    "chebyshev_fit",
    "LocalSurrogate",
]


@dataclass
class SurrogateModel:
    theta: np.ndarray
    training_uids: list[int]
    fit_residual_max: float
    ridge: float
    fit_intercept: bool = False

    @property
    def n_features(self) -> int:
        return len(self.theta) - int(self.fit_intercept)


@dataclass
class RankReport:
    surrogate_order: list[int]
    verify_k: int
    pred_at_k: list[int] = field(default_factory=list)
    eval_at_k: list[int] = field(default_factory=list)


def fit_wls(
    features,
    weights,
    labels,
    uids: Sequence[int] | None = None,
    ridge_scale: float = 1e-12,
    fit_intercept: bool = False,
) -> SurrogateModel:
    """Minimise ``sum_i w_i (phi_i . theta - y_i)^2 + lam |theta|^2``.

    Rows with zero weight are ignored.  Weights are rescaled to sum to one and
    ``lam = ridge_scale * trace(Phi^T W Phi) / d``, so multiplying every weight
    by a constant leaves ``theta`` unchanged.  The ridge keeps the problem
    well posed on rank-deficient training sets; the solve goes through an
    SVD of the stacked system ``[sqrt(W) Phi; sqrt(lam) I]``.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.asarray(weights, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ValueError("need at least one training row")
    if not (len(w) == len(y) == X.shape[0]):
        raise ValueError("features, weights and labels disagree in length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels contain non-finite values")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    ids = list(range(X.shape[0])) if uids is None else [int(u) for u in uids]

    keep = w > 0
    X, w, y = X[keep], w[keep] / w[keep].sum(), y[keep]
    if fit_intercept:
        X = add_intercept(X)
    d = X.shape[1]
    sw = np.sqrt(w)
    A = X * sw[:, None]
    lam = ridge_scale * float(np.sum(A * A)) / d
    if lam <= 0:
        lam = ridge_scale
    A = np.vstack([A, np.sqrt(lam) * np.eye(d)])
    b = np.concatenate([y * sw, np.zeros(d)])
    theta, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = float(np.max(np.abs(X @ theta - y)))
    training = [u for u, k in zip(ids, keep) if k]
    return SurrogateModel(theta, training, resid, lam, fit_intercept)


def predict(model: SurrogateModel, features) -> np.ndarray | float:
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {X.shape[1]}")
    if model.fit_intercept:
        X = add_intercept(X)
    out = X @ model.theta
    return float(out[0]) if single else out


def rank_candidates(model: SurrogateModel, features, uids: Sequence[int]) -> list[int]:
    """Uids sorted by predicted cost, ascending; ties go to the lower uid."""
    preds = np.atleast_1d(predict(model, np.atleast_2d(features)))
    ids = np.asarray(uids)
    if len(ids) != len(preds):
        raise ValueError("features and uids disagree in length")
    return [int(ids[i]) for i in np.lexsort((ids, preds))]


def verification_set(surrogate_order: Sequence[int], coreset_uids, verify_k: int, mode: str = "new") -> list[int]:
    """Surrogate-favoured candidates to evaluate after the coreset.

    ``mode="new"`` walks down the ranking skipping coreset members until
    ``verify_k`` fresh uids are found; ``mode="topk"`` keeps only the top
    ``verify_k`` ranks that are not in the coreset.
    """
    if verify_k < 0:
        raise ValueError("verify_k must be >= 0")
    core = set(int(u) for u in coreset_uids)
    if mode == "topk":
        return [int(u) for u in surrogate_order[:verify_k] if int(u) not in core]
    if mode != "new":
        raise ValueError("mode must be 'new' or 'topk'")
    out: list[int] = []
    for u in surrogate_order:
        if len(out) >= verify_k:
            break
        if int(u) not in core:
            out.append(int(u))
    return out


def true_ranks(true_costs: Mapping[int, float]) -> dict[int, int]:
    """1-based rank of every uid by true cost (ties to the lower uid)."""
    ordered = sorted(true_costs, key=lambda u: (true_costs[u], u))
    return {u: r for r, u in enumerate(ordered, start=1)}


def rank_diagnostics(
    true_costs: Mapping[int, float],
    surrogate_order: Sequence[int],
    coreset_uids,
    verify_k: int = 10,
    evaluated_uids=None,
) -> RankReport:
    """Pred@k and Eval@k against exhaustive labels.

    Pred@k lists the true top-k ranks found among the surrogate's top-k;
    Eval@k those found in the evaluated set, which defaults to the coreset
    plus the surrogate's top-k.
    """
    missing = [u for u in surrogate_order if u not in true_costs]
    if missing:
        raise KeyError(f"no true cost for uid(s) {missing[:5]}")
    ranks = true_ranks(true_costs)
    k = verify_k
    top_pred = [int(u) for u in surrogate_order[:k]]
    if evaluated_uids is None:
        evaluated_uids = set(int(u) for u in coreset_uids) | set(top_pred)
    pred = sorted(ranks[u] for u in top_pred if ranks[u] <= k)
    ev = sorted(ranks[int(u)] for u in set(evaluated_uids) if ranks[int(u)] <= k)
    return RankReport([int(u) for u in surrogate_order], k, pred, ev)


def chebyshev_fit(features, labels) -> tuple[float, np.ndarray]:
    """Best uniform linear fit: ``min_theta max_i |phi_i . theta - y_i|``.

    Returns ``(E, theta)``.  Used as the misspecification measure of an
    exhaustively labelled candidate set.
    """
    from scipy.optimize import linprog

    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    n, d = X.shape
    # variables [theta (d), t]; minimise t s.t. |X theta - y| <= t
    c = np.zeros(d + 1)
    c[-1] = 1.0
    ones = np.ones((n, 1))
    A = np.vstack([np.hstack([X, -ones]), np.hstack([-X, -ones])])
    b = np.concatenate([y, -y])
    res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * d + [(0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"Chebyshev fit failed: {res.message}")
    theta = res.x[:d]
    return float(np.max(np.abs(X @ theta - y))), theta


class LocalSurrogate(RegressorMixin, BaseEstimator):
    """Linear WLS surrogate with an appended intercept column by default.

    Parameters
    ----------
    ridge_scale : float
        Trace-relative ridge strength.
    fit_intercept : bool
        Append a constant feature before fitting.
    """

    def __init__(self, ridge_scale=1e-12, fit_intercept=True):
        self.ridge_scale = ridge_scale
        self.fit_intercept = fit_intercept

    def fit(self, X, y, sample_weight=None):
        X, y = validate_data(self, X, y, dtype=float, y_numeric=True)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        self.model_ = fit_wls(X, w, y, ridge_scale=self.ridge_scale, fit_intercept=self.fit_intercept)
        self.theta_ = self.model_.theta
        self.coef_ = self.theta_[: self.n_features_in_]
        self.intercept_ = float(self.theta_[-1]) if self.fit_intercept else 0.0
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=float, reset=False)
        return np.atleast_1d(predict(self.model_, X))

    def rank(self, X, uids=None) -> list[int]:
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=float, reset=False)
        ids = np.arange(X.shape[0]) if uids is None else uids
        return rank_candidates(self.model_, X, ids)
