"""Estimator classes with the scikit-learn fit/predict/get_params surface.

These wrap the functional core so the panel estimators compose with the
wider ecosystem (``clone``, grid search over hyperparameters, pipelines
that treat the panel arrays as opaque).  ``X`` is the (n, T, K) regressor
array and ``y`` the (n, T) outcome; ``predict`` returns the structural
component ``X @ beta_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .estimators import FitOptions, ls_factor_fit, pie_fit, twfe_fit
from .exceptions import DimensionMismatch
from .inference import attach_vcov
from .panel import DEFAULT_PRUNE_TOL, PanelDataset, cross_section_demean, identification_check


def check_panel_arrays(X, y) -> tuple[np.ndarray, np.ndarray]:
    """Validate and coerce panel arrays to float (n, T, K) / (n, T)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if y.ndim != 2 or X.ndim != 3 or X.shape[:2] != y.shape:
        raise DimensionMismatch(
            f"expected X (n, T, K) and y (n, T) with matching leading dims; "
            f"got {X.shape} and {y.shape}"
        )
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("panel arrays must be finite")
    return X, y


class TwfeEstimator(BaseEstimator):
    """Two-way fixed effects regression for balanced panels.

    Parameters
    ----------
    cluster_correction : bool, default=False
        Scale the covariance meat by n/(n-1).

    Attributes
    ----------
    beta_ : ndarray of shape (K,)
    vcov_ : ndarray of shape (K, K)
        Cluster-by-unit robust covariance.
    bse_ : ndarray of shape (K,)
    residuals_ : ndarray of shape (n, T)
        Within-transformed residuals.
    """

    def __init__(self, cluster_correction=False):
        self.cluster_correction = cluster_correction

    def fit(self, X, y):
        X, y = check_panel_arrays(X, y)
        panel = PanelDataset.from_arrays(y, X)
        res = twfe_fit(panel, cluster_correction=self.cluster_correction)
        self.beta_ = res.beta
        self.vcov_ = res.vcov
        self.bse_ = res.beta_se
        self.residuals_ = res.residuals
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "beta_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        return X @ self.beta_


class PieEstimator(BaseEstimator):
    """Projection-based interactive-effects regression for short panels.

    Augments the panel regression with per-period interactions between
    estimated factor loadings and the projection of the unit effect on
    the full regressor stack, then solves the resulting nonlinear least
    squares by alternating closed-form steps.

    Parameters
    ----------
    q : int, default=1
        Number of factors.
    tol : float, default=1e-8
        Max-norm convergence threshold on the coefficient change.
    max_iter : int, default=1000
    init : {'twfe', 'random'}, default='twfe'
        First start; additional starts are seeded random draws.
    n_starts : int, default=1
    seed : int, default=0
    prune_tol : float, default=1e-10
        Relative tolerance for pruning collinear stack columns.
    compute_vcov : bool, default=True
        Attach the sandwich covariance after fitting.

    Attributes
    ----------
    beta_ : ndarray of shape (K,)
    theta_ : ndarray of shape (m, q)
        Projection coefficients, rows labeled by ``column_map_``.
    loadings_ : FactorLoadings
    objective_ : float
    objective_trace_ : ndarray
    n_iter_ : int
    converged_ : bool
    vcov_ : ndarray of shape (p, p) or None
        Sandwich covariance of the full parameter vector.
    bse_ : ndarray of shape (K,) or None
    residuals_ : ndarray of shape (n, T)
    column_map_ : tuple of (period_label, k)
    ident_ : IdentificationReport
    """

    def __init__(self, q=1, tol=1e-8, max_iter=1000, init="twfe", n_starts=1,
                 seed=0, prune_tol=DEFAULT_PRUNE_TOL, compute_vcov=True):
        self.q = q
        self.tol = tol
        self.max_iter = max_iter
        self.init = init
        self.n_starts = n_starts
        self.seed = seed
        self.prune_tol = prune_tol
        self.compute_vcov = compute_vcov

    def _options(self) -> FitOptions:
        return FitOptions(
            tol=self.tol, max_iter=self.max_iter, init=self.init,
            n_starts=self.n_starts, seed=self.seed,
        )

    def fit(self, X, y):
        X, y = check_panel_arrays(X, y)
        panel = PanelDataset.from_arrays(y, X)
        dp = cross_section_demean(panel, self.prune_tol)
        self.ident_ = identification_check(dp.T, self.q, dp.m, dp.K)
        est = pie_fit(panel, self.q, self._options(), dp=dp)
        self.beta_ = est.beta
        self.theta_ = est.theta
        self.loadings_ = est.loadings
        self.objective_ = est.objective
        self.objective_trace_ = est.objective_trace
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        self.residuals_ = est.residuals
        self.column_map_ = dp.column_map
        self.n_features_in_ = dp.K
        if self.compute_vcov:
            sandwich = attach_vcov(dp, est)
            self.vcov_ = sandwich.cov
            self.bse_ = sandwich.beta_se[: dp.K]
        else:
            self.vcov_ = None
            self.bse_ = None
        return self

    def predict(self, X):
        check_is_fitted(self, "beta_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        return X @ self.beta_


class LsFactorEstimator(BaseEstimator):
    """Least-squares factor regression (large-T comparator).

    Same alternating loop as :class:`PieEstimator` but extracts loadings
    from the unprojected residual cross-product; consistent only as the
    panel length grows.

    Attributes
    ----------
    beta_, loadings_, objective_, objective_trace_, n_iter_, converged_,
    residuals_ : as in :class:`PieEstimator` (no theta, no vcov).
    """

    def __init__(self, q=1, tol=1e-8, max_iter=1000, init="twfe", n_starts=1,
                 seed=0, prune_tol=DEFAULT_PRUNE_TOL):
        self.q = q
        self.tol = tol
        self.max_iter = max_iter
        self.init = init
        self.n_starts = n_starts
        self.seed = seed
        self.prune_tol = prune_tol

    def fit(self, X, y):
        X, y = check_panel_arrays(X, y)
        panel = PanelDataset.from_arrays(y, X)
        opts = FitOptions(
            tol=self.tol, max_iter=self.max_iter, init=self.init,
            n_starts=self.n_starts, seed=self.seed,
        )
        est = ls_factor_fit(panel, self.q, opts, prune_tol=self.prune_tol)
        self.beta_ = est.beta
        self.loadings_ = est.loadings
        self.objective_ = est.objective
        self.objective_trace_ = est.objective_trace
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        self.residuals_ = est.residuals
        self.n_features_in_ = panel.K
        return self

    def predict(self, X):
        check_is_fitted(self, "beta_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        return X @ self.beta_
