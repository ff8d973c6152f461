"""Shared data constructions for the test suite."""

import numpy as np
import pytest

from piepanel import PanelDataset


def make_noisy_ie_panel(n=60, T=4, K=2, q=1, seed=0, noise=0.5, factor_scale=2.0):
    """Interactive-effects panel with projection residual and noise.

    The unit effect correlates with both regressors; one regressor's
    covariance with the effect declines over time, so the within
    estimator is biased for that coefficient.
    """
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal((n, q))
    phi = 1.0 - (np.arange(1, T + 1) - 1) / T
    X = np.empty((n, T, K))
    X[:, :, 0] = eta[:, 0:1] + rng.standard_normal((n, T))
    for k in range(1, K):
        X[:, :, k] = phi[None, :] * eta[:, 0:1] + rng.standard_normal((n, T))
    beta0 = np.array([(-1.0) ** k for k in range(K)]) * 1.0
    loading = factor_scale * phi[:, None] * np.ones((T, q))
    y = X @ beta0 + eta @ loading.T + noise * rng.standard_normal((n, T))
    return PanelDataset.from_arrays(y, X), beta0


def make_exact_ie_panel(n=80, T=4, K=2, q=1, seed=0, theta_scale=1.0, lam2=None):
    """Panel with an exact interactive-effects representation.

    The factor component is built from the in-sample demeaned regressor
    stack, so the fit objective has an exact zero at the returned
    parameters.  Returns (panel, beta0, lam0, theta0) with lam0 in
    identity-block form and theta0 in the matching coordinates.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, T, K))
    beta0 = rng.standard_normal(K)
    z = X.reshape(n, T * K)
    zd = z - z.mean(axis=0, keepdims=True)
    theta0 = theta_scale * rng.standard_normal((T * K, q))
    if lam2 is None:
        lam2 = rng.standard_normal((T - q, q))
    lam0 = np.vstack([np.eye(q), np.asarray(lam2, dtype=float)])
    y = X @ beta0 + (zd @ theta0) @ lam0.T
    return PanelDataset.from_arrays(y, X), beta0, lam0, theta0


def make_exact_model1_panel(n=200, T=4, seed=0, factor_scale=2.0):
    """Two-regressor design whose factor is the exact in-sample projection
    of the unit effect on the regressor stack (so recovery is exact).

    Returns (panel, beta0, lam0, theta0).
    """
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(n)
    phi = 1.0 - (np.arange(1, T + 1) - 1) / T
    x1 = eta[:, None] + rng.standard_normal((n, T))
    x2 = phi[None, :] * eta[:, None] + rng.standard_normal((n, T))
    X = np.stack([x1, x2], axis=2)
    z = X.reshape(n, 2 * T)
    zd = z - z.mean(axis=0, keepdims=True)
    proj, *_ = np.linalg.lstsq(zd, eta, rcond=None)
    eta_fit = zd @ proj
    beta0 = np.array([-1.0, 1.0])
    y = X @ beta0 + factor_scale * phi[None, :] * eta_fit[:, None]
    lam0 = (phi / phi[0])[:, None]
    theta0 = (factor_scale * phi[0] * proj)[:, None]
    return PanelDataset.from_arrays(y, X), beta0, lam0, theta0


def make_additive_panel(n=40, T=3, K=2, seed=0, noise=0.0, effects_in_span=False):
    """Additive-effects panel: unit plus period effects, optional noise.

    With ``effects_in_span`` the unit effect is an exact function of the
    regressor stack, so the projection fit is exact as well.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, T, K))
    beta0 = np.arange(1, K + 1) * (-1.0) ** np.arange(K)
    delta = rng.standard_normal(T)
    if effects_in_span:
        z = X.reshape(n, T * K)
        zd = z - z.mean(axis=0, keepdims=True)
        kappa = zd @ rng.standard_normal(T * K)
    else:
        kappa = rng.standard_normal(n)
    y = X @ beta0 + delta[None, :] + kappa[:, None] + noise * rng.standard_normal((n, T))
    return PanelDataset.from_arrays(y, X), beta0


@pytest.fixture
def small_panel():
    panel, beta0 = make_noisy_ie_panel(n=60, T=4, K=2, seed=3)
    return panel, beta0
