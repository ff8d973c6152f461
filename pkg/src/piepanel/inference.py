"""Robust inference for the interactive-effects fit and the TWFE
consistency test.

Standard errors come from a cluster-by-unit sandwich built on per-unit
score regressor matrices.  Stacking those matrices block-diagonally with
the within-transformed regressors yields the joint covariance of the
interactive-effects and TWFE coefficient estimates, from which a
chi-square contrast statistic tests whether TWFE is consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import PieEstimate, TwfeEstimate, _within_matrix
from .exceptions import DimensionMismatch, SingularContrastCov, SingularH
from .panel import DemeanedPanel

CONTRAST_RCOND = 1e-10


@dataclass(frozen=True)
class ScoreMatrixSet:
    """Per-unit score regressors and residuals.

    ``R_hat[i]`` is the T x p score regressor matrix of unit ``i`` with
    column blocks (regressors | stack interactions | free loadings), where
    ``p = K + q*(m + T - q)``.  ``R_plus[i]`` block-diagonally appends the
    within-transformed regressors, and ``u_plus[i]`` appends the demeaned
    residual at the auxiliary coefficient ``b``.
    """

    R_hat: np.ndarray   # (n, T, p)
    R_plus: np.ndarray  # (n, 2T, p+K)
    u_hat: np.ndarray   # (n, T)
    u_plus: np.ndarray  # (n, 2T)

    @property
    def n(self) -> int:
        return self.R_hat.shape[0]

    @property
    def p(self) -> int:
        return self.R_hat.shape[2]


@dataclass(frozen=True)
class SandwichCovariance:
    """Sandwich covariance with its bread and meat components."""

    H: np.ndarray    # average score Gram
    A: np.ndarray    # average score outer product
    cov: np.ndarray  # H^-1 A H^-1 / n

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class SpecTestResult:
    """TWFE-consistency contrast test."""

    statistic: float
    df: int
    p_value: float
    contrast: np.ndarray      # beta (interactive effects) - beta (TWFE)
    contrast_cov: np.ndarray  # K x K covariance of the contrast


def build_scores(
    dp: DemeanedPanel, est: PieEstimate, b: np.ndarray
) -> ScoreMatrixSet:
    """Assemble per-unit score regressors at a fitted estimate.

    ``b`` is an auxiliary consistent coefficient estimate (TWFE or the
    interactive-effects estimate itself) used only in the appended
    residual block.
    """
    if est.theta is None:
        raise DimensionMismatch(
            "estimate carries no projection coefficients; scores are only "
            "defined for the projection-based fit"
        )
    n, T, m, K, q = dp.n, dp.T, dp.m, dp.K, est.q
    if est.loadings.T != T:
        raise DimensionMismatch("estimate and panel disagree on T")
    theta = np.asarray(est.theta, dtype=float).reshape(m, q)
    b = np.asarray(b, dtype=float)
    if b.shape != (K,):
        raise DimensionMismatch(f"b must have shape ({K},), got {b.shape}")
    lam2 = est.loadings.lambda2                 # (T-q, q)
    p = K + q * m + (T - q) * q

    R = np.zeros((n, T, p))
    R[:, :, :K] = dp.X_dot
    # stack-interaction block: row t<q has z' in slot j=t; below, lam2-weighted.
    for j in range(q):
        cols = slice(K + j * m, K + (j + 1) * m)
        R[:, j, cols] = dp.z_dot
        for r in range(T - q):
            R[:, q + r, cols] = lam2[r, j] * dp.z_dot
    # free-loading block: (z'theta_j) placed on the identity pattern.
    w = dp.z_dot @ theta                        # (n, q)
    for j in range(q):
        for r in range(T - q):
            R[:, q + r, K + q * m + j * (T - q) + r] = w[:, j]

    u_hat = np.asarray(est.residuals, dtype=float)
    if u_hat.shape != (n, T):
        raise DimensionMismatch("residual shape does not match the panel")
    resid_b = dp.y_dot - dp.X_dot @ b           # (n, T)

    Q = _within_matrix(T)
    QX = np.einsum("ts,nsk->ntk", Q, dp.X_dot)
    R_plus = np.zeros((n, 2 * T, p + K))
    R_plus[:, :T, :p] = R
    R_plus[:, T:, p:] = QX
    u_plus = np.concatenate([u_hat, resid_b], axis=1)
    return ScoreMatrixSet(R_hat=R, R_plus=R_plus, u_hat=u_hat, u_plus=u_plus)


def _sandwich(
    R: np.ndarray, u: np.ndarray, *, cluster_correction: bool, context: str
) -> SandwichCovariance:
    n = R.shape[0]
    H = np.einsum("ntp,ntr->pr", R, R) / n
    s = np.einsum("ntp,nt->np", R, u)
    A = s.T @ s / n
    if cluster_correction:
        A = A * (n / (n - 1))
    eig = np.linalg.eigvalsh(H)
    if eig[0] <= 0:
        raise SingularH(
            f"{context} score Gram is not positive definite "
            f"(min eigenvalue {eig[0]:.3e}); the model is not locally "
            "identified at this estimate"
        )
    Hinv_A = np.linalg.solve(H, A)
    cov = np.linalg.solve(H, Hinv_A.T) / n
    return SandwichCovariance(H=(H + H.T) / 2.0, A=(A + A.T) / 2.0, cov=(cov + cov.T) / 2.0)


def pie_vcov(
    scores: ScoreMatrixSet, *, cluster_correction: bool = False
) -> SandwichCovariance:
    """Sandwich covariance of the full interactive-effects parameter vector.

    The first K diagonal entries of ``cov`` give squared coefficient
    standard errors.  No small-sample correction is applied unless
    ``cluster_correction`` is set (then the meat is scaled by n/(n-1)).
    """
    return _sandwich(
        scores.R_hat, scores.u_hat,
        cluster_correction=cluster_correction, context="projection-fit",
    )


def joint_vcov(
    scores: ScoreMatrixSet, dp: DemeanedPanel, *, cluster_correction: bool = False
) -> np.ndarray:
    """(p+K) x (p+K) joint covariance of the stacked estimates.

    The bread is block-diagonal by construction; the bottom-right K x K
    block of the result is the cluster-robust TWFE covariance.
    """
    return _sandwich(
        scores.R_plus, scores.u_plus,
        cluster_correction=cluster_correction, context="joint",
    ).cov


def hausman_test(
    pie: PieEstimate, twfe: TwfeEstimate, jcov: np.ndarray
) -> SpecTestResult:
    """Contrast test of TWFE consistency against the interactive-effects fit.

    Rejects when the scaled quadratic form of the coefficient contrast in
    its estimated covariance is large relative to a chi-square with K
    degrees of freedom.  Defined for a single factor only.
    """
    if pie.q != 1:
        raise ValueError(
            "the TWFE-consistency test is defined only for a single factor (q=1); "
            f"got q={pie.q}"
        )
    K = twfe.beta.size
    p = jcov.shape[0] - K
    if jcov.shape != (p + K, p + K) or pie.beta.size != K or p < K:
        raise DimensionMismatch("joint covariance does not match the estimates")
    contrast = pie.beta - twfe.beta
    ccov = jcov[:K, :K] - jcov[:K, p:] - jcov[p:, :K] + jcov[p:, p:]
    ccov = (ccov + ccov.T) / 2.0
    eig = np.linalg.eigvalsh(ccov)
    if eig[0] <= 0 or eig[0] / eig[-1] < CONTRAST_RCOND:
        raise SingularContrastCov(
            "contrast covariance is numerically singular; the test abstains"
        )
    statistic = float(contrast @ np.linalg.solve(ccov, contrast))
    return SpecTestResult(
        statistic=statistic,
        df=int(K),
        p_value=chi_square_sf(statistic, int(K)),
        contrast=contrast,
        contrast_cov=ccov,
    )


def chi_square_sf(x: float, df: int) -> float:
    """Upper-tail probability of a chi-square with ``df`` degrees of freedom.

    Evaluates the regularized upper incomplete gamma Q(df/2, x/2) by its
    power series for small arguments and a continued fraction otherwise;
    absolute error below 1e-10.
    """
    if x < 0:
        raise ValueError("x must be nonnegative")
    if df < 1:
        raise ValueError("df must be at least 1")
    a = df / 2.0
    s = x / 2.0
    if s == 0.0:
        return 1.0
    if s < a + 1.0:
        return 1.0 - _gamma_p_series(a, s)
    return _gamma_q_contfrac(a, s)


def _gamma_p_series(a: float, x: float, itmax: int = 500, eps: float = 1e-15) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(itmax):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * eps:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float, itmax: int = 500, eps: float = 1e-15) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, itmax + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


# ---------------------------------------------------------------------------
# Orchestration helpers
# ---------------------------------------------------------------------------

def attach_vcov(
    dp: DemeanedPanel,
    est: PieEstimate,
    b: np.ndarray | None = None,
    *,
    cluster_correction: bool = False,
) -> SandwichCovariance:
    """Compute the sandwich covariance and store it on the estimate."""
    scores = build_scores(dp, est, est.beta if b is None else b)
    sandwich = pie_vcov(scores, cluster_correction=cluster_correction)
    est.vcov = sandwich.cov
    return sandwich


def consistency_test(
    dp: DemeanedPanel,
    pie: PieEstimate,
    twfe: TwfeEstimate,
    *,
    residual_beta: str = "twfe",
    cluster_correction: bool = False,
) -> SpecTestResult:
    """Run the full TWFE-consistency test pipeline on fitted estimates.

    ``residual_beta`` picks the coefficient used to center the appended
    residual block: ``"twfe"`` (default) or ``"pie"``.
    """
    if residual_beta not in ("twfe", "pie"):
        raise ValueError(f"residual_beta must be 'twfe' or 'pie', got {residual_beta!r}")
    b = twfe.beta if residual_beta == "twfe" else pie.beta
    scores = build_scores(dp, pie, b)
    jcov = joint_vcov(scores, dp, cluster_correction=cluster_correction)
    return hausman_test(pie, twfe, jcov)
