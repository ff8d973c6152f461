"""Panel estimators: the two-way fixed effects (TWFE) estimator, the
projection-based interactive-effects (PIE) estimator, and the large-T
least-squares factor comparator.

The PIE estimator solves a nonlinear least-squares problem in
``(beta, theta, lambda)`` by alternating two closed-form steps:

* loading step: given ``beta``, the optimal orthonormal loadings are the
  top-``q`` eigenvectors of the T x T matrix ``E' P_z E``, where ``E`` is
  the n x T residual matrix and ``P_z`` projects onto the regressor stack;
* coefficient step: given loadings, ``beta`` is generalized-within least
  squares with the projector off the loading space.

The comparator runs the identical loop with ``E'E`` in place of
``E' P_z E``.  Both loops monotonically decrease the objective.  All
projections are computed column-by-column from least-squares fits; no
n x n or nT x nT matrix is ever materialized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (
    DegenerateSpectrumWarning,
    DimensionMismatch,
    NormalizationSingular,
    NotIdentified,
    SingularDesign,
    SingularProjection,
)
from .panel import (
    DEFAULT_PRUNE_TOL,
    DemeanedPanel,
    PanelDataset,
    cross_section_demean,
    identification_check,
)

SINGULAR_DESIGN_RCOND = 1e-12
NORMALIZATION_RCOND = 1e-10
DEGENERATE_GAP = 1e-12


# ---------------------------------------------------------------------------
# Loadings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorLoadings:
    """A T x q loadings matrix in orthonormal and identity-block forms.

    ``orthonormal`` always exists and spans the loading space.
    ``normalized`` has its first ``q`` rows fixed to the identity; it is
    ``None`` when the leading q x q block of the orthonormal form is too
    ill-conditioned to invert.
    """

    orthonormal: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self):
        orth = np.array(self.orthonormal, dtype=float)
        if orth.ndim != 2 or orth.shape[0] <= orth.shape[1]:
            raise DimensionMismatch(
                f"loadings must be T x q with q < T, got shape {orth.shape}"
            )
        gram = orth.T @ orth
        if np.max(np.abs(gram - np.eye(orth.shape[1]))) > 1e-10:
            raise ValueError("orthonormal loadings are not orthonormal")
        orth.flags.writeable = False
        object.__setattr__(self, "orthonormal", orth)
        if self.normalized is not None:
            norm = np.array(self.normalized, dtype=float)
            if norm.shape != orth.shape:
                raise DimensionMismatch("normalized and orthonormal shapes differ")
            q = orth.shape[1]
            if np.max(np.abs(norm[:q] - np.eye(q))) != 0.0:
                raise ValueError("normalized loadings must start with the identity block")
            if subspace_angle(norm, orth) > 1e-8:
                raise ValueError("normalized and orthonormal forms span different spaces")
            norm.flags.writeable = False
            object.__setattr__(self, "normalized", norm)

    @property
    def T(self) -> int:
        return self.orthonormal.shape[0]

    @property
    def q(self) -> int:
        return self.orthonormal.shape[1]

    @property
    def lambda2(self) -> np.ndarray:
        """The free (T-q) x q block below the identity rows."""
        if self.normalized is None:
            raise NormalizationSingular(
                "identity-block normalization unavailable: leading block singular"
            )
        return self.normalized[self.q:]

    @property
    def lambda_vec(self) -> np.ndarray:
        """Free normalized entries, column-major, length (T-q)*q."""
        return self.lambda2.flatten(order="F")

    @classmethod
    def from_orthonormal(cls, orth: np.ndarray) -> "FactorLoadings":
        """Wrap an orthonormal T x q matrix, deriving the normalized form.

        The normalized form is left unset when the leading q x q block has
        reciprocal condition number below ``NORMALIZATION_RCOND``.
        """
        orth = np.asarray(orth, dtype=float)
        q = orth.shape[1]
        lead = orth[:q, :]
        sv = np.linalg.svd(lead, compute_uv=False)
        if sv[0] <= 0 or sv[-1] / sv[0] < NORMALIZATION_RCOND:
            return cls(orthonormal=orth, normalized=None)
        norm = orth @ np.linalg.inv(lead)
        norm[:q] = np.eye(q)
        return cls(orthonormal=orth, normalized=norm)

    @classmethod
    def from_normalized(cls, norm: np.ndarray) -> "FactorLoadings":
        """Wrap an identity-block T x q matrix, deriving the orthonormal form."""
        norm = np.array(np.asarray(norm, dtype=float), copy=True)
        q = norm.shape[1]
        if np.max(np.abs(norm[:q] - np.eye(q))) > 1e-10:
            raise ValueError("first q rows must equal the identity")
        norm[:q] = np.eye(q)
        orth, _ = np.linalg.qr(norm)
        orth = _fix_column_signs(orth)
        return cls(orthonormal=orth, normalized=norm)

    @classmethod
    def from_vector(cls, lambda_vec: np.ndarray, T: int, q: int) -> "FactorLoadings":
        """Build from the free normalized entries (column-major)."""
        lam2 = np.asarray(lambda_vec, dtype=float).reshape((T - q, q), order="F")
        return cls.from_normalized(np.vstack([np.eye(q), lam2]))

    @classmethod
    def ones(cls, T: int) -> "FactorLoadings":
        """The q=1 all-ones loading whose projector is the within transform."""
        return cls(
            orthonormal=np.full((T, 1), 1.0 / np.sqrt(T)),
            normalized=np.ones((T, 1)),
        )


def subspace_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Largest principal angle (radians) between the column spaces of a, b.

    Computed through its sine, which stays accurate for nearly equal
    spaces where the cosine formulation loses half the digits.
    """
    qa, _ = np.linalg.qr(np.asarray(a, dtype=float))
    qb, _ = np.linalg.qr(np.asarray(b, dtype=float))
    resid = qb - qa @ (qa.T @ qb)
    sv = np.linalg.svd(resid, compute_uv=False)
    return float(np.arcsin(np.clip(sv.max(initial=0.0), 0.0, 1.0)))


def _fix_column_signs(V: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry positive."""
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def top_eigenpairs(matrix: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``q`` eigenpairs of a symmetric matrix, eigenvalues descending.

    Columns are sign-fixed (largest-magnitude entry positive).  Warns with
    :class:`DegenerateSpectrumWarning` when eigenvalues ``q`` and ``q+1``
    differ by less than ``DEGENERATE_GAP``: the extracted space is then
    not unique.
    """
    matrix = np.asarray(matrix, dtype=float)
    T = matrix.shape[0]
    if not 1 <= q <= T:
        raise ValueError(f"need 1 <= q <= {T}, got q={q}")
    vals, vecs = np.linalg.eigh(matrix)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if q < T and vals[q - 1] - vals[q] < DEGENERATE_GAP:
        warnings.warn(
            f"eigenvalues {q} and {q + 1} are numerically tied "
            f"(gap {vals[q - 1] - vals[q]:.2e}); loading space not unique",
            DegenerateSpectrumWarning,
            stacklevel=2,
        )
    return vals[:q].copy(), _fix_column_signs(vecs[:, :q])


# ---------------------------------------------------------------------------
# Fit results and options
# ---------------------------------------------------------------------------

@dataclass
class TwfeEstimate:
    """TWFE coefficients with a cluster-by-unit sandwich covariance."""

    beta: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray  # (n, T), within-transformed residuals

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))


@dataclass
class PieEstimate:
    """Result of an alternating interactive-effects fit.

    ``theta`` is reported in identity-block loading coordinates and is
    ``None`` for the least-squares factor comparator, which involves no
    regressor-stack projection.  ``vcov`` (covariance of the full
    parameter vector) is filled by the inference module.
    """

    beta: np.ndarray
    loadings: FactorLoadings
    theta: np.ndarray | None
    objective: float
    iterations: int
    converged: bool
    objective_trace: np.ndarray
    residuals: np.ndarray  # (n, T)
    method: str = "pie"
    vcov: np.ndarray | None = None

    @property
    def q(self) -> int:
        return self.loadings.q

    @property
    def beta_se(self) -> np.ndarray:
        if self.vcov is None:
            raise ValueError("vcov has not been attached; see piepanel.inference")
        return np.sqrt(np.diag(self.vcov)[: self.beta.size])


@dataclass(frozen=True)
class FitOptions:
    """Controls for the alternating fit.

    ``tol`` is the max-norm threshold on the coefficient change between
    iterations.  ``init`` is ``"twfe"`` or ``"random"``; with more than
    one start, the first start follows ``init`` and the rest are seeded
    random draws, and the run with the smallest final objective wins.
    """

    tol: float = 1e-8
    max_iter: int = 1000
    init: str = "twfe"
    n_starts: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.init not in ("twfe", "random"):
            raise ValueError(f"init must be 'twfe' or 'random', got {self.init!r}")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if not (isinstance(self.seed, (int, np.integer)) and self.seed >= 0):
            raise ValueError("seed must be a nonnegative integer")


# ---------------------------------------------------------------------------
# Core linear-algebra steps
# ---------------------------------------------------------------------------

def _solve_symmetric(
    A: np.ndarray, b: np.ndarray, context: str, scale: float | None = None
) -> np.ndarray:
    """Solve a symmetric PSD system, rejecting numerically singular ones.

    ``scale`` anchors the condition check at the magnitude the Gram would
    have without projection cancellation, so a regressor annihilated by
    the transform is caught even when K = 1.
    """
    eig = np.linalg.eigvalsh(A)
    ref = max(eig[-1], scale if scale is not None else 0.0, np.finfo(float).tiny)
    if eig[0] <= 0 or eig[0] / ref < SINGULAR_DESIGN_RCOND:
        raise SingularDesign(
            f"{context} Gram matrix is numerically singular "
            f"(reciprocal condition {max(eig[0], 0.0) / ref:.2e})"
        )
    return np.linalg.solve(A, b)


def generalized_within(loadings: FactorLoadings) -> np.ndarray:
    """T x T projector off the loading space; the within matrix at ones."""
    orth = loadings.orthonormal
    Q = np.eye(loadings.T) - orth @ orth.T
    return (Q + Q.T) / 2.0


def _within_matrix(T: int) -> np.ndarray:
    return np.eye(T) - np.full((T, T), 1.0 / T)


def _gls_beta(dp: DemeanedPanel, Q: np.ndarray) -> np.ndarray:
    XQ = np.einsum("ntk,ts->nsk", dp.X_dot, Q)
    A = np.einsum("nsk,nsl->kl", XQ, dp.X_dot)
    b = np.einsum("nsk,ns->k", XQ, dp.y_dot)
    scale = float(np.einsum("ntk,ntk->", dp.X_dot, dp.X_dot)) / dp.K
    return _solve_symmetric(A, b, "generalized within", scale=scale)


def beta_step(dp: DemeanedPanel, loadings: FactorLoadings) -> np.ndarray:
    """Generalized-within least squares for the regression coefficients.

    Returns the minimizer of the concentrated objective at the given
    loadings; with all-ones loadings this is exactly the TWFE estimate.
    """
    return _gls_beta(dp, generalized_within(loadings))


def _residual_matrix(dp: DemeanedPanel, beta: np.ndarray) -> np.ndarray:
    return dp.y_dot - dp.X_dot @ beta


def lambda_step(
    dp: DemeanedPanel, beta: np.ndarray, q: int, *, use_projection: bool = True
) -> FactorLoadings:
    """Optimal loadings at fixed coefficients.

    Forms the T x T matrix ``E' P_z E`` (or ``E'E`` when
    ``use_projection`` is false, the large-T comparator variant) from
    least-squares fitted values of the residual columns on the regressor
    stack, and extracts its top-``q`` eigenvectors.
    """
    if not 1 <= q < dp.T:
        raise ValueError(f"need 1 <= q < T, got q={q}, T={dp.T}")
    E = _residual_matrix(dp, np.asarray(beta, dtype=float))
    if use_projection:
        G = dp.z_basis.T @ E
        sigma = G.T @ G
    else:
        sigma = E.T @ E
    _, vecs = top_eigenpairs(sigma, q)
    return FactorLoadings.from_orthonormal(vecs)


def _concentrated_objective(
    dp: DemeanedPanel, beta: np.ndarray, orth: np.ndarray, use_projection: bool
) -> float:
    """Objective with the projection coefficients minimized out."""
    E = _residual_matrix(dp, beta)
    total = float(np.sum(E * E))
    if use_projection:
        captured = float(np.sum((dp.z_basis.T @ E @ orth) ** 2))
    else:
        captured = float(np.sum((E @ orth) ** 2))
    return (total - captured) / (2.0 * dp.n)


def theta_recover(
    dp: DemeanedPanel, loadings: FactorLoadings, form: str = "normalized"
) -> np.ndarray:
    """Projection coefficients (m x q) for given loadings.

    Solves the partialled least-squares system in which every column of
    the stacked interaction design ``z (x) loadings`` and the stacked
    outcome are first residualized on the stacked regressors.  ``form``
    chooses the loading coordinates ('normalized' or 'orthonormal'); the
    fitted values are identical either way.
    """
    if form == "normalized":
        lam = loadings.normalized
        if lam is None:
            raise NormalizationSingular(
                "identity-block normalization unavailable: leading block singular"
            )
    elif form == "orthonormal":
        lam = loadings.orthonormal
    else:
        raise ValueError(f"form must be 'normalized' or 'orthonormal', got {form!r}")
    if loadings.T != dp.T:
        raise DimensionMismatch("loadings and panel disagree on T")
    n, T, m, q = dp.n, dp.T, dp.m, loadings.q
    W = np.kron(dp.z_dot, lam)                       # (n*T, m*q)
    y_stacked = dp.y_dot.reshape(n * T)
    Xs = dp.x_stacked
    coef, *_ = np.linalg.lstsq(Xs, np.column_stack([W, y_stacked]), rcond=None)
    MW = W - Xs @ coef[:, :-1]
    My = y_stacked - Xs @ coef[:, -1]
    gram = MW.T @ MW
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0 or eig[0] / eig[-1] < SINGULAR_DESIGN_RCOND:
        raise SingularProjection(
            "residualized interaction design is numerically singular"
        )
    theta_rowvec = np.linalg.solve(gram, MW.T @ My)
    return theta_rowvec.reshape(m, q)                # row-major: (z column, factor)


def nls_objective(
    dp: DemeanedPanel,
    beta: np.ndarray,
    theta: np.ndarray,
    loadings: FactorLoadings | np.ndarray,
) -> float:
    """Mean squared-error objective (half the average squared residual norm).

    ``loadings`` may be a :class:`FactorLoadings` (its normalized form is
    used when available) or a raw T x q matrix.  ``theta`` must be in the
    matching coordinates.  The interaction term is evaluated through the
    vectorization identity as ``(z theta) loadings'``.
    """
    if isinstance(loadings, FactorLoadings):
        lam = loadings.normalized if loadings.normalized is not None else loadings.orthonormal
    else:
        lam = np.asarray(loadings, dtype=float)
    theta = np.asarray(theta, dtype=float).reshape(dp.m, lam.shape[1])
    resid = dp.y_dot - dp.X_dot @ np.asarray(beta, dtype=float) - (dp.z_dot @ theta) @ lam.T
    return float(np.sum(resid * resid)) / (2.0 * dp.n)


# ---------------------------------------------------------------------------
# TWFE
# ---------------------------------------------------------------------------

def _twfe_core(
    y_dot: np.ndarray, X_dot: np.ndarray, *, cluster_correction: bool = False
) -> TwfeEstimate:
    n, T = y_dot.shape
    Q = _within_matrix(T)
    XQ = np.einsum("ntk,ts->nsk", X_dot, Q)
    A = np.einsum("nsk,nsl->kl", XQ, X_dot)
    b = np.einsum("nsk,ns->k", XQ, y_dot)
    scale = float(np.einsum("ntk,ntk->", X_dot, X_dot)) / X_dot.shape[2]
    beta = _solve_symmetric(A, b, "within", scale=scale)
    resid_within = (y_dot - X_dot @ beta) @ Q
    scores = np.einsum("nsk,ns->nk", XQ, y_dot - X_dot @ beta)
    H = A / n
    meat = scores.T @ scores / n
    if cluster_correction:
        meat *= n / (n - 1)
    Hinv = np.linalg.inv(H)
    vcov = Hinv @ meat @ Hinv / n
    return TwfeEstimate(beta=beta, vcov=(vcov + vcov.T) / 2.0, residuals=resid_within)


def twfe_fit(
    panel: PanelDataset,
    *,
    cluster_correction: bool = False,
    dp: DemeanedPanel | None = None,
) -> TwfeEstimate:
    """Two-way fixed effects fit with cluster-by-unit robust covariance.

    Demeans per period, then applies within least squares; equals the
    dummy-variable least-squares estimator.  Raises
    :class:`SingularDesign` when a regressor has no within variation.
    """
    if dp is not None:
        return _twfe_core(dp.y_dot, dp.X_dot, cluster_correction=cluster_correction)
    y_dot = panel.y - panel.y.mean(axis=0, keepdims=True)
    X_dot = panel.X - panel.X.mean(axis=0, keepdims=True)
    return _twfe_core(y_dot, X_dot, cluster_correction=cluster_correction)


# ---------------------------------------------------------------------------
# Alternating fits
# ---------------------------------------------------------------------------

def _initial_betas(dp: DemeanedPanel, opts: FitOptions) -> list[np.ndarray]:
    starts: list[np.ndarray] = []
    if opts.init == "twfe":
        starts.append(_twfe_core(dp.y_dot, dp.X_dot).beta)
    rng_count = opts.n_starts - len(starts)
    for j in range(rng_count):
        rng = np.random.default_rng(np.random.SeedSequence((opts.seed, j)))
        starts.append(rng.standard_normal(dp.K))
    return starts


@dataclass
class _RunResult:
    beta: np.ndarray
    orth: np.ndarray
    trace: list[float]
    converged: bool


def _alternate(
    dp: DemeanedPanel, q: int, beta0: np.ndarray, opts: FitOptions, use_projection: bool
) -> _RunResult:
    beta = np.asarray(beta0, dtype=float)
    trace: list[float] = []
    converged = False
    orth = None
    for _ in range(opts.max_iter):
        loadings = lambda_step(dp, beta, q, use_projection=use_projection)
        orth = loadings.orthonormal
        beta_new = beta_step(dp, loadings)
        trace.append(_concentrated_objective(dp, beta_new, orth, use_projection))
        step = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        if step < opts.tol:
            converged = True
            break
    return _RunResult(beta=beta, orth=orth, trace=trace, converged=converged)


def _alternating_fit(
    dp: DemeanedPanel, q: int, opts: FitOptions, use_projection: bool
) -> PieEstimate:
    best: _RunResult | None = None
    for beta0 in _initial_betas(dp, opts):
        run = _alternate(dp, q, beta0, opts, use_projection)
        if best is None or run.trace[-1] < best.trace[-1]:
            best = run
    loadings = FactorLoadings.from_orthonormal(best.orth)
    if use_projection:
        if loadings.normalized is None:
            raise NormalizationSingular(
                "converged loadings have a singular leading block; "
                "the identity-block normalization is unavailable"
            )
        theta = theta_recover(dp, loadings, form="normalized")
        residuals = dp.y_dot - dp.X_dot @ best.beta - (dp.z_dot @ theta) @ loadings.normalized.T
        method = "pie"
    else:
        theta = None
        residuals = (dp.y_dot - dp.X_dot @ best.beta) @ generalized_within(loadings)
        method = "ls_factor"
    objective = float(np.sum(residuals * residuals)) / (2.0 * dp.n)
    return PieEstimate(
        beta=best.beta,
        loadings=loadings,
        theta=theta,
        objective=objective,
        iterations=len(best.trace),
        converged=best.converged,
        objective_trace=np.asarray(best.trace),
        residuals=residuals,
        method=method,
    )


def pie_fit(
    panel: PanelDataset,
    q: int,
    opts: FitOptions | None = None,
    prune_tol: float = DEFAULT_PRUNE_TOL,
    dp: DemeanedPanel | None = None,
) -> PieEstimate:
    """Projection-based interactive-effects fit.

    Demeans per period once, gates on the parameter-counting
    identification condition, then alternates the loading and coefficient
    steps until the coefficient change falls below ``opts.tol`` (or
    ``opts.max_iter`` is hit, in which case the result is returned with
    ``converged=False``).  Across multiple starts the run with the
    smallest final objective wins.  Iteration uses orthonormal loading
    coordinates; the identity-block normalization is applied once at the
    end.

    Pass a precomputed ``dp`` to reuse the demeaned panel across fits.

    Raises
    ------
    NotIdentified
        If the counting condition fails or n <= m.
    SingularDesign
        Propagated from the coefficient step.
    NormalizationSingular
        If the converged loadings cannot be normalized.
    """
    opts = opts or FitOptions()
    if dp is None:
        dp = cross_section_demean(panel, prune_tol)
    report = identification_check(dp.T, q, dp.m, dp.K)
    if not report.necessary_ok:
        raise NotIdentified(report.message)
    if not dp.n > dp.m:
        raise NotIdentified(
            f"projection infeasible: need n > m, got n={dp.n}, m={dp.m}"
        )
    return _alternating_fit(dp, q, opts, use_projection=True)


def ls_factor_fit(
    panel: PanelDataset,
    q: int,
    opts: FitOptions | None = None,
    prune_tol: float = DEFAULT_PRUNE_TOL,
    dp: DemeanedPanel | None = None,
) -> PieEstimate:
    """Large-T least-squares factor comparator.

    Identical loop to :func:`pie_fit` with the unprojected residual
    cross-product in the loading step.  Consistent only as T grows; no
    small-T bias correction is applied.  The identification gate reduces
    to ``1 <= q < T``; no projection coefficients are reported.
    """
    opts = opts or FitOptions()
    if dp is None:
        dp = cross_section_demean(panel, prune_tol)
    if not 1 <= q < dp.T:
        raise NotIdentified(f"need 1 <= q < T, got q={q}, T={dp.T}")
    return _alternating_fit(dp, q, opts, use_projection=False)
