"""Independent oracles used to pin expected values in the tests.

Each oracle follows a different computational route than the code under
test: dummy-variable least squares for the within estimator, a cyclic
Jacobi rotation eigensolver, a generic multi-start nonlinear
least-squares minimizer over the raw parameter vector, a power-series
incomplete gamma, and naive elementwise loops for objectives.
"""

import math

import numpy as np
from scipy.optimize import least_squares


def lsdv_beta(panel):
    """Within coefficients by pooled OLS on unit and period dummies."""
    n, T, K = panel.n, panel.T, panel.K
    y = panel.y.reshape(n * T)
    cols = [panel.X[:, :, k].reshape(n * T) for k in range(K)]
    for i in range(1, n):
        d = np.zeros((n, T))
        d[i, :] = 1.0
        cols.append(d.reshape(n * T))
    for t in range(1, T):
        d = np.zeros((n, T))
        d[:, t] = 1.0
        cols.append(d.reshape(n * T))
    cols.append(np.ones(n * T))
    design = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[:K]


def jacobi_eigh(matrix, tol=1e-14, max_sweeps=200):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue,
    eigenvector columns sign-fixed so the largest-magnitude entry is
    positive.
    """
    A = np.array(matrix, dtype=float)
    sz = A.shape[0]
    V = np.eye(sz)
    scale = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(sz) for j in range(sz) if i != j))
        if off <= tol * max(scale, 1.0):
            break
        for p in range(sz - 1):
            for q in range(p + 1, sz):
                if abs(A[p, q]) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                if tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(sz)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                A = rot.T @ A @ rot
                V = V @ rot
    vals = np.diag(A).copy()
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], V[:, order]
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(sz)])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def direct_nls_minimum(dp, q, n_starts=12, seed=0, scale=1.0):
    """Multi-start generic minimizer of the fit objective over the raw
    parameter vector (coefficients, projection matrix, free loadings).

    Returns (best objective, best beta).
    """
    n, T, K, m = dp.n, dp.T, dp.K, dp.m
    sqrt_n = math.sqrt(n)

    def residuals(psi):
        beta = psi[:K]
        theta = psi[K:K + m * q].reshape(m, q, order="F")
        lam2 = psi[K + m * q:].reshape(T - q, q, order="F")
        lam = np.vstack([np.eye(q), lam2])
        r = dp.y_dot - dp.X_dot @ beta - (dp.z_dot @ theta) @ lam.T
        return r.reshape(-1) / sqrt_n

    p = K + m * q + (T - q) * q
    best_cost, best_beta = np.inf, None
    rng = np.random.default_rng(seed)
    for _ in range(n_starts):
        psi0 = rng.standard_normal(p) * scale
        sol = least_squares(residuals, psi0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if sol.cost < best_cost:
            best_cost, best_beta = sol.cost, sol.x[:K]
    return best_cost, best_beta


def gamma_p_series_oracle(a, x, terms=300):
    """Regularized lower incomplete gamma by direct power series."""
    total = 0.0
    term = 1.0 / a
    for k in range(terms):
        if k > 0:
            term *= x / (a + k)
        total += term
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def naive_objective(dp, beta, theta, lam):
    """Elementwise-loop evaluation of half the average squared residual."""
    n, T = dp.n, dp.T
    total = 0.0
    for i in range(n):
        for t in range(T):
            fitted = 0.0
            for k in range(dp.K):
                fitted += dp.X_dot[i, t, k] * beta[k]
            for j in range(lam.shape[1]):
                zc = 0.0
                for c in range(dp.m):
                    zc += dp.z_dot[i, c] * theta[c, j]
                fitted += lam[t, j] * zc
            total += (dp.y_dot[i, t] - fitted) ** 2
    return 0.5 * total / n
