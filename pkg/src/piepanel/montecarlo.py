"""Seeded data generators and a replication harness for the two
simulation designs, plus the closed-form large-n TWFE bias.

Randomness comes from counter-based streams keyed by
``(seed, rep_index, role)``: replication ``r`` produces identical data
regardless of worker count or scheduling, and normal variates are drawn
by inverse-CDF from the uniform stream for cross-run stability.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.special import ndtri

from .estimators import FitOptions, ls_factor_fit, pie_fit, twfe_fit
from .exceptions import ConfigInvalid, PanelModelError, SingularGram
from .inference import attach_vcov, consistency_test
from .panel import PanelDataset, cross_section_demean

_ROLE_IDS = {
    "eta": 0,
    "ux1": 1,
    "ux2": 2,
    "eps_init": 3,
    "innovations": 4,
    "adopt8": 5,
    "adopt9": 6,
    "eps": 7,
}


def _stream(seed: int, rep_index: int, role: str) -> np.random.Generator:
    key = np.random.SeedSequence((int(seed), int(rep_index), _ROLE_IDS[role]))
    return np.random.Generator(np.random.Philox(key))


def _normals(seed: int, rep_index: int, role: str, shape) -> np.ndarray:
    u = _stream(seed, rep_index, role).random(shape)
    return ndtri(np.where(u == 0.0, 2.0**-53, u))


def _uniforms(seed: int, rep_index: int, role: str, shape) -> np.ndarray:
    return _stream(seed, rep_index, role).random(shape)


def _load_model2_defaults() -> dict:
    with resources.files("piepanel.data").joinpath("model2_defaults.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Dgp1Config:
    """Two-regressor interactive-effects design with AR(1) noise.

    The outcome loads on a declining per-period factor profile; the first
    regressor has a time-constant covariance with the unit effect while
    the second one's covariance interpolates between constant (``s=0``)
    and fully declining (``s=1``).
    """

    n: int = 500
    T: int = 4
    beta: tuple = (-1.0, 1.0)
    rho: float = 0.8
    error_scale: float = 1.4
    innovation_scale: float = 0.5
    factor_scale: float = 2.0
    s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise ConfigInvalid(f"need T >= 2, got {self.T}")
        if self.n < 2:
            raise ConfigInvalid(f"need n >= 2, got {self.n}")
        if not 0.0 <= self.s <= 1.0:
            raise ConfigInvalid(f"s must lie in [0, 1], got {self.s}")
        for name in ("error_scale", "innovation_scale", "factor_scale"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")
        if len(self.beta) != 2:
            raise ConfigInvalid("beta must have two entries")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def phi(self) -> np.ndarray:
        """Declining factor profile, 1 - (t-1)/T for t = 1..T."""
        t = np.arange(1, self.T + 1)
        return 1.0 - (t - 1) / self.T

    @property
    def x2_loading(self) -> np.ndarray:
        """Per-period covariance of the second regressor with the effect."""
        return self.s * self.phi + (1.0 - self.s)

    @property
    def true_beta(self) -> np.ndarray:
        return np.asarray(self.beta)


@dataclass(frozen=True)
class Dgp2Config:
    """Staggered-adoption treatment design over a 16-period horizon.

    Units adopt in period 8, 9, or 10; adoption in period 8 is possible
    only for high-effect units.  A window of ``T`` consecutive periods
    centered on the horizon is observed.  ``phi_star`` and ``delta`` are
    16-vectors; defaults ship in the packaged data file.
    """

    n: int = 100
    T: int = 4
    beta1: float = 1.0
    rho: float = 0.9
    p_adopt8: float = 0.93
    p_adopt9: float = 0.69
    phi_star: tuple = None
    delta: tuple = None
    s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.T not in (4, 8, 16):
            raise ConfigInvalid(f"T must be one of 4, 8, 16; got {self.T}")
        if not 0.0 <= self.s <= 1.0:
            raise ConfigInvalid(f"s must lie in [0, 1], got {self.s}")
        for name in ("p_adopt8", "p_adopt9"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigInvalid("rho must lie in [0, 1) for a stationary error")
        defaults = None
        if self.phi_star is None or self.delta is None:
            defaults = _load_model2_defaults()
        phi_star = tuple(
            float(v) for v in (defaults["phi_star"] if self.phi_star is None else self.phi_star)
        )
        delta = tuple(
            float(v) for v in (defaults["delta"] if self.delta is None else self.delta)
        )
        if len(phi_star) != 16 or len(delta) != 16:
            raise ConfigInvalid("phi_star and delta must have length 16")
        object.__setattr__(self, "phi_star", phi_star)
        object.__setattr__(self, "delta", delta)

    @property
    def t1(self) -> int:
        """First observed period, (16 - T)/2 + 1."""
        return (16 - self.T) // 2 + 1

    @property
    def window(self) -> range:
        return range(self.t1, self.t1 + self.T)

    @property
    def true_beta(self) -> np.ndarray:
        return np.asarray([self.beta1])


@dataclass(frozen=True)
class PopulationMoments:
    """Population inputs to the closed-form TWFE bias."""

    phi: np.ndarray          # (T,)   error factor profile
    phi_x: np.ndarray        # (T, q, K) per-period regressor loadings
    var_eta: np.ndarray      # (q, q)
    gram_within: np.ndarray  # (K, K) average within second moment


@dataclass
class McSummary:
    """Replication summary: per-estimator error moments and test rates."""

    reps: int
    seed: int
    true_beta: np.ndarray
    stats: dict            # name -> {bias, sd, rmse, se_mean, n_ok, n_failed}
    rejection: dict | None = None
    test_level: float | None = None
    n_test_failed: int = 0

    def to_dict(self) -> dict:
        out = {
            "reps": self.reps,
            "seed": self.seed,
            "true_beta": [float(v) for v in self.true_beta],
            "estimators": {},
        }
        for name, st in self.stats.items():
            out["estimators"][name] = {
                "bias": [float(v) for v in st["bias"]],
                "sd": [float(v) for v in st["sd"]],
                "rmse": [float(v) for v in st["rmse"]],
                "se_mean": (
                    None if st["se_mean"] is None else [float(v) for v in st["se_mean"]]
                ),
                "n_ok": int(st["n_ok"]),
                "n_failed": int(st["n_failed"]),
            }
        if self.rejection is not None:
            out["rejection"] = {repr(float(s)): float(f) for s, f in self.rejection.items()}
            out["test_level"] = self.test_level
            out["n_test_failed"] = self.n_test_failed
        return out


def gen_model1(cfg: Dgp1Config, rep_index: int) -> PanelDataset:
    """One replication of the two-regressor interactive-effects design."""
    n, T = cfg.n, cfg.T
    eta = _normals(cfg.seed, rep_index, "eta", n)
    ux1 = _normals(cfg.seed, rep_index, "ux1", (n, T))
    ux2 = _normals(cfg.seed, rep_index, "ux2", (n, T))
    eps = np.empty((n, T))
    eps[:, 0] = _normals(cfg.seed, rep_index, "eps_init", n)
    innov = _normals(cfg.seed, rep_index, "innovations", (n, max(T - 1, 1)))
    for t in range(1, T):
        eps[:, t] = cfg.rho * eps[:, t - 1] + cfg.innovation_scale * innov[:, t - 1]
    phi = cfg.phi
    x1 = eta[:, None] + ux1
    x2 = cfg.x2_loading[None, :] * eta[:, None] + ux2
    b1, b2 = cfg.beta
    y = b1 * x1 + b2 * x2 + cfg.factor_scale * phi[None, :] * eta[:, None] + cfg.error_scale * eps
    return PanelDataset.from_arrays(y, np.stack([x1, x2], axis=2))


def gen_model2(cfg: Dgp2Config, rep_index: int) -> PanelDataset:
    """One replication of the staggered-adoption design."""
    n = cfg.n
    eta = (_uniforms(cfg.seed, rep_index, "eta", n) < 0.5).astype(float)
    adopt8 = _uniforms(cfg.seed, rep_index, "adopt8", n) < cfg.p_adopt8 * eta
    adopt9 = ~adopt8 & (_uniforms(cfg.seed, rep_index, "adopt9", n) < cfg.p_adopt9)
    x_full = np.zeros((n, 16))
    x_full[:, 7] = adopt8                       # period 8
    x_full[:, 8] = adopt8 | adopt9              # period 9
    x_full[:, 9:] = 1.0                         # periods 10..16

    periods = np.asarray(list(cfg.window))
    T = cfg.T
    eps = _normals(cfg.seed, rep_index, "eps", (n, 16))
    e = np.empty((n, T))
    e[:, 0] = eps[:, cfg.t1 - 1]
    scale = np.sqrt(1.0 - cfg.rho**2)
    for j in range(1, T):
        e[:, j] = cfg.rho * e[:, j - 1] + scale * eps[:, cfg.t1 - 1 + j]

    phi_star = np.asarray(cfg.phi_star)
    phi = cfg.s * phi_star + (1.0 - cfg.s) * phi_star[cfg.t1 - 1]
    delta = np.asarray(cfg.delta)
    x = x_full[:, periods - 1]
    y = (
        delta[None, periods - 1]
        + cfg.beta1 * x
        + phi[None, periods - 1] * eta[:, None]
        + e
    )
    return PanelDataset.from_arrays(y, x[:, :, None], period_labels=tuple(periods))


def analytic_twfe_bias(mom: PopulationMoments) -> np.ndarray:
    """Closed-form large-n TWFE bias from population moments.

    Vanishes when either the error factor profile or every regressor's
    effect covariance is constant over time.
    """
    phi = np.asarray(mom.phi, dtype=float)
    phi_x = np.asarray(mom.phi_x, dtype=float)
    var_eta = np.asarray(mom.var_eta, dtype=float)
    gram = np.asarray(mom.gram_within, dtype=float)
    T = phi.shape[0] if phi.ndim else len(phi)
    phi = phi.reshape(T, -1)                        # (T, q)
    dev_x = phi_x - phi_x.mean(axis=0, keepdims=True)
    dev_phi = phi - phi.mean(axis=0, keepdims=True)
    numer = np.einsum("tqk,qr,tr->k", dev_x, var_eta, dev_phi) / T
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= 0 or eig[0] / eig[-1] < 1e-12:
        raise SingularGram("population within Gram matrix is singular")
    return np.linalg.solve(gram, numer)


def model1_population_moments(cfg: Dgp1Config) -> PopulationMoments:
    """Exact population moments of the two-regressor design."""
    T = cfg.T
    phi_err = cfg.factor_scale * cfg.phi            # error loading profile
    c = cfg.x2_loading
    phi_x = np.zeros((T, 1, 2))
    phi_x[:, 0, 0] = 1.0
    phi_x[:, 0, 1] = c
    c_dev = c - c.mean()
    gram = np.array(
        [
            [1.0 - 1.0 / T, 0.0],
            [0.0, float(np.mean(c_dev**2)) + 1.0 - 1.0 / T],
        ]
    )
    return PopulationMoments(
        phi=phi_err, phi_x=phi_x, var_eta=np.array([[1.0]]), gram_within=gram
    )


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------

_ESTIMATOR_NAMES = ("twfe", "pie", "ls_factor")


def _run_one_rep(args) -> dict:
    cfg, rep, estimators, opts, q, test_level, residual_beta = args
    panel = gen_model1(cfg, rep) if isinstance(cfg, Dgp1Config) else gen_model2(cfg, rep)
    out: dict = {"rep": rep}
    dp = None
    need_dp = ("pie" in estimators) or ("ls_factor" in estimators) or test_level is not None
    if need_dp:
        dp = cross_section_demean(panel)
    twfe = pie = None
    for name in estimators:
        try:
            if name == "twfe":
                twfe = twfe_fit(panel, dp=dp) if dp is not None else twfe_fit(panel)
                out["twfe"] = {"beta": twfe.beta, "se": twfe.beta_se}
            elif name == "pie":
                pie = pie_fit(panel, q, opts, dp=dp)
                sandwich = attach_vcov(dp, pie)
                out["pie"] = {"beta": pie.beta, "se": sandwich.beta_se[: dp.K]}
            elif name == "ls_factor":
                est = ls_factor_fit(panel, q, opts, dp=dp)
                out["ls_factor"] = {"beta": est.beta, "se": None}
            else:
                raise ConfigInvalid(f"unknown estimator {name!r}")
        except (PanelModelError, np.linalg.LinAlgError) as exc:
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    if test_level is not None:
        try:
            if twfe is None:
                twfe = twfe_fit(panel, dp=dp)
            if pie is None:
                pie = pie_fit(panel, q, opts, dp=dp)
            res = consistency_test(dp, pie, twfe, residual_beta=residual_beta)
            out["test"] = {"p_value": res.p_value, "statistic": res.statistic}
        except (PanelModelError, np.linalg.LinAlgError) as exc:
            out["test"] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def run_replications(
    cfg,
    estimators=("twfe", "pie"),
    reps: int = 1000,
    workers: int = 1,
    *,
    q: int = 1,
    opts: FitOptions | None = None,
    test_level: float | None = None,
    residual_beta: str = "twfe",
) -> McSummary:
    """Fit the requested estimators on ``reps`` fresh panels and summarize.

    Replication ``r`` depends only on ``(cfg.seed, r)``, so the summary is
    identical for any ``workers``.  Per-replication failures are excluded
    from the error moments and counted.  When ``test_level`` is given,
    the TWFE-consistency test is run each replication and its rejection
    frequency recorded under the configuration's interpolation parameter.
    """
    if reps < 1:
        raise ConfigInvalid("reps must be at least 1")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in _ESTIMATOR_NAMES:
            raise ConfigInvalid(f"unknown estimator {name!r}; choose from {_ESTIMATOR_NAMES}")
    opts = opts or FitOptions()
    tasks = [
        (cfg, rep, estimators, opts, q, test_level, residual_beta)
        for rep in range(reps)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_rep, tasks, chunksize=max(1, reps // (8 * workers))))
    else:
        results = [_run_one_rep(t) for t in tasks]
    results.sort(key=lambda r: r["rep"])

    true_beta = cfg.true_beta
    stats: dict = {}
    for name in estimators:
        betas = [r[name]["beta"] for r in results if "beta" in r.get(name, {})]
        ses = [
            r[name]["se"]
            for r in results
            if "beta" in r.get(name, {}) and r[name].get("se") is not None
        ]
        n_failed = sum(1 for r in results if "error" in r.get(name, {}))
        if betas:
            err = np.asarray(betas) - true_beta[None, :]
            bias = err.mean(axis=0)
            sd = err.std(axis=0)                      # population (1/reps) form
            rmse = np.sqrt((err**2).mean(axis=0))
        else:
            bias = sd = rmse = np.full(true_beta.size, np.nan)
        stats[name] = {
            "bias": bias,
            "sd": sd,
            "rmse": rmse,
            "se_mean": np.asarray(ses).mean(axis=0) if ses else None,
            "n_ok": len(betas),
            "n_failed": n_failed,
        }
    rejection = None
    n_test_failed = 0
    if test_level is not None:
        pvals = [r["test"]["p_value"] for r in results if "p_value" in r.get("test", {})]
        n_test_failed = sum(1 for r in results if "error" in r.get("test", {}))
        freq = float(np.mean([p < test_level for p in pvals])) if pvals else float("nan")
        rejection = {float(cfg.s): freq}
    return McSummary(
        reps=reps,
        seed=cfg.seed,
        true_beta=true_beta,
        stats=stats,
        rejection=rejection,
        test_level=test_level,
        n_test_failed=n_test_failed,
    )


def rejection_curve(
    cfg,
    s_grid,
    reps: int = 1000,
    level: float = 0.05,
    workers: int = 1,
    *,
    q: int = 1,
    opts: FitOptions | None = None,
    residual_beta: str = "twfe",
) -> dict:
    """Rejection frequency of the consistency test along an s-grid.

    Returns ``{s: frequency}`` in grid order.  Replications share the
    underlying random streams across grid points (common random numbers).
    """
    s_grid = [float(s) for s in s_grid]
    if not s_grid:
        raise ConfigInvalid("s_grid must be nonempty")
    curve: dict = {}
    for s in s_grid:
        cfg_s = replace(cfg, s=s)
        summary = run_replications(
            cfg_s,
            estimators=("twfe", "pie"),
            reps=reps,
            workers=workers,
            q=q,
            opts=opts,
            test_level=level,
            residual_beta=residual_beta,
        )
        curve[s] = summary.rejection[s]
    return curve
