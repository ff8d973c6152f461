"""Batch command-line front end.

Three subcommands: ``estimate`` fits one estimator on a long-format panel
CSV, ``test`` runs the TWFE-consistency test, ``simulate`` drives the
replication harness.  Results are written as JSON (canonical) or CSV;
every output embeds the fully resolved configuration, and identical
invocations produce byte-identical documents.

Exit codes: 0 success; 1 malformed input; 2 not identified or bad
usage/config; 3 singular design; 4 no convergence (result still
written); 5 test abstains.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .estimators import FitOptions, ls_factor_fit, pie_fit, twfe_fit
from .exceptions import (
    ConfigInvalid,
    NormalizationSingular,
    NotIdentified,
    PanelFormatError,
    PanelModelError,
    SingularContrastCov,
    SingularDesign,
)
from .inference import attach_vcov, consistency_test
from .montecarlo import Dgp1Config, Dgp2Config, rejection_curve, run_replications
from .panel import DEFAULT_PRUNE_TOL, cross_section_demean, identification_check, read_panel_csv

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_IDENTIFIED = 2
EXIT_USAGE = 2
EXIT_SINGULAR = 3
EXIT_NO_CONVERGENCE = 4
EXIT_ABSTAIN = 5

DEFAULTS = {
    "method": "pie",
    "q": 1,
    "tol": 1e-8,
    "max_iter": 1000,
    "n_starts": 1,
    "init": "twfe",
    "seed": 0,
    "prune_tol": DEFAULT_PRUNE_TOL,
    "cluster_correction": False,
    "residual_beta": "twfe",
    "model": 1,
    "n": 500,
    "T": 4,
    "reps": 1000,
    "s": 1.0,
    "s_grid": None,
    "level": 0.05,
    "estimators": "twfe,pie",
    "workers": None,
    "format": "json",
    "output": None,
    "input": None,
}


@dataclass
class RunConfig:
    """Fully resolved invocation: defaults < config file < CLI flags."""

    command: str
    input: str | None
    output: str | None
    format: str
    method: str
    q: int
    tol: float
    max_iter: int
    n_starts: int
    init: str
    seed: int
    prune_tol: float
    cluster_correction: bool
    residual_beta: str
    model: int
    n: int
    T: int
    reps: int
    s: float
    s_grid: list | None
    level: float
    estimators: str
    workers: int

    def fit_options(self) -> FitOptions:
        return FitOptions(
            tol=self.tol, max_iter=self.max_iter, init=self.init,
            n_starts=self.n_starts, seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="piepanel",
        description=(
            "Interactive-effects panel estimation for short panels: "
            "estimate coefficients, test TWFE consistency, run seeded simulations."
        ),
    )
    parser.add_argument("--version", action="version", version=f"piepanel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file overriding defaults (same keys as flags)")
        p.add_argument("--output", help="output path (default: stdout)")
        p.add_argument("--format", choices=["json", "csv"],
                       help=f"output format (default {DEFAULTS['format']})")
        p.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULTS['seed']})")

    def add_fit(p):
        p.add_argument("--q", type=int, help=f"number of factors (default {DEFAULTS['q']})")
        p.add_argument("--tol", type=float,
                       help=f"coefficient-change convergence threshold (default {DEFAULTS['tol']})")
        p.add_argument("--max-iter", type=int, dest="max_iter",
                       help=f"iteration cap (default {DEFAULTS['max_iter']})")
        p.add_argument("--n-starts", type=int, dest="n_starts",
                       help=f"number of starts (default {DEFAULTS['n_starts']})")
        p.add_argument("--init", choices=["twfe", "random"],
                       help=f"first start (default {DEFAULTS['init']})")
        p.add_argument("--prune-tol", type=float, dest="prune_tol",
                       help=f"stack pruning tolerance (default {DEFAULTS['prune_tol']})")
        p.add_argument("--cluster-correction", action="store_true", default=None,
                       dest="cluster_correction",
                       help="scale covariance meat by n/(n-1) (default off)")

    est = sub.add_parser("estimate", help="fit one estimator on a panel CSV")
    est.add_argument("--input", help="long-format panel CSV (unit,period,y,x1..xK)")
    est.add_argument("--method", choices=["twfe", "pie", "ls-factor"],
                     help=f"estimator (default {DEFAULTS['method']})")
    add_fit(est)
    add_common(est)

    tst = sub.add_parser("test", help="test TWFE consistency on a panel CSV")
    tst.add_argument("--input", help="long-format panel CSV (unit,period,y,x1..xK)")
    tst.add_argument("--residual-beta", choices=["twfe", "pie"], dest="residual_beta",
                     help="coefficient centering the auxiliary residuals (default twfe)")
    add_fit(tst)
    add_common(tst)

    sim = sub.add_parser("simulate", help="run the seeded replication harness")
    sim.add_argument("--model", type=int, choices=[1, 2],
                     help=f"simulation design (default {DEFAULTS['model']})")
    sim.add_argument("--n", type=int, help=f"units per panel (default {DEFAULTS['n']})")
    sim.add_argument("--T", type=int, help=f"periods per panel (default {DEFAULTS['T']})")
    sim.add_argument("--reps", type=int, help=f"replications (default {DEFAULTS['reps']})")
    sim.add_argument("--s", type=float,
                     help=f"interpolation parameter in [0,1] (default {DEFAULTS['s']})")
    sim.add_argument("--s-grid", dest="s_grid",
                     help="comma-separated s values; runs the rejection curve")
    sim.add_argument("--level", type=float,
                     help=f"test level for rejection curves (default {DEFAULTS['level']})")
    sim.add_argument("--estimators",
                     help=f"comma list from twfe,pie,ls_factor (default {DEFAULTS['estimators']})")
    sim.add_argument("--workers", type=int,
                     help="worker processes (default $PIEPANEL_WORKERS or 1)")
    add_fit(sim)
    add_common(sim)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    resolved = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise PanelFormatError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file is not valid JSON: {exc}") from exc
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        resolved.update(overrides)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if isinstance(resolved["s_grid"], str):
        try:
            resolved["s_grid"] = [float(v) for v in resolved["s_grid"].split(",") if v.strip()]
        except ValueError:
            raise ConfigInvalid(f"bad --s-grid value: {resolved['s_grid']!r}") from None
    if resolved["workers"] is None:
        resolved["workers"] = int(os.environ.get("PIEPANEL_WORKERS", "1"))
    if resolved["q"] < 1:
        raise ConfigInvalid(f"q must be at least 1, got {resolved['q']}")
    if resolved["workers"] < 1:
        raise ConfigInvalid("workers must be at least 1")
    return RunConfig(command=args.command, **resolved)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _emit(doc: dict, rows: list[list] | None, cfg: RunConfig) -> None:
    if cfg.format == "json":
        text = json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in rows:
            writer.writerow(row)
        text = buf.getvalue()
    if cfg.output:
        with open(cfg.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _loadings_doc(loadings) -> dict:
    return {
        "orthonormal": loadings.orthonormal,
        "normalized": None if loadings.normalized is None else loadings.normalized,
    }


def _column_labels(column_map) -> list[str]:
    return [f"z[period={t},x={k}]" for t, k in column_map]


def cmd_estimate(cfg: RunConfig) -> int:
    if not cfg.input:
        raise ConfigInvalid("estimate requires --input")
    panel = read_panel_csv(cfg.input)
    doc: dict = {"command": "estimate", "config": cfg.to_dict(), "result": {}}
    rows: list[list] = [["coefficient", "estimate", "se"]]
    exit_code = EXIT_OK

    if cfg.method == "twfe":
        res = twfe_fit(panel, cluster_correction=cfg.cluster_correction)
        doc["result"] = {
            "method": "twfe",
            "beta": res.beta,
            "se": res.beta_se,
            "vcov": res.vcov,
        }
        for k in range(panel.K):
            rows.append([f"x{k + 1}", repr(float(res.beta[k])), repr(float(res.beta_se[k]))])
    else:
        dp = cross_section_demean(panel, cfg.prune_tol)
        report = identification_check(dp.T, cfg.q, dp.m, dp.K)
        if cfg.method == "pie":
            if not report.necessary_ok:
                raise NotIdentified(report.message)
            est = pie_fit(panel, cfg.q, cfg.fit_options(), dp=dp)
            sandwich = attach_vcov(dp, est, cluster_correction=cfg.cluster_correction)
            se = sandwich.beta_se[: dp.K]
            theta = est.theta
            vcov = sandwich.cov
        else:
            est = ls_factor_fit(panel, cfg.q, cfg.fit_options(), dp=dp)
            se = theta = vcov = None
        doc["result"] = {
            "method": cfg.method,
            "beta": est.beta,
            "se": se,
            "vcov": vcov,
            "loadings": _loadings_doc(est.loadings),
            "theta": theta,
            "theta_labels": _column_labels(dp.column_map) if theta is not None else None,
            "objective": est.objective,
            "iterations": est.iterations,
            "converged": est.converged,
            "identification": {
                "T": report.T, "q": report.q, "m": report.m, "K": report.K,
                "necessary_ok": report.necessary_ok, "slack": report.slack,
                "message": report.message,
            },
        }
        for k in range(panel.K):
            se_k = repr(float(se[k])) if se is not None else ""
            rows.append([f"x{k + 1}", repr(float(est.beta[k])), se_k])
        if not est.converged:
            exit_code = EXIT_NO_CONVERGENCE
    _emit(doc, rows, cfg)
    return exit_code


def cmd_test(cfg: RunConfig) -> int:
    if not cfg.input:
        raise ConfigInvalid("test requires --input")
    if cfg.q != 1:
        raise ConfigInvalid(
            "the TWFE-consistency test is defined only for a single factor; use --q 1"
        )
    panel = read_panel_csv(cfg.input)
    dp = cross_section_demean(panel, cfg.prune_tol)
    report = identification_check(dp.T, cfg.q, dp.m, dp.K)
    if not report.necessary_ok:
        raise NotIdentified(report.message)
    twfe = twfe_fit(panel, cluster_correction=cfg.cluster_correction, dp=dp)
    pie = pie_fit(panel, cfg.q, cfg.fit_options(), dp=dp)
    result = consistency_test(
        dp, pie, twfe,
        residual_beta=cfg.residual_beta,
        cluster_correction=cfg.cluster_correction,
    )
    doc = {
        "command": "test",
        "config": cfg.to_dict(),
        "result": {
            "statistic": result.statistic,
            "df": result.df,
            "p_value": result.p_value,
            "contrast": result.contrast,
            "contrast_cov": result.contrast_cov,
            "beta_pie": pie.beta,
            "beta_twfe": twfe.beta,
            "converged": pie.converged,
        },
    }
    rows = [["quantity", "value"],
            ["statistic", repr(result.statistic)],
            ["df", str(result.df)],
            ["p_value", repr(result.p_value)]]
    for k in range(panel.K):
        rows.append([f"contrast_x{k + 1}", repr(float(result.contrast[k]))])
    _emit(doc, rows, cfg)
    return EXIT_OK


def _sim_config(cfg: RunConfig):
    if cfg.model == 1:
        return Dgp1Config(n=cfg.n, T=cfg.T, s=cfg.s, seed=cfg.seed)
    return Dgp2Config(n=cfg.n, T=cfg.T, s=cfg.s, seed=cfg.seed)


def cmd_simulate(cfg: RunConfig) -> int:
    dgp = _sim_config(cfg)
    doc: dict = {"command": "simulate", "config": cfg.to_dict()}
    if cfg.model == 2:
        doc["window"] = [int(p) for p in dgp.window]
    if cfg.s_grid:
        curve = rejection_curve(
            dgp, cfg.s_grid, reps=cfg.reps, level=cfg.level,
            workers=cfg.workers, q=cfg.q, opts=cfg.fit_options(),
            residual_beta=cfg.residual_beta,
        )
        doc["rejection"] = {repr(float(s)): float(f) for s, f in curve.items()}
        rows = [["s", "rejection_rate"]]
        rows += [[repr(float(s)), repr(float(f))] for s, f in curve.items()]
    else:
        names = tuple(e.strip() for e in cfg.estimators.split(",") if e.strip())
        summary = run_replications(
            dgp, estimators=names, reps=cfg.reps, workers=cfg.workers,
            q=cfg.q, opts=cfg.fit_options(),
        )
        doc["summary"] = summary.to_dict()
        rows = [["estimator", "coefficient", "bias", "sd", "rmse", "se_mean",
                 "n_ok", "n_failed"]]
        for name, st in summary.stats.items():
            for k in range(summary.true_beta.size):
                se_mean = "" if st["se_mean"] is None else repr(float(st["se_mean"][k]))
                rows.append([
                    name, f"x{k + 1}",
                    repr(float(st["bias"][k])), repr(float(st["sd"][k])),
                    repr(float(st["rmse"][k])), se_mean,
                    str(st["n_ok"]), str(st["n_failed"]),
                ])
    _emit(doc, rows, cfg)
    return EXIT_OK


_COMMANDS = {"estimate": cmd_estimate, "test": cmd_test, "simulate": cmd_simulate}


def _fail(code: int, kind: str, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return _COMMANDS[args.command](cfg)
    except PanelFormatError as exc:
        return _fail(EXIT_INPUT, "input", exc)
    except OSError as exc:
        return _fail(EXIT_INPUT, "input", exc)
    except NotIdentified as exc:
        return _fail(EXIT_NOT_IDENTIFIED, "not-identified", exc)
    except ConfigInvalid as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except SingularDesign as exc:
        return _fail(EXIT_SINGULAR, "singular-design", exc)
    except SingularContrastCov as exc:
        return _fail(EXIT_ABSTAIN, "test-abstained", exc)
    except NormalizationSingular as exc:
        return _fail(EXIT_SINGULAR, "singular-normalization", exc)
    except PanelModelError as exc:
        return _fail(EXIT_USAGE, "error", exc)


if __name__ == "__main__":
    sys.exit(main())
