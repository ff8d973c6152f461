"""Balanced-panel data model, demeaning transforms, regressor-stack
construction with rank pruning, and the identification gate.

A panel holds ``n`` units observed over the same ``T`` periods with ``K``
regressors.  The central derived object is :class:`DemeanedPanel`: the
per-period cross-sectionally demeaned outcome and regressors together with
the pruned stack of all per-period regressor columns, which is what the
projection-based estimators operate on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import AllColumnsPruned, DimensionMismatch, PanelFormatError

DEFAULT_PRUNE_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PanelDataset:
    """A balanced panel of one outcome and ``K`` regressors.

    Parameters
    ----------
    y : ndarray of shape (n, T)
        Outcome, row ``i`` holding unit ``i``'s full time series.
    X : ndarray of shape (n, T, K)
        Regressors, ``X[i, t, k]`` the value of regressor ``k`` for unit
        ``i`` in period ``t``.
    unit_ids : tuple of length n
        Unique unit labels.
    period_labels : tuple of length T
        Unique, strictly increasing period labels.
    """

    y: np.ndarray
    X: np.ndarray
    unit_ids: tuple
    period_labels: tuple

    def __post_init__(self):
        y = _readonly(self.y)
        X = _readonly(self.X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "period_labels", tuple(self.period_labels))
        if y.ndim != 2:
            raise DimensionMismatch(f"y must be (n, T), got shape {y.shape}")
        if X.ndim != 3:
            raise DimensionMismatch(f"X must be (n, T, K), got shape {X.shape}")
        n, T = y.shape
        if X.shape[:2] != (n, T):
            raise DimensionMismatch(
                f"X leading dims {X.shape[:2]} do not match y shape {(n, T)}"
            )
        if n < 2 or T < 2 or X.shape[2] < 1:
            raise PanelFormatError(
                f"need n >= 2, T >= 2, K >= 1; got n={n}, T={T}, K={X.shape[2]}"
            )
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise PanelFormatError("panel contains non-finite values")
        if len(self.unit_ids) != n:
            raise DimensionMismatch("unit_ids length does not match n")
        if len(set(self.unit_ids)) != n:
            raise PanelFormatError("unit_ids are not unique")
        if len(self.period_labels) != T:
            raise DimensionMismatch("period_labels length does not match T")
        labels = self.period_labels
        if len(set(labels)) != T:
            raise PanelFormatError("period_labels are not unique")
        if any(labels[t] >= labels[t + 1] for t in range(T - 1)):
            raise PanelFormatError("period_labels must be strictly increasing")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    @classmethod
    def from_arrays(cls, y, X, unit_ids=None, period_labels=None) -> "PanelDataset":
        """Build a panel from plain arrays with default integer labels."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if y.ndim != 2 or X.ndim != 3:
            raise DimensionMismatch(
                f"expected y (n, T) and X (n, T, K); got {y.shape} and {X.shape}"
            )
        n, T = y.shape
        if unit_ids is None:
            unit_ids = tuple(range(1, n + 1))
        if period_labels is None:
            period_labels = tuple(range(1, T + 1))
        return cls(y=y, X=X, unit_ids=tuple(unit_ids), period_labels=tuple(period_labels))


@dataclass(frozen=True, eq=False)
class DemeanedPanel:
    """Cross-sectionally demeaned panel plus the pruned regressor stack.

    ``z_dot`` stacks, per unit, the demeaned values of every surviving
    ``(period, regressor)`` column of the raw panel.  ``column_map`` records
    which columns survived pruning, as ``(period_label, k)`` pairs with
    ``k`` 1-based, in deterministic ``(t, k)`` order.
    """

    y_dot: np.ndarray            # (n, T)
    X_dot: np.ndarray            # (n, T, K)
    z_dot: np.ndarray            # (n, m)
    column_map: tuple            # m pairs (period_label, k)
    source: PanelDataset
    prune_tol: float = DEFAULT_PRUNE_TOL

    def __post_init__(self):
        object.__setattr__(self, "y_dot", _readonly(self.y_dot))
        object.__setattr__(self, "X_dot", _readonly(self.X_dot))
        object.__setattr__(self, "z_dot", _readonly(self.z_dot))
        object.__setattr__(self, "column_map", tuple(map(tuple, self.column_map)))
        if self.z_dot.shape[1] != len(self.column_map):
            raise DimensionMismatch("column_map length does not match z_dot width")

    @property
    def n(self) -> int:
        return self.y_dot.shape[0]

    @property
    def T(self) -> int:
        return self.y_dot.shape[1]

    @property
    def K(self) -> int:
        return self.X_dot.shape[2]

    @property
    def m(self) -> int:
        return self.z_dot.shape[1]

    @cached_property
    def z_basis(self) -> np.ndarray:
        """Orthonormal basis of the column space of ``z_dot`` (n x m).

        Least-squares fits onto the stack reduce to two small matrix
        products with this basis; no n x n projector is ever formed.
        """
        basis, _ = np.linalg.qr(self.z_dot)
        basis.flags.writeable = False
        return basis

    @cached_property
    def x_stacked(self) -> np.ndarray:
        """``X_dot`` reshaped to (n*T, K), unit-major with time inner."""
        out = self.X_dot.reshape(self.n * self.T, self.K)
        out.flags.writeable = False
        return out


@dataclass(frozen=True)
class IdentificationReport:
    """Outcome of the parameter-counting identification check."""

    T: int
    q: int
    m: int
    K: int
    necessary_ok: bool
    slack: int
    message: str


def two_way_within(panel: PanelDataset) -> np.ndarray:
    """Apply the two-way within transform to the outcome and regressors.

    Each series is replaced by
    ``x_it - mean_t(x_i.) - mean_i(x_.t) + mean(x)``, which annihilates
    unit-constant and period-constant components.

    Returns
    -------
    ndarray of shape (n, T, K+1)
        Slice ``[..., 0]`` is the transformed outcome, slice ``[..., k]``
        the transformed ``k``-th regressor (1-based).
    """
    stacked = np.concatenate([panel.y[:, :, None], panel.X], axis=2)
    unit_means = stacked.mean(axis=1, keepdims=True)
    period_means = stacked.mean(axis=0, keepdims=True)
    grand_means = stacked.mean(axis=(0, 1), keepdims=True)
    return stacked - unit_means - period_means + grand_means


def _select_columns(z: np.ndarray, rtol: float) -> list[int]:
    """Greedy pivoted elimination on the Gram matrix of ``z``.

    Pivots on the largest remaining diagonal; a column whose residual
    diagonal falls below ``rtol`` times the largest original diagonal is
    collinear with the kept set and is dropped.  A final guard drops the
    weakest pivots until the kept Gram is invertible with reciprocal
    condition number above ``rtol``.
    """
    m0 = z.shape[1]
    gram = z.T @ z
    diag0 = np.diag(gram).copy()
    scale = diag0.max(initial=0.0)
    if scale <= 0.0:
        return []
    thresh = rtol * scale

    resid = diag0.copy()
    chol = np.zeros((m0, m0))
    kept: list[int] = []
    pivots: list[float] = []
    active = np.ones(m0, dtype=bool)
    while active.any():
        j = int(np.argmax(np.where(active, resid, -np.inf)))
        if resid[j] <= thresh:
            break
        col = (gram[:, j] - chol[:, : len(kept)] @ chol[j, : len(kept)]) / np.sqrt(resid[j])
        chol[:, len(kept)] = col
        kept.append(j)
        pivots.append(resid[j])
        active[j] = False
        resid = np.where(active, resid - col**2, resid)

    def _rcond(idx: list[int]) -> float:
        eig = np.linalg.eigvalsh(gram[np.ix_(idx, idx)])
        return eig[0] / eig[-1] if eig[-1] > 0 else 0.0

    while kept and _rcond(kept) <= rtol:
        weakest = int(np.argmin(pivots))
        del kept[weakest], pivots[weakest]
    return sorted(kept)


def cross_section_demean(
    panel: PanelDataset, prune_tol: float = DEFAULT_PRUNE_TOL
) -> DemeanedPanel:
    """Demean every variable per period and build the pruned regressor stack.

    Candidate stack columns are all ``(period, regressor)`` slices of the
    raw panel, in period-major order.  Exact duplicates and exactly
    constant columns are dropped first; remaining collinear columns are
    removed by greedy pivoted elimination on the Gram matrix of the
    demeaned candidates, at relative tolerance ``prune_tol``.

    Raises
    ------
    AllColumnsPruned
        If no column carries usable cross-sectional variation.
    """
    if not prune_tol > 0:
        raise ValueError("prune_tol must be positive")
    y_dot = panel.y - panel.y.mean(axis=0, keepdims=True)
    X_dot = panel.X - panel.X.mean(axis=0, keepdims=True)

    candidates: list[np.ndarray] = []
    labels: list[tuple] = []
    seen: list[np.ndarray] = []
    for t in range(panel.T):
        for k in range(panel.K):
            col = panel.X[:, t, k]
            if np.all(col == col[0]):
                continue
            if any(np.array_equal(col, prev) for prev in seen):
                continue
            seen.append(col)
            candidates.append(col)
            labels.append((panel.period_labels[t], k + 1))
    if not candidates:
        raise AllColumnsPruned(
            "no usable cross-sectional variation: every candidate column is constant"
        )

    z_raw = np.column_stack(candidates)
    z_all = z_raw - z_raw.mean(axis=0, keepdims=True)
    kept = _select_columns(z_all, prune_tol)
    if not kept:
        raise AllColumnsPruned(
            "no usable cross-sectional variation after collinearity pruning"
        )
    return DemeanedPanel(
        y_dot=y_dot,
        X_dot=X_dot,
        z_dot=z_all[:, kept],
        column_map=tuple(labels[j] for j in kept),
        source=panel,
        prune_tol=prune_tol,
    )


def identification_check(T: int, q: int, m: int, K: int) -> IdentificationReport:
    """Parameter-counting identification check.

    The stack of per-period projection coefficients identifies ``m * T``
    quantities, while the model carries ``K + q*(m + T - q)`` free
    parameters, so ``(T - q) * (m - q) >= K`` is necessary, along with
    ``1 <= q < T`` and ``q <= m``.  Failure is reported, not raised.
    """
    for name, value in (("T", T), ("q", q), ("m", m), ("K", K)):
        if not (isinstance(value, (int, np.integer)) and value > 0):
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    slack = (T - q) * (m - q) - K
    if not q < T:
        ok, message = False, f"need q < T, got q={q}, T={T}"
    elif not q <= m:
        ok, message = False, f"need q <= m, got q={q}, m={m}"
    elif slack < 0:
        ok, message = False, (
            f"parameter count fails: (T-q)*(m-q) = {(T - q) * (m - q)} < K = {K}"
        )
    else:
        ok, message = True, (
            f"necessary condition holds: (T-q)*(m-q) = {(T - q) * (m - q)} >= K = {K}"
        )
    return IdentificationReport(
        T=int(T), q=int(q), m=int(m), K=int(K),
        necessary_ok=ok, slack=int(slack), message=message,
    )


# ---------------------------------------------------------------------------
# Long-format CSV contract: columns `unit,period,y,x1..xK`, header required,
# any row order, strict balance.
# ---------------------------------------------------------------------------

def _parse_label(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def read_panel_csv(path) -> PanelDataset:
    """Read a long-format panel CSV into a :class:`PanelDataset`.

    Rows may appear in any order; periods are sorted per unit on ingest.
    Balance is strictly enforced: every unit must contribute exactly one
    row for every period seen anywhere in the file.

    Raises
    ------
    PanelFormatError
        On malformed header, unparsable numbers (with the offending line
        number), duplicate cells, or unbalanced units.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError("line 1: empty file, expected header") from None
        header = [h.strip() for h in header]
        if len(header) < 4 or header[0] != "unit" or header[1] != "period" or header[2] != "y":
            raise PanelFormatError(
                "line 1: expected header 'unit,period,y,x1..xK', got "
                + ",".join(header)
            )
        K = len(header) - 3
        expected_x = [f"x{k}" for k in range(1, K + 1)]
        if header[3:] != expected_x:
            raise PanelFormatError(
                f"line 1: regressor columns must be {','.join(expected_x)}, got "
                + ",".join(header[3:])
            )

        cells: dict = {}
        units_order: list = []
        unit_periods: dict = {}
        periods: set = set()
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise PanelFormatError(
                    f"line {line}: expected {len(header)} fields, got {len(row)}"
                )
            unit = _parse_label(row[0].strip())
            period = _parse_label(row[1].strip())
            if isinstance(period, str):
                raise PanelFormatError(
                    f"line {line}: period {row[1]!r} is not numeric"
                )
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise PanelFormatError(
                    f"line {line}: non-numeric value in y/x columns: {row[2:]}"
                ) from None
            if (unit, period) in cells:
                raise PanelFormatError(
                    f"line {line}: duplicate observation for unit {unit!r}, period {period!r}"
                )
            if unit not in unit_periods:
                unit_periods[unit] = set()
                units_order.append(unit)
            unit_periods[unit].add(period)
            cells[(unit, period)] = values
            periods.add(period)

    if not cells:
        raise PanelFormatError("line 2: no data rows")
    period_sorted = sorted(periods)
    offenders = [u for u in units_order if unit_periods[u] != periods]
    if offenders:
        raise PanelFormatError(
            "unbalanced panel: units "
            + ", ".join(repr(u) for u in offenders[:10])
            + f" do not cover all {len(period_sorted)} periods"
        )
    n, T = len(units_order), len(period_sorted)
    y = np.empty((n, T))
    X = np.empty((n, T, K))
    for i, unit in enumerate(units_order):
        for t, period in enumerate(period_sorted):
            vals = cells[(unit, period)]
            y[i, t] = vals[0]
            X[i, t, :] = vals[1:]
    return PanelDataset(
        y=y, X=X, unit_ids=tuple(units_order), period_labels=tuple(period_sorted)
    )


def write_panel_csv(panel: PanelDataset, path) -> None:
    """Write a panel in the long-format CSV contract, full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "period", "y"] + [f"x{k}" for k in range(1, panel.K + 1)])
        for i, unit in enumerate(panel.unit_ids):
            for t, period in enumerate(panel.period_labels):
                row = [unit, period, repr(float(panel.y[i, t]))]
                row += [repr(float(v)) for v in panel.X[i, t, :]]
                writer.writerow(row)
