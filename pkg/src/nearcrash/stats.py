"""Binary logistic regression of segment risk class on road attributes.

Fitting is Newton-Raphson on the log-likelihood (iteratively reweighted
least squares) with step halving; the reported diagnostics are the
log-likelihoods of the fitted and intercept-only models, the
likelihood-ratio chi-square, McFadden's pseudo R-squared and its p-value.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from .mapmatch import AttributeRecord, RiskClass, SegmentRiskSummary

Z95 = 1.959964
SEPARATION_LIMIT = 30.0


class EmptyEligibleSet(ValueError):
    pass


class ConstantColumn(ValueError):
    pass


class ExactCollinearity(ValueError):
    pass


class SeparationDetected(RuntimeError):
    pass


class NotConvergedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """Variables entering the model; categorical entries map name -> reference level."""

    numeric: tuple[str, ...] = (
        "aadt_combination_unit_trucks",
        "aadt_traffic_single_unit_trucks",
        "hpms_median_width",
        "number_of_through_lanes",
        "percent_single_truck_aadt",
        "roadbed_width",
        "right_of_way_width_minimum",
    )
    categorical: Mapping[str, int | None] = field(default_factory=lambda: {
        "shoulder_type_inside": None,
        "shoulder_type_outside": None,
    })


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    kind: str  # "intercept", "numeric" or "level"
    mean: float = 0.0
    sd: float = 1.0
    reference: int | None = None


@dataclass
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: list[ColumnInfo]
    row_ids: list[str]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]


def encode_labels(summaries: Sequence[SegmentRiskSummary]) -> np.ndarray:
    return np.array([1 if s.risk_class is RiskClass.HIGH else 0 for s in summaries], dtype=float)


def zscore(values) -> tuple[np.ndarray, float, float]:
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    sd = float(v.std())
    return (v - mean) / sd, mean, sd


def _reference_level(values: np.ndarray, configured: int | None) -> int:
    levels = set(values.tolist())
    if configured is not None and configured in levels:
        return configured
    if 0 in levels:
        return 0
    counts = Counter(values.tolist())
    return min(counts, key=lambda k: (-counts[k], k))


def encode_features(summaries: Sequence[SegmentRiskSummary], attributes: Mapping[str, AttributeRecord | None],
                    spec: FeatureSpec | None = None) -> DesignMatrix:
    """Standardize numeric features, one-hot categorical ones, attach labels.

    Only segments with an attribute record take part.  The reference level
    of each categorical variable is dropped: the configured level if present,
    else code 0, else the most frequent code.
    """
    spec = spec or FeatureSpec()
    rows = [s for s in summaries if attributes.get(s.segment_id) is not None]
    if not rows:
        raise EmptyEligibleSet("no segment has a complete attribute record")
    recs = [attributes[s.segment_id] for s in rows]
    cols = [np.ones(len(rows))]
    info = [ColumnInfo("const", "intercept")]
    for name in spec.numeric:
        raw = np.array([getattr(r, name) for r in recs], dtype=float)
        if np.ptp(raw) == 0:
            raise ConstantColumn(f"column {name!r} is constant")
        z, mean, sd = zscore(raw)
        cols.append(z)
        info.append(ColumnInfo(name, "numeric", mean, sd))
    for name, configured in spec.categorical.items():
        raw = np.array([int(getattr(r, name)) for r in recs])
        ref = _reference_level(raw, configured)
        levels = sorted(set(raw.tolist()) - {ref})
        if not levels:
            raise ConstantColumn(f"column {name!r} has a single level")
        for lvl in levels:
            cols.append((raw == lvl).astype(float))
            info.append(ColumnInfo(f"{name}={lvl}", "level", reference=ref))
    X = np.column_stack(cols)
    _check_collinearity(X, [c.name for c in info])
    return DesignMatrix(X, encode_labels(rows), info, [s.segment_id for s in rows])


def _check_collinearity(X: np.ndarray, names: list[str]) -> None:
    n, k = X.shape
    centred = X[:, 1:] - X[:, 1:].mean(axis=0)
    norms = np.linalg.norm(centred, axis=0)
    for j, nm in enumerate(norms):
        if nm == 0:
            raise ConstantColumn(f"column {names[j + 1]!r} is constant")
    unit = centred / norms
    corr = unit.T @ unit
    for a in range(k - 1):
        for b in range(a + 1, k - 1):
            if abs(abs(corr[a, b]) - 1.0) < 1e-10:
                raise ExactCollinearity(f"columns {names[a + 1]!r} and {names[b + 1]!r} are exactly collinear")
    if np.linalg.matrix_rank(X) < k:
        raise ExactCollinearity("design matrix is rank deficient")


@dataclass(frozen=True)
class LogisticModel:
    names: tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    log_likelihood: float
    log_likelihood_null: float
    n_obs: int
    converged: bool
    iterations: int
    gradient_norm: float

    @property
    def t_statistics(self) -> np.ndarray:
        return self.coefficients / self.standard_errors

    @property
    def ci_low(self) -> np.ndarray:
        return self.coefficients - Z95 * self.standard_errors

    @property
    def ci_high(self) -> np.ndarray:
        return self.coefficients + Z95 * self.standard_errors

    @property
    def odds_ratios(self) -> np.ndarray:
        return np.exp(self.coefficients)

    @property
    def chi_square(self) -> float:
        return likelihood_ratio_chi_square(self.log_likelihood, self.log_likelihood_null)

    @property
    def pseudo_r2(self) -> float:
        return mcfadden_r2(self.log_likelihood, self.log_likelihood_null)

    @property
    def df(self) -> int:
        return len(self.coefficients) - 1

    @property
    def p_value(self) -> float:
        return lr_p_value(self.chi_square, self.df)


def log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def null_log_likelihood(y: np.ndarray) -> float:
    """Maximized log-likelihood of the intercept-only model."""
    n = len(y)
    k = float(np.sum(y))
    if k in (0.0, float(n)):
        return 0.0
    p = k / n
    return k * math.log(p) + (n - k) * math.log1p(-p)


def likelihood_ratio_chi_square(ll: float, ll0: float) -> float:
    return 2.0 * (ll - ll0)


def mcfadden_r2(ll: float, ll0: float) -> float:
    return 1.0 - ll / ll0


def lr_p_value(chi_square: float, df: int) -> float:
    return float(sps.chi2.sf(chi_square, df)) if df > 0 else 1.0


def odds_ratio(beta):
    return np.exp(beta)


def fit_logistic(X, y=None, tol: float = 1e-8, max_iter: int = 100, names: Sequence[str] | None = None,
                 grad_tol: float = 1e-6) -> LogisticModel:
    """Maximum-likelihood logistic fit by IRLS with step halving.

    ``X`` may be a :class:`DesignMatrix` (labels and names taken from it) or
    an array already holding an intercept column.  Convergence requires the
    log-likelihood change to drop below ``tol`` and the gradient infinity
    norm below ``grad_tol``.  A coefficient leaving ``[-30, 30]`` raises
    :class:`SeparationDetected`; running out of iterations returns the best
    iterate with ``converged=False``.
    """
    if isinstance(X, DesignMatrix):
        names = names or X.names
        X, y = X.X, X.y
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = tuple(names or [f"x{j}" for j in range(k)])
    beta = np.zeros(k)
    ll = log_likelihood(X, y, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        grad = X.T @ (y - p)
        hess = (X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            ll_new = log_likelihood(X, y, cand)
            if ll_new >= ll:
                break
            scale /= 2.0
        else:
            cand, ll_new = beta, ll
        if np.any(np.abs(cand) > SEPARATION_LIMIT):
            raise SeparationDetected(
                f"coefficient magnitude exceeded {SEPARATION_LIMIT} at iteration {it}; likely perfect separation")
        change = ll_new - ll
        beta, ll = cand, ll_new
        g = X.T @ (y - expit(X @ beta))
        if abs(change) < tol and np.max(np.abs(g)) <= grad_tol:
            converged = True
            break
    p = expit(X @ beta)
    grad = X.T @ (y - p)
    hess = (X * (p * (1 - p))[:, None]).T @ X
    se = np.sqrt(np.diag(np.linalg.inv(hess)))
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", NotConvergedWarning, stacklevel=2)
    return LogisticModel(
        names=names,
        coefficients=beta,
        standard_errors=se,
        log_likelihood=ll,
        log_likelihood_null=null_log_likelihood(y),
        n_obs=n,
        converged=converged,
        iterations=it,
        gradient_norm=float(np.max(np.abs(grad))),
    )


# -- reporting --------------------------------------------------------------

@dataclass(frozen=True)
class ModelReport:
    rows: list[dict]
    log_likelihood: float
    log_likelihood_null: float
    chi_square: float
    pseudo_r2: float
    p_value: float
    n_obs: int
    converged: bool

    def as_text(self) -> str:
        head = f"{'Variable':<40} {'Coefficient (SE)':>22} {'t-Statistic':>12} {'95% CI':>22} {'Odds Ratio':>11}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            coef = f"{r['coefficient']:.4f} ({r['std_error']:.3f})"
            ci = f"{r['ci_low']:.3f} ({r['ci_high']:.3f})"
            lines.append(f"{r['variable']:<40} {coef:>22} {r['t_statistic']:>12.3f} {ci:>22} {r['odds_ratio']:>11.3f}")
        lines.append("-" * len(head))
        lines += [
            f"Observations: {self.n_obs}",
            f"Log-likelihood at zero: {self.log_likelihood_null:.1f}",
            f"Log-likelihood at convergence: {self.log_likelihood:.1f}",
            f"Chi-square: {self.chi_square:.1f}",
            f"Pseudo R^2: {self.pseudo_r2:.4f}",
            f"P-value: {self.p_value:.4f}",
            f"Converged: {'yes' if self.converged else 'no'}",
        ]
        return "\n".join(lines) + "\n"

    def as_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ("variable", "coefficient", "std_error", "t_statistic", "ci_low", "ci_high", "odds_ratio")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["variable"]] + [f"{r[c]:.6f}" for c in cols[1:]])
        w.writerow(("log_likelihood_null", f"{self.log_likelihood_null:.4f}"))
        w.writerow(("log_likelihood", f"{self.log_likelihood:.4f}"))
        w.writerow(("chi_square", f"{self.chi_square:.4f}"))
        w.writerow(("pseudo_r2", f"{self.pseudo_r2:.6f}"))
        w.writerow(("p_value", f"{self.p_value:.6g}"))
        w.writerow(("n_obs", self.n_obs))
        return buf.getvalue()


def diagnostics_report(ll: float, ll0: float, df: int, n_obs: int = 0, rows: Sequence[dict] = (),
                       converged: bool = True) -> ModelReport:
    chi = likelihood_ratio_chi_square(ll, ll0)
    return ModelReport(list(rows), ll, ll0, chi, mcfadden_r2(ll, ll0), lr_p_value(chi, df), n_obs, converged)


def coefficient_row(name: str, beta: float, se: float) -> dict:
    return {
        "variable": name,
        "coefficient": beta,
        "std_error": se,
        "t_statistic": beta / se if se else math.nan,
        "ci_low": beta - Z95 * se,
        "ci_high": beta + Z95 * se,
        "odds_ratio": float(odds_ratio(beta)),
    }


def model_report(m: LogisticModel) -> ModelReport:
    rows = [coefficient_row(nm, float(b), float(s))
            for nm, b, s in zip(m.names, m.coefficients, m.standard_errors)]
    return diagnostics_report(m.log_likelihood, m.log_likelihood_null, m.df, m.n_obs, rows, m.converged)
