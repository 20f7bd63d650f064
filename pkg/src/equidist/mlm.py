"""Nested random-intercept linear mixed models fitted by REML.

The model for tract i in county j of state k is

    y_ijk = x_ijk' beta + gamma_jk + alpha_k + eps_ijk

with gamma ~ N(0, s2_county), alpha ~ N(0, s2_state), eps ~ N(0, s2_resid).
Writing ``V = s2_resid * H`` with ``H = I + theta_c Zc Zc' + theta_s Zs Zs'``,
the REML deviance is profiled over beta and s2_resid and minimised over the
log variance ratios ``(log theta_c, log theta_s)`` by Nelder-Mead with
restarts. Because counties nest inside states, every quadratic form in
``H^{-1}`` reduces to county and state sums, so one deviance evaluation costs
O(n_county * p^2) after a single pass over the data.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from ._normal import norm_ppf
from .errors import ConvergenceError, ValidationError

LOG_RATIO_BOUNDS = (-20.0, 20.0)
DEVIANCE_TOL = 1e-9
RESTART_POINTS = ((0.0, 0.0), (-4.0, -4.0), (2.0, 2.0))
# a log ratio below this is tested against an exact zero
_SINGULAR_LOG_RATIO = -14.0


class EJAttribute(str, enum.Enum):
    AIAN = "AIAN"
    ASIAN = "Asian"
    BLACK = "Black"
    HISPANIC = "Hispanic"
    WHITE = "White"
    POVERTY = "PovertyProportion"
    INCOME = "MedianIncome100k"

    @property
    def column(self):
        return EJ_COLUMNS[self]


EJ_COLUMNS = {
    EJAttribute.AIAN: "prop_aian",
    EJAttribute.ASIAN: "prop_asian",
    EJAttribute.BLACK: "prop_black",
    EJAttribute.HISPANIC: "prop_hispanic",
    EJAttribute.WHITE: "prop_white",
    EJAttribute.POVERTY: "prop_poverty",
    EJAttribute.INCOME: "median_income_100k",
}

COVARIATES = ("prop_white", "prop_nonwhite", "prop_poverty", "median_income_100k",
              "pop_density", "pm25_zscore")

_RACE = (EJAttribute.AIAN, EJAttribute.ASIAN, EJAttribute.BLACK, EJAttribute.HISPANIC)


def model_covariates(attribute, suite="main"):
    """Covariates for one EJ-attribute model of the main or income-sensitivity suite."""
    attribute = EJAttribute(attribute)
    if suite not in ("main", "sensitivity"):
        raise ValidationError(f"unknown suite {suite!r}")
    ses = "prop_poverty" if suite == "main" else "median_income_100k"
    tail = ("pop_density", "pm25_zscore")
    if attribute in (EJAttribute.POVERTY, EJAttribute.INCOME):
        if attribute.column != ses:
            raise ValidationError(f"{attribute.value} is not an attribute of the {suite} suite")
        return ("prop_nonwhite",) + tail
    if attribute in _RACE:
        return ("prop_white", ses) + tail
    return (ses,) + tail


ALLOWED_MODELS = {
    (a, model_covariates(a, s))
    for s in ("main", "sensitivity")
    for a in EJAttribute
    if not (s == "main" and a is EJAttribute.INCOME)
    and not (s == "sensitivity" and a is EJAttribute.POVERTY)
}


@dataclass(frozen=True)
class ModelSpec:
    """One EJ-attribute model in one stratum.

    ``region`` is ``"us"`` or an EPA region number 1-10; ``urbanicity`` is
    ``"urban"`` or ``"rural"``. The outcome is always natural-log distance
    in meters.
    """

    ej_attribute: EJAttribute
    covariates: tuple
    urbanicity: str = "urban"
    region: object = "us"
    suite: str = "main"
    outcome: str = "log_distance"

    def __post_init__(self):
        object.__setattr__(self, "ej_attribute", EJAttribute(self.ej_attribute))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if (self.ej_attribute, self.covariates) not in ALLOWED_MODELS:
            raise ValidationError(
                f"covariates {self.covariates} do not match a listed model for "
                f"{self.ej_attribute.value}")
        if self.urbanicity not in ("urban", "rural"):
            raise ValidationError(f"urbanicity must be 'urban' or 'rural', got {self.urbanicity!r}")
        if self.region != "us":
            try:
                region = int(self.region)
            except (TypeError, ValueError):
                region = None
            if region is None or not 1 <= region <= 10:
                raise ValidationError(f"unknown region id {self.region!r}")
            object.__setattr__(self, "region", region)

    @classmethod
    def for_attribute(cls, attribute, suite="main", urbanicity="urban", region="us"):
        return cls(attribute, model_covariates(attribute, suite), urbanicity, region, suite)

    @property
    def stratum(self):
        region = "us" if self.region == "us" else f"r{self.region}"
        return f"{self.urbanicity}/{region}"

    @property
    def key(self):
        return f"{self.suite}:{self.ej_attribute.value}:{self.stratum}"

    @property
    def terms(self):
        return ("intercept", self.ej_attribute.column) + self.covariates


@dataclass
class LmmFit:
    names: tuple
    beta: np.ndarray
    se: np.ndarray
    cov_beta: np.ndarray
    sigma2_state: float
    sigma2_county: float
    sigma2_resid: float
    residuals: np.ndarray
    marginal_residuals: np.ndarray
    blup_state: np.ndarray
    blup_county: np.ndarray
    reml_deviance: float
    n_obs: int
    n_county: int
    n_state: int
    log_ratios: tuple = (None, None)
    singular: dict = field(default_factory=dict)
    converged: bool = True
    n_evals: int = 0

    @property
    def is_singular(self):
        return any(self.singular.values())

    def coef(self, name):
        return float(self.beta[self.names.index(name)])

    def summary(self, level=0.95):
        lo, hi = wald_ci(self, level)
        app = variance_apportionment(self) if self.sigma2_resid > 0 else None
        return {
            "coefficients": {
                n: {"estimate": float(b), "se": float(s), "ci_low": float(a), "ci_high": float(c)}
                for n, b, s, a, c in zip(self.names, self.beta, self.se, lo, hi)
            },
            "ci_level": level,
            "variance_components": {
                "state": self.sigma2_state,
                "county": self.sigma2_county,
                "residual": self.sigma2_resid,
            },
            "apportionment": None if app is None else app.as_dict(),
            "reml_deviance": self.reml_deviance,
            "n_obs": self.n_obs,
            "n_county": self.n_county,
            "n_state": self.n_state,
            "converged": self.converged,
            "singular": dict(self.singular),
            "n_evals": self.n_evals,
        }


@dataclass(frozen=True)
class VarianceApportionment:
    p_state: float
    p_county: float
    p_resid: float

    def as_dict(self):
        return {"state": self.p_state, "county": self.p_county, "residual": self.p_resid}


def variance_apportionment(fit) -> VarianceApportionment:
    """Share of total variance at the state, county and tract levels."""
    comps = (float(fit.sigma2_state), float(fit.sigma2_county), float(fit.sigma2_resid))
    total = math.fsum(comps)
    if not total > 0:
        raise ValidationError("all variance components are zero; proportions undefined")
    return VarianceApportionment(*(c / total for c in comps))


def wald_ci(fit, level=0.95):
    """Normal-approximation intervals ``beta +/- z * se`` as (low, high) arrays."""
    if not 0.0 <= level < 1.0:
        raise ValidationError(f"level must be in [0, 1), got {level!r}")
    z = norm_ppf(0.5 * (1.0 + level))
    beta = np.asarray(fit.beta, dtype=float)
    se = np.asarray(fit.se, dtype=float)
    return beta - z * se, beta + z * se


def percent_change_per_delta(beta1, delta):
    """Relative change in distance for a ``delta`` change in a predictor of log-distance."""
    return math.expm1(beta1 * delta)


def collinear_columns(X, names):
    """Names of columns that add no rank to the ones before them."""
    bad = []
    kept = []
    tol_rank = np.linalg.matrix_rank
    for j in range(X.shape[1]):
        trial = kept + [j]
        if tol_rank(X[:, trial]) < len(trial):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def _codes(labels):
    uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.int64), len(uniq)


class NestedREML:
    """Profiled REML deviance for the county-within-state model.

    Parameters
    ----------
    y : (n,) array
    X : (n, p) array, full column rank
    state : (n,) labels
    county : (n,) labels or None
        County labels are combined with state labels, so the same county code
        in two states denotes two counties. ``None`` drops the county level.
    """

    def __init__(self, y, X, state, county=None):
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValidationError("X must be (n, p) with n = len(y)")
        self.n, self.p = X.shape
        self.y, self.X = y, X
        self.state, self.n_state = _codes(state)
        self.has_county = county is not None
        if self.has_county:
            pairs = np.stack([self.state, _codes(county)[0]], axis=1)
            _, inv = np.unique(pairs, axis=0, return_inverse=True)
            self.county = inv.reshape(-1).astype(np.int64)
            self.n_county = int(self.county.max()) + 1
        else:
            # each row its own "county" with the county ratio pinned at zero
            self.county = np.arange(self.n, dtype=np.int64)
            self.n_county = self.n
        self.county_state = np.zeros(self.n_county, dtype=np.int64)
        self.county_state[self.county] = self.state

        M = np.column_stack([X, y])
        self.G = M.T @ M
        self.nj = np.bincount(self.county, minlength=self.n_county).astype(np.float64)
        zc = sp.csr_matrix((np.ones(self.n), (self.county, np.arange(self.n))),
                           shape=(self.n_county, self.n))
        self.S = zc @ M
        self._pc = sp.csr_matrix(
            (np.ones(self.n_county), (self.county_state, np.arange(self.n_county))),
            shape=(self.n_state, self.n_county))
        self.df = self.n - self.p
        self._const = self.df * (1.0 + math.log(2.0 * math.pi / self.df))
        self.n_evals = 0

    def _pieces(self, theta_c, theta_s):
        nj = self.nj
        d = 1.0 / (1.0 + theta_c * nj)
        c = theta_c * d
        t = np.bincount(self.county_state, weights=nj * d, minlength=self.n_state)
        e = theta_s / (1.0 + theta_s * t)
        T = self._pc @ (d[:, None] * self.S)
        Q = self.G - self.S.T @ (c[:, None] * self.S) - T.T @ (e[:, None] * T)
        logdet_h = np.sum(np.log1p(theta_c * nj)) + np.sum(np.log1p(theta_s * t))
        return Q, logdet_h, c, d, e

    def deviance_ratios(self, theta_c, theta_s):
        """-2 REML log-likelihood with beta and s2_resid profiled out."""
        self.n_evals += 1
        Q, logdet_h, *_ = self._pieces(theta_c, theta_s)
        p = self.p
        try:
            cf = cho_factor(Q[:p, :p], lower=True)
        except np.linalg.LinAlgError:
            return math.inf
        b = cho_solve(cf, Q[:p, p])
        rss = Q[p, p] - Q[p, :p] @ b
        if not rss > 0:
            return math.inf
        logdet_x = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return float(logdet_h + logdet_x + self.df * math.log(rss) + self._const)

    def deviance(self, log_ratios):
        lc, ls = log_ratios
        return self.deviance_ratios(math.exp(lc) if self.has_county else 0.0, math.exp(ls))

    def solve(self, theta_c, theta_s):
        """GLS estimates, residuals and BLUPs at fixed variance ratios."""
        Q, logdet_h, c, d, e = self._pieces(theta_c, theta_s)
        p = self.p
        cf = cho_factor(Q[:p, :p], lower=True)
        beta = cho_solve(cf, Q[:p, p])
        rss = float(Q[p, p] - Q[p, :p] @ beta)
        sigma2 = rss / self.df
        xtx_inv = cho_solve(cf, np.eye(p))
        r = self.y - self.X @ beta
        sr = np.bincount(self.county, weights=r, minlength=self.n_county)
        u = np.bincount(self.county_state, weights=d * sr, minlength=self.n_state)
        # H^{-1} r, evaluated through the nested Woodbury identities
        h_r = r - (c * sr)[self.county] - (e[self.county_state] * d * u[self.county_state])[self.county]
        blup_c = theta_c * np.bincount(self.county, weights=h_r, minlength=self.n_county)
        blup_s = theta_s * np.bincount(self.state, weights=h_r, minlength=self.n_state)
        cond = r - blup_s[self.state] - blup_c[self.county]
        return {
            "beta": beta,
            "cov_beta": sigma2 * xtx_inv,
            "sigma2": sigma2,
            "marginal": r,
            "conditional": cond,
            "h_inv_r": h_r,
            "blup_state": blup_s,
            "blup_county": blup_c if self.has_county else np.zeros(0),
            "logdet_h": logdet_h,
        }


def _simplex(x0, step):
    x0 = np.asarray(x0, dtype=float)
    pts = [x0]
    for i in range(len(x0)):
        x = x0.copy()
        x[i] = x[i] + step if x[i] + step <= LOG_RATIO_BOUNDS[1] else x[i] - step
        pts.append(x)
    return np.array(pts)


def _minimize(fun, x0, step):
    return minimize(
        fun, x0, method="Nelder-Mead",
        bounds=[LOG_RATIO_BOUNDS] * len(x0),
        options={"initial_simplex": _simplex(x0, step), "xatol": 1e-8,
                 "fatol": DEVIANCE_TOL, "maxiter": 5000, "maxfev": 10000},
    )


def fit_lmm_arrays(y, X, state, county=None, names=None, fixed_ratios=None,
                   starts=RESTART_POINTS) -> LmmFit:
    """Fit the nested random-intercept model by REML.

    Parameters
    ----------
    y, X : outcome vector and fixed-effects design (include the intercept column)
    state, county : group labels per row; ``county=None`` gives a one-level model
    names : column names of X, used in errors and summaries
    fixed_ratios : optional ``(theta_county, theta_state)``; a non-None entry pins
        that variance ratio (``s2_group / s2_resid``) instead of estimating it.
        ``(0, 0)`` reproduces ordinary least squares.
    starts : restart points on the (log theta_county, log theta_state) scale

    Raises
    ------
    ValidationError
        Too few groups, incomplete rows or a rank-deficient design.
    ConvergenceError
        Every restart failed; carries the best deviance seen.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValidationError("design and outcome must be complete (no NaN/inf)")
    bad = collinear_columns(X, names)
    if bad:
        raise ValidationError(f"design matrix is rank deficient; collinear columns: {bad}")
    model = NestedREML(y, X, state, county)
    if model.n_state < 2:
        raise ValidationError("need at least 2 states")
    if county is not None and model.n_county < 2:
        raise ValidationError("need at least 2 counties")
    if model.df < 1:
        raise ValidationError("need more observations than fixed effects")

    fixed = list(fixed_ratios) if fixed_ratios is not None else [None, None]
    if county is None:
        fixed[0] = 0.0
    free = [k for k in range(2) if fixed[k] is None]

    def ratios(x):
        th = [fixed[0], fixed[1]]
        for k, v in zip(free, x):
            th[k] = math.exp(v)
        return th

    def objective(x):
        return model.deviance_ratios(*ratios(x))

    singular = {"county": False, "state": False}
    converged = True
    log_ratios = [None, None]
    if free:
        results = []
        for s in starts:
            x0 = np.array([s[k] for k in free])
            results.append(_minimize(objective, x0, 1.0))
        ok = [r for r in results if r.success and np.isfinite(r.fun)]
        best = min(results, key=lambda r: r.fun)
        if not ok:
            raise ConvergenceError(
                f"REML optimisation failed from all {len(starts)} starts "
                f"(best deviance {best.fun:.6g})", best_deviance=float(best.fun))
        best = min(ok, key=lambda r: r.fun)
        polish = _minimize(objective, best.x, 0.1)
        if polish.success and polish.fun <= best.fun:
            best = polish
        x = np.array(best.x, dtype=float)
        fun = float(best.fun)
        theta = ratios(x)
        for pos, k in enumerate(free):
            log_ratios[k] = float(x[pos])
            if x[pos] < _SINGULAR_LOG_RATIO:
                trial = list(theta)
                trial[k] = 0.0
                dev0 = model.deviance_ratios(*trial)
                if dev0 <= fun + 1e-8:
                    theta, fun = trial, min(fun, dev0)
            if x[pos] >= LOG_RATIO_BOUNDS[1] - 1e-6:
                converged = False
                warnings.warn("variance ratio at its upper bound; residual variance near zero")
    else:
        theta = [float(fixed[0]), float(fixed[1])]
        fun = model.deviance_ratios(*theta)

    level_names = ("county", "state")
    for k in range(2):
        if theta[k] == 0.0 and not (k == 0 and county is None):
            singular[level_names[k]] = True
    if county is None:
        singular.pop("county")
    if any(singular.values()) and fixed_ratios is None:
        warnings.warn(f"singular fit: variance at zero for {[k for k, v in singular.items() if v]}")

    sol = model.solve(*theta)
    s2 = sol["sigma2"]
    return LmmFit(
        names=names,
        beta=sol["beta"],
        se=np.sqrt(np.diag(sol["cov_beta"])),
        cov_beta=sol["cov_beta"],
        sigma2_state=float(theta[1] * s2),
        sigma2_county=float(theta[0] * s2),
        sigma2_resid=float(s2),
        residuals=sol["conditional"],
        marginal_residuals=sol["marginal"],
        blup_state=sol["blup_state"],
        blup_county=sol["blup_county"],
        reml_deviance=float(fun),
        n_obs=model.n,
        n_county=model.n_county if county is not None else 0,
        n_state=model.n_state,
        log_ratios=tuple(log_ratios),
        singular=singular,
        converged=converged,
        n_evals=model.n_evals,
    )


def design_matrix(spec: ModelSpec, table):
    """(y, X, names) for ``spec`` from a prepared tract table."""
    cols = [spec.ej_attribute.column, *spec.covariates]
    missing = [c for c in cols + [spec.outcome] if c not in table.columns]
    if missing:
        raise ValidationError(f"table lacks columns {missing}")
    X = np.column_stack([np.ones(len(table))] + [table[c].to_numpy(dtype=float) for c in cols])
    return table[spec.outcome].to_numpy(dtype=float), X, spec.terms


def fit_lmm(spec: ModelSpec, data) -> LmmFit:
    """Fit ``spec`` on a tract table already restricted to the spec's stratum."""
    y, X, names = design_matrix(spec, data)
    return fit_lmm_arrays(y, X, data["state_id"].to_numpy(), data["county_id"].to_numpy(), names)
