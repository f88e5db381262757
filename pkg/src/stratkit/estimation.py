"""Treatment-effect estimators and their variance estimators.

The headline estimator everywhere is the difference in means.  For paired
designs the analytic variance uses the pairs-of-pairs construction: pairs
are ordered by score, adjacent pairs are grouped two at a time, and the
cross-pair product of outcome sums estimates the second moment of the
conditional outcome-sum expectation.  Regression adjustment (with HC2
robust errors) covers the simple-randomization-plus-OLS comparison arm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError


class EmptyArm(EstimationError):
    def __init__(self, arm: int):
        self.arm = arm
        super().__init__(f"no units in arm {arm}")


class RankDeficient(EstimationError):
    pass


class NotPairedDesign(EstimationError):
    pass


class TooFewPairs(EstimationError):
    def __init__(self, found: int):
        super().__init__(f"need at least 4 pairs for the paired variance estimator, found {found}")


class DegenerateDenominator(EstimationError):
    pass


@dataclass(frozen=True)
class EstimateReport:
    tau_hat: float
    se_hat: float
    estimator_tag: str
    n_used: int

    def __post_init__(self):
        if self.se_hat < 0:
            raise EstimationError(f"negative standard error {self.se_hat!r}")


def _split_arms(outcomes, treatments) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(outcomes, dtype=float)
    d = np.asarray(treatments)
    y1 = y[d == 1]
    y0 = y[d == 0]
    if y1.size == 0:
        raise EmptyArm(1)
    if y0.size == 0:
        raise EmptyArm(0)
    return y1, y0


def _arm_variance(values: np.ndarray) -> float:
    return float(np.var(values, ddof=1)) if values.size >= 2 else 0.0


def difference_in_means(outcomes, treatments) -> EstimateReport:
    """Mean treated outcome minus mean control outcome, with the Neyman SE."""
    y1, y0 = _split_arms(outcomes, treatments)
    tau = float(y1.mean() - y0.mean())
    se = float(np.sqrt(_arm_variance(y1) / y1.size + _arm_variance(y0) / y0.size))
    return EstimateReport(tau_hat=tau, se_hat=se, estimator_tag="difference-in-means", n_used=y1.size + y0.size)


def _rank_filter(columns: list[np.ndarray], labels: list[str], protected: int) -> tuple[list[np.ndarray], list[str]]:
    """Keep a maximal independent set of columns, scanning in order so the
    first of any collinear group survives.  The first ``protected`` columns
    (intercept, treatment) must be independent or RankDeficient is raised."""
    basis: list[np.ndarray] = []
    kept_cols: list[np.ndarray] = []
    kept_labels: list[str] = []
    for pos, (col, label) in enumerate(zip(columns, labels)):
        residual = col.astype(float)
        for q in basis:
            residual = residual - q * (q @ residual)
        norm = np.linalg.norm(residual)
        if norm > 1e-8 * max(np.linalg.norm(col), 1.0):
            basis.append(residual / norm)
            kept_cols.append(col)
            kept_labels.append(label)
        elif pos < protected:
            raise RankDeficient(f"column {label!r} is collinear with preceding design columns")
        else:
            warnings.warn(f"covariate column {label!r} is collinear; dropped", UserWarning)
    return kept_cols, kept_labels


def ols_adjusted_estimate(outcomes, treatments, covariates=None) -> EstimateReport:
    """OLS of outcome on intercept + treatment + covariates; the reported
    effect is the treatment coefficient with an HC2 robust SE.  Collinear
    covariate columns are dropped with a warning."""
    y1, y0 = _split_arms(outcomes, treatments)  # validates both arms
    y = np.asarray(outcomes, dtype=float)
    d = np.asarray(treatments, dtype=float)
    n = y.size
    columns = [np.ones(n), d]
    labels = ["intercept", "treatment"]
    if covariates is not None:
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise EstimationError(f"covariate rows {x.shape[0]} do not match outcomes {n}")
        for j in range(x.shape[1]):
            columns.append(x[:, j])
            labels.append(f"x{j}")
    columns, labels = _rank_filter(columns, labels, protected=2)
    X = np.column_stack(columns)
    if n <= X.shape[1]:
        raise RankDeficient(f"{n} observations cannot support {X.shape[1]} design columns")

    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    leverage = np.einsum("ij,ij->i", q, q)
    w = resid**2 / np.maximum(1.0 - leverage, 1e-12)
    r_inv = np.linalg.inv(r)
    bread = r_inv @ r_inv.T  # (X'X)^{-1}
    meat = X.T @ (X * w[:, None])
    cov = bread @ meat @ bread
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    return EstimateReport(tau_hat=float(beta[1]), se_hat=se, estimator_tag="ols-hc2", n_used=n)


@dataclass(frozen=True)
class PairedVariance:
    varsigma_sq: float
    se: float
    n_pairs: int


def matched_pair_variance(outcomes, treatments, pairs) -> PairedVariance:
    """Adjusted variance estimate for a 1:1 matched-pair design.

    ``pairs`` indexes units two at a time, already ordered by score.  With
    K pairs the estimate is

        s2(1) + s2(0) - rho/2 + (mu(1) + mu(0))^2 / 2

    where rho = (2/K) * sum over adjacent pair-of-pair blocks of the
    product of the two pairs' outcome sums (last pair dropped from rho when
    K is odd).  The implied SE of the effect estimate is sqrt(max(., 0)/K).
    """
    y = np.asarray(outcomes, dtype=float)
    d = np.asarray(treatments)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    k = pairs.shape[0]
    if k < 4:
        raise TooFewPairs(k)
    d_pairs = d[pairs]
    if not np.all(d_pairs.sum(axis=1) == 1):
        raise NotPairedDesign("every stratum must contain exactly one treated and one control unit")
    y_pairs = y[pairs]
    yt = np.where(d_pairs[:, 0] == 1, y_pairs[:, 0], y_pairs[:, 1])
    yc = np.where(d_pairs[:, 0] == 1, y_pairs[:, 1], y_pairs[:, 0])
    mu1 = float(yt.mean())
    mu0 = float(yc.mean())
    s1 = float(np.var(yt, ddof=1))
    s0 = float(np.var(yc, ddof=1))
    sums = yt + yc
    blocks = k // 2
    rho = (2.0 / k) * float(np.dot(sums[0 : 2 * blocks : 2], sums[1 : 2 * blocks : 2]))
    varsigma = s1 + s0 - 0.5 * rho + 0.5 * (mu1 + mu0) ** 2
    se = float(np.sqrt(max(varsigma, 0.0) / k))
    return PairedVariance(varsigma_sq=float(varsigma), se=se, n_pairs=k)


def matched_pair_variance_from_strata(strata, assignments, outcomes_by_id) -> PairedVariance:
    """StratumSet convenience wrapper: strata must all be pairs (the odd-n
    leftover, if any, is excluded by construction)."""
    for stratum in strata.strata:
        if stratum.size != 2:
            raise NotPairedDesign(f"stratum {stratum.stratum_id} has size {stratum.size}")
    treatment_by_id = {a.unit_id: a.treatment for a in assignments}
    ids = [uid for s in strata.strata for uid in s.member_unit_ids]
    y = [float(outcomes_by_id[uid]) for uid in ids]
    d = [treatment_by_id[uid] for uid in ids]
    pairs = np.arange(len(ids)).reshape(-1, 2)
    return matched_pair_variance(y, d, pairs)


def theoretical_variance_ratio(var_y1: float, var_y0: float, var_conditional_sum: float) -> float:
    """Asymptotic paired-to-simple variance ratio:
    1 - Var(E[Y(1)+Y(0) | score]) / (2 * (Var[Y(1)] + Var[Y(0)]))."""
    if var_y1 < 0 or var_y0 < 0 or var_conditional_sum < 0:
        raise EstimationError("variances must be nonnegative")
    denom = 2.0 * (var_y1 + var_y0)
    if denom <= 0:
        raise DegenerateDenominator("total outcome variance is zero")
    return 1.0 - var_conditional_sum / denom
