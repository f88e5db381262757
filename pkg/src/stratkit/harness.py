"""Monte Carlo design evaluation.

Builds a full-potential-outcome sample (imputed from experimental data or
drawn from a synthetic data-generating process), then replays many seeded
experiments under each candidate design and compares mean squared errors
and analytic standard errors.  Scores are computed once per unit and
reused across replications; the imputed ground truth never reaches the
design path, which is enforced with a content digest over the design
inputs.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import EstimationError, InvalidProbability, StratkitError
from .estimation import (
    EmptyArm,
    difference_in_means,
    matched_pair_variance,
    ols_adjusted_estimate,
)
from .randomization import NonIntegralAllocation
from .rng import substream
from .stratification import (
    covariance_from_matrix,
    default_lambda,
    design_matrix,
    matching_pairs,
    median_score_index,
    pairwise_hybrid_costs,
    sorted_block_groups,
)

_DRAW_TAG = 11
_ASSIGN_TAG = 22
_BOOT_TAG = 33

PAIR_METHODS = ("sorted-pair", "mahalanobis-pair", "hybrid-pair")
ALL_METHODS = ("simple", "regression", "sorted-pair", "sorted-block", "mahalanobis-pair", "hybrid-pair", "categorical")


# ---------------------------------------------------------------------------
# ground-truth samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImputedSample:
    """Full (Y*(0), Y*(1), X*) sample for design evaluation.

    ``provenance0``/``provenance1`` mark each potential outcome as
    "observed", "imputed", or "synthetic".
    """

    dataset: Dataset
    y0_star: np.ndarray
    y1_star: np.ndarray
    provenance0: tuple[str, ...]
    provenance1: tuple[str, ...]

    @property
    def true_tau(self) -> float:
        return float(np.mean(self.y1_star - self.y0_star))

    def __len__(self) -> int:
        return len(self.dataset)


def default_covariate_names(schema) -> tuple[str, ...]:
    return tuple(v.name for v in schema.variables if v.kind in ("numeric", "categorical"))


def impute_counterfactuals(dataset: Dataset, covariates=None) -> ImputedSample:
    """Fill each unit's unobserved potential outcome with a T-learner:
    one OLS of outcome on covariates per arm, imputing the counterfactual
    as observed outcome +/- the fitted arm difference at the unit's X.

    Falls back to arm-mean imputation (with a warning) when the covariates
    carry no regression information.
    """
    if not dataset.has_observed_outcomes():
        raise StratkitError("imputation requires observed outcomes and treatments")
    y = np.asarray([u.observed_outcome for u in dataset.units], dtype=float)
    d = np.asarray([u.observed_treatment for u in dataset.units], dtype=int)
    if not (d == 1).any():
        raise EmptyArm(1)
    if not (d == 0).any():
        raise EmptyArm(0)

    names = tuple(covariates) if covariates else default_covariate_names(dataset.schema)
    x = None
    if names:
        x_full, _ = design_matrix(dataset, names)
        keep = np.ptp(x_full, axis=0) > 0
        if keep.any():
            x = x_full[:, keep]

    if x is None:
        warnings.warn("no usable covariates; falling back to arm-mean imputation", UserWarning)
        cate = np.full(y.size, y[d == 1].mean() - y[d == 0].mean())
    else:
        m1 = _arm_fit(x, y, d == 1)
        m0 = _arm_fit(x, y, d == 0)
        if m1 is None or m0 is None:
            warnings.warn("rank-deficient arm regression; falling back to arm-mean imputation", UserWarning)
            cate = np.full(y.size, y[d == 1].mean() - y[d == 0].mean())
        else:
            cate = m1 - m0

    y1 = np.where(d == 1, y, y + cate)
    y0 = np.where(d == 0, y, y - cate)
    prov1 = tuple("observed" if t == 1 else "imputed" for t in d)
    prov0 = tuple("observed" if t == 0 else "imputed" for t in d)
    return ImputedSample(dataset=dataset, y0_star=y0, y1_star=y1, provenance0=prov0, provenance1=prov1)


def _arm_fit(x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray | None:
    """Fit OLS on one arm; return fitted values for every unit, or None when
    the arm design matrix is rank deficient beyond the intercept."""
    xa = np.column_stack([np.ones(int(mask.sum())), x[mask]])
    if np.linalg.matrix_rank(xa) < xa.shape[1]:
        return None
    beta, *_ = np.linalg.lstsq(xa, y[mask], rcond=None)
    return np.column_stack([np.ones(x.shape[0]), x]) @ beta


@dataclass(frozen=True)
class SyntheticDGP:
    """Linear potential-outcome model with closed-form design oracles.

    Y(d) = alpha_d + beta'x + d * gamma'x + eps,  x ~ N(0, I_dim),
    eps ~ N(0, noise_sd^2).  The optimal score is
    g*(x) = alpha0 + alpha1 + (2 beta + gamma)'x.
    """

    dim: int
    beta: np.ndarray
    gamma: np.ndarray
    alpha0: float
    alpha1: float
    noise_sd: float
    categorical_bins: int | None = None

    @property
    def true_tau(self) -> float:
        return self.alpha1 - self.alpha0

    @property
    def var_y0(self) -> float:
        return float(self.beta @ self.beta) + self.noise_sd**2

    @property
    def var_y1(self) -> float:
        b1 = self.beta + self.gamma
        return float(b1 @ b1) + self.noise_sd**2

    @property
    def var_conditional_sum(self) -> float:
        w = 2.0 * self.beta + self.gamma
        return float(w @ w)

    @property
    def v_simple(self) -> float:
        return self.var_y1 + self.var_y0

    @property
    def v_paired(self) -> float:
        return self.v_simple - 0.5 * self.var_conditional_sum

    @property
    def efficiency_ratio(self) -> float:
        """Paired-to-simple variance ratio under exact-score pairing."""
        return self.v_paired / self.v_simple

    def g_star(self, x: np.ndarray) -> np.ndarray:
        return (self.alpha0 + self.alpha1) + x @ (2.0 * self.beta + self.gamma)

    def draw(self, n: int, rng: np.random.Generator):
        """Draw (x, y0, y1, labels); a pure function of (params, stream)."""
        x = rng.standard_normal((n, self.dim))
        eps0 = rng.standard_normal(n) * self.noise_sd
        eps1 = rng.standard_normal(n) * self.noise_sd
        y0 = self.alpha0 + x @ self.beta + eps0
        y1 = self.alpha1 + x @ (self.beta + self.gamma) + eps1
        labels = None
        if self.categorical_bins:
            from scipy.stats import norm

            edges = norm.ppf(np.linspace(0, 1, self.categorical_bins + 1)[1:-1])
            labels = np.digitize(x[:, 0], edges)
        return x, y0, y1, labels


def make_linear_dgp(dim: int, beta=None, gamma=None, alpha0=0.0, alpha1=0.0, noise_sd=1.0, categorical_bins=None) -> SyntheticDGP:
    if noise_sd < 0:
        raise StratkitError("noise_sd must be nonnegative")
    beta = np.zeros(dim) if beta is None else np.asarray(beta, dtype=float)
    gamma = np.zeros(dim) if gamma is None else np.asarray(gamma, dtype=float)
    if beta.shape != (dim,) or gamma.shape != (dim,):
        raise StratkitError(f"coefficients must have shape ({dim},)")
    return SyntheticDGP(
        dim=dim,
        beta=beta,
        gamma=gamma,
        alpha0=float(alpha0),
        alpha1=float(alpha1),
        noise_sd=float(noise_sd),
        categorical_bins=categorical_bins,
    )


@dataclass(frozen=True)
class ScoreSpec:
    """How the per-unit score is produced in synthetic runs.

    kind "exact" uses g* itself; "blend" mixes g* with independent noise to
    hit a target correlation rho; "noise" is pure noise (rho = 0).
    """

    kind: str = "exact"
    rho: float = 1.0
    scale: float = 1.0

    def scores(self, dgp: SyntheticDGP, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "exact":
            return dgp.g_star(x)
        if self.kind == "noise":
            return rng.standard_normal(x.shape[0]) * self.scale
        if self.kind == "blend":
            g = dgp.g_star(x)
            sd = float(np.sqrt(dgp.var_conditional_sum))
            z = rng.standard_normal(x.shape[0])
            return self.rho * g + np.sqrt(max(1.0 - self.rho**2, 0.0)) * sd * z
        raise StratkitError(f"unknown score spec {self.kind!r}")


# ---------------------------------------------------------------------------
# design specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpec:
    """One design arm of the comparison: a stratification method plus the
    estimator and variance estimator it implies.

    method: simple | regression | sorted-pair | sorted-block |
            mahalanobis-pair | hybrid-pair | categorical
    """

    name: str
    method: str
    block_size: int = 2
    lambda_: float | None = None
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    ridge_epsilon: float = 1e-8

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise StratkitError(f"unknown design method {self.method!r}")
        if self.lambda_ is not None and not (0.0 <= self.lambda_ <= 1.0):
            raise StratkitError(f"lambda must lie in [0, 1], got {self.lambda_!r}")


def spec(method: str, name: str | None = None, **kwargs) -> DesignSpec:
    """Shorthand constructor: spec("sorted-pair"), spec("hybrid-pair", ...)."""
    for key in ("covariates", "categorical"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return DesignSpec(name=name or method, method=method, **kwargs)


@dataclass(frozen=True)
class EmpiricalSource:
    """Bootstrap-resampling source: replications draw units with replacement
    from the imputed sample; resampled duplicates share their unit's score."""

    sample: ImputedSample
    scores: np.ndarray | None = None

    def __post_init__(self):
        if self.scores is not None and len(self.scores) != len(self.sample):
            raise StratkitError("scores are not aligned with the sample")


@dataclass(frozen=True)
class DGPSource:
    """Fresh-draw source: every replication draws a new sample from the DGP."""

    dgp: SyntheticDGP
    score: ScoreSpec = field(default_factory=ScoreSpec)


# ---------------------------------------------------------------------------
# design-path integrity
# ---------------------------------------------------------------------------


class DesignPathViolation(StratkitError):
    pass


@dataclass(frozen=True)
class DesignInputs:
    """Everything a stratification method may see: scores, covariates, and
    category codes -- never potential outcomes.  The digest is recomputed at
    use time to assert nothing else leaked in."""

    g: np.ndarray | None
    x: np.ndarray | None
    codes: np.ndarray | None
    digest: str

    @staticmethod
    def build(g, x, codes) -> "DesignInputs":
        return DesignInputs(g=g, x=x, codes=codes, digest=_digest(g, x, codes))

    def verify(self) -> None:
        if _digest(self.g, self.x, self.codes) != self.digest:
            raise DesignPathViolation("design inputs were mutated between construction and use")


def _digest(g, x, codes) -> str:
    h = hashlib.sha256()
    for arr in (g, x, codes):
        if arr is None:
            h.update(b"\x00none")
        else:
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------


@dataclass
class _SpecContext:
    """Per-spec precomputation shared by all replications."""

    spec: DesignSpec
    lam: float = 1.0
    x: np.ndarray | None = None  # full-sample covariate matrix (empirical mode)
    codes: np.ndarray | None = None  # full-sample category codes
    needs_scores: bool = False
    needs_x: bool = False
    needs_codes: bool = False


def _prepare_contexts(source, specs: list[DesignSpec]) -> list[_SpecContext]:
    contexts = []
    empirical = isinstance(source, EmpiricalSource)
    for sp in specs:
        ctx = _SpecContext(spec=sp)
        ctx.needs_scores = sp.method in ("sorted-pair", "sorted-block", "hybrid-pair")
        ctx.needs_x = sp.method in ("regression", "mahalanobis-pair", "hybrid-pair")
        ctx.needs_codes = sp.method == "categorical"
        if empirical:
            dataset = source.sample.dataset
            if ctx.needs_x:
                names = sp.covariates or default_covariate_names(dataset.schema)
                x_full, _ = design_matrix(dataset, names)
                keep = np.ptp(x_full, axis=0) > 0
                ctx.x = x_full[:, keep] if keep.any() else None
                if ctx.x is None:
                    raise StratkitError(f"design {sp.name!r}: all covariate columns are constant")
            if ctx.needs_codes:
                names = sp.categorical or dataset.schema.categorical_names()
                if not names:
                    raise StratkitError(f"design {sp.name!r}: no categorical covariates available")
                keys = ["\x1f".join(str(u.values[v]) for v in names) for u in dataset.units]
                ctx.codes = np.unique(keys, return_inverse=True)[1].astype(np.int64)
        else:
            if ctx.needs_codes and source.dgp.categorical_bins is None:
                raise StratkitError(f"design {sp.name!r}: the DGP does not define categorical bins")
        if sp.method == "hybrid-pair":
            if sp.lambda_ is not None:
                ctx.lam = sp.lambda_
            elif empirical:
                ctx.lam = default_lambda(ctx.x.shape[1])
            else:
                ctx.lam = default_lambda(source.dgp.dim)
        elif sp.method == "mahalanobis-pair":
            ctx.lam = 0.0
        contexts.append(ctx)
    return contexts


@dataclass
class _RepData:
    y0: np.ndarray
    y1: np.ndarray
    g: np.ndarray | None
    x_by_spec: list[np.ndarray | None]
    codes_by_spec: list[np.ndarray | None]


def _draw_rep(source, contexts, rep: int, master_seed: int, n: int) -> _RepData:
    rng = substream(master_seed, _DRAW_TAG, rep)
    if isinstance(source, EmpiricalSource):
        total = len(source.sample)
        idx = rng.integers(0, total, size=n)
        g = source.scores[idx] if source.scores is not None else None
        x_by = [ctx.x[idx] if ctx.x is not None else None for ctx in contexts]
        codes_by = [ctx.codes[idx] if ctx.codes is not None else None for ctx in contexts]
        return _RepData(
            y0=source.sample.y0_star[idx],
            y1=source.sample.y1_star[idx],
            g=g,
            x_by_spec=x_by,
            codes_by_spec=codes_by,
        )
    x, y0, y1, labels = source.dgp.draw(n, rng)
    g = source.score.scores(source.dgp, x, rng)
    x_by = [x if ctx.needs_x else None for ctx in contexts]
    codes_by = [labels if ctx.needs_codes else None for ctx in contexts]
    return _RepData(y0=y0, y1=y1, g=g, x_by_spec=x_by, codes_by_spec=codes_by)


def _pair_design(ctx: _SpecContext, inputs: DesignInputs) -> tuple[np.ndarray, int | None]:
    """Matched pairs (ordered by score when scores exist) + leftover index."""
    inputs.verify()
    method = ctx.spec.method
    g, x = inputs.g, inputs.x
    if g is None and (method == "sorted-pair" or (method == "hybrid-pair" and ctx.lam > 0)):
        raise StratkitError(f"{method} needs unit scores")
    n = (g if g is not None else x).shape[0]
    keep = np.arange(n)
    leftover = None
    if n % 2:
        if g is not None:
            leftover = median_score_index(g)
        else:
            cost_full = pairwise_hybrid_costs(None, x, covariance_from_matrix(x, ctx.spec.ridge_epsilon)[1], 0.0)
            leftover = int(np.argsort(cost_full.sum(axis=1), kind="stable")[0])
        keep = np.delete(keep, leftover)

    if method == "sorted-pair":
        order = keep[np.argsort(g[keep], kind="stable")]
        pairs = order.reshape(-1, 2)
        return pairs, leftover

    xk = x[keep]
    _, sigma_inv, _ = covariance_from_matrix(xk, ctx.spec.ridge_epsilon)
    cost = pairwise_hybrid_costs(g[keep] if g is not None else None, xk, sigma_inv, ctx.lam)
    local_pairs, _ = matching_pairs(cost)
    pairs = keep[local_pairs]
    if g is not None:
        means = g[pairs].mean(axis=1)
        pairs = pairs[np.argsort(means, kind="stable")]
    return pairs, leftover


def _assign_pairs(pairs: np.ndarray, leftover: int | None, n: int, p: float, rng) -> np.ndarray:
    if abs(p - 0.5) > 1e-12:
        raise NonIntegralAllocation("pair", 2, p)
    d = np.zeros(n, dtype=np.int8)
    bits = rng.integers(0, 2, size=pairs.shape[0])
    d[pairs[:, 0]] = bits
    d[pairs[:, 1]] = 1 - bits
    if leftover is not None:
        d[leftover] = rng.integers(0, 2)
    return d


def _assign_groups(groups, n: int, p: float, rng, exact: bool) -> np.ndarray:
    """Within-group complete randomization.  With exact=True every group
    size s must satisfy integral s*p; otherwise the treated count rounds
    stochastically (clamped so both arms stay populated when s >= 2)."""
    d = np.zeros(n, dtype=np.int8)
    for gid, members in enumerate(groups):
        s = members.size
        if exact:
            m = s * p
            m_int = int(round(m))
            if abs(m - m_int) > 1e-9 or m_int < 1 or m_int >= s:
                raise NonIntegralAllocation(gid, s, p)
        else:
            if s == 1:
                d[members[0]] = int(rng.random() < p)
                continue
            base = int(np.floor(s * p))
            frac = s * p - base
            m_int = base + int(rng.random() < frac)
            m_int = min(max(m_int, 1), s - 1)
        chosen = rng.permutation(s)[:m_int]
        d[members[chosen]] = 1
    return d


def _complete(n: int, p: float, rng) -> np.ndarray:
    if not (0.0 < p < 1.0):
        raise InvalidProbability(p)
    m = int(round(n * p))
    d = np.zeros(n, dtype=np.int8)
    d[rng.permutation(n)[:m]] = 1
    return d


def _run_method(ctx: _SpecContext, data: _RepData, spec_index: int, p: float, rng) -> tuple[float, float]:
    method = ctx.spec.method
    n = data.y0.size
    # Mahalanobis pairs do not score-match, but pair ordering for the
    # variance estimator uses scores when they exist.
    g = data.g if (ctx.needs_scores or method == "mahalanobis-pair") else None
    x = data.x_by_spec[spec_index]
    codes = data.codes_by_spec[spec_index]
    if ctx.needs_scores and g is None:
        raise StratkitError(f"design {ctx.spec.name!r} needs unit scores but none were provided")
    inputs = DesignInputs.build(g, x, codes)

    if method in ("simple", "regression"):
        d = _complete(n, p, rng)
    elif method in PAIR_METHODS:
        pairs, leftover = _pair_design(ctx, inputs)
        d = _assign_pairs(pairs, leftover, n, p, rng)
    elif method == "sorted-block":
        inputs.verify()
        groups = sorted_block_groups(inputs.g, ctx.spec.block_size)
        d = _assign_groups(groups, n, p, rng, exact=True)
    elif method == "categorical":
        inputs.verify()
        if codes is None:
            raise StratkitError(f"design {ctx.spec.name!r} needs category codes")
        order = np.argsort(codes, kind="stable")
        boundaries = np.flatnonzero(np.diff(codes[order])) + 1
        groups = np.split(order, boundaries)
        d = _assign_groups(groups, n, p, rng, exact=False)
    else:  # pragma: no cover
        raise StratkitError(f"unhandled method {method!r}")

    y = np.where(d == 1, data.y1, data.y0)
    if method == "regression":
        report = ols_adjusted_estimate(y, d, x)
        return report.tau_hat, report.se_hat
    report = difference_in_means(y, d)
    if method in PAIR_METHODS:
        se = matched_pair_variance(y, d, pairs).se
        return report.tau_hat, se
    return report.tau_hat, report.se_hat


# ---------------------------------------------------------------------------
# the simulation loop
# ---------------------------------------------------------------------------


@dataclass
class MethodResult:
    name: str
    mse: float
    mse_ci_low: float
    mse_ci_high: float
    mean_se: float
    mean_tau: float
    sd_tau: float
    n_reps: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class MethodComparison:
    methods: list[MethodResult]
    true_tau: float
    reps: int
    n: int
    master_seed: int
    replication_taus: dict[str, np.ndarray]
    replication_ses: dict[str, np.ndarray]

    def result(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def relative_improvement(self, method: str, baseline: str) -> float:
        """(baseline MSE - method MSE) / baseline MSE * 100, recomputed
        exactly from the stored MSE columns."""
        b = self.result(baseline).mse
        m = self.result(method).mse
        return (b - m) / b * 100.0


def default_eval_n(sample_size: int) -> int:
    """Evaluation draw size: 1000, or 400 for smaller source samples."""
    if sample_size >= 1000:
        return 1000
    return min(400, sample_size)


def run_simulation(
    source,
    specs: list[DesignSpec],
    reps: int,
    master_seed: int,
    n: int | None = None,
    p: float = 0.5,
    threads: int = 1,
    bootstrap_resamples: int = 1000,
) -> MethodComparison:
    """Replay ``reps`` seeded experiments under every design spec.

    Each replication draws a sample using the stream (master_seed, rep),
    forms strata per method from covariates and precomputed scores only,
    randomizes with a method-specific substream, reveals outcomes, and
    estimates.  Aggregation is deterministic regardless of thread count:
    per-replication results are collected by index before reduction.
    """
    if reps < 1:
        raise StratkitError("reps must be >= 1")
    if not specs:
        raise StratkitError("at least one design spec is required")
    names = [sp.name for sp in specs]
    if len(set(names)) != len(names):
        raise StratkitError("design spec names must be unique")
    if isinstance(source, EmpiricalSource):
        true_tau = source.sample.true_tau
        if n is None:
            n = default_eval_n(len(source.sample))
    else:
        true_tau = source.dgp.true_tau
        if n is None:
            n = 1000
    contexts = _prepare_contexts(source, specs)

    def one_rep(rep: int):
        data = _draw_rep(source, contexts, rep, master_seed, n)
        row = []
        for m_i, ctx in enumerate(contexts):
            rng = substream(master_seed, _ASSIGN_TAG, rep, m_i)
            try:
                row.append(_run_method(ctx, data, m_i, p, rng))
            except (StratkitError, EstimationError) as exc:
                row.append((np.nan, np.nan, f"{type(exc).__name__}: {exc}"))
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one_rep, range(reps)))
    else:
        rows = [one_rep(rep) for rep in range(reps)]

    taus = {name: np.full(reps, np.nan) for name in names}
    ses = {name: np.full(reps, np.nan) for name in names}
    errors: dict[str, str] = {}
    for rep, row in enumerate(rows):
        for name, cell in zip(names, row):
            if len(cell) == 3:
                errors.setdefault(name, cell[2])
            else:
                taus[name][rep] = cell[0]
                ses[name][rep] = cell[1]

    results = aggregate_results(names, taus, ses, errors, true_tau, reps, master_seed, bootstrap_resamples)
    return MethodComparison(
        methods=results,
        true_tau=true_tau,
        reps=reps,
        n=n,
        master_seed=master_seed,
        replication_taus=taus,
        replication_ses=ses,
    )


def aggregate_results(
    names,
    taus: dict,
    ses: dict,
    errors: dict,
    true_tau: float,
    reps: int,
    master_seed: int,
    bootstrap_resamples: int = 1000,
) -> list[MethodResult]:
    """Reduce per-replication estimates to MSE, bootstrap CI, and mean SE.

    The MSE confidence interval is a seeded percentile bootstrap over the
    replication-level squared errors, so reruns (and report regeneration
    from a saved replications file) reproduce it bit for bit.
    """
    results = []
    for m_i, name in enumerate(names):
        if name in errors:
            results.append(
                MethodResult(
                    name=name,
                    mse=np.nan,
                    mse_ci_low=np.nan,
                    mse_ci_high=np.nan,
                    mean_se=np.nan,
                    mean_tau=np.nan,
                    sd_tau=np.nan,
                    n_reps=0,
                    error=errors[name],
                )
            )
            continue
        t = taus[name]
        sq = (t - true_tau) ** 2
        mse = float(sq.mean())
        rng_boot = substream(master_seed, _BOOT_TAG, m_i)
        idx = rng_boot.integers(0, reps, size=(bootstrap_resamples, reps))
        boot = sq[idx].mean(axis=1)
        lo, hi = np.percentile(boot, [2.5, 97.5])
        results.append(
            MethodResult(
                name=name,
                mse=mse,
                mse_ci_low=float(lo),
                mse_ci_high=float(hi),
                mean_se=float(ses[name].mean()),
                mean_tau=float(t.mean()),
                sd_tau=float(t.std(ddof=1)) if reps > 1 else 0.0,
                n_reps=reps,
            )
        )
    return results


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def emit_report(
    comparison: MethodComparison,
    fmt: str,
    path,
    baselines: list[str] | None = None,
    header_comment: str | None = None,
) -> None:
    """Write the comparison table as CSV or a markdown pipe table.

    Relative-improvement columns are (baseline - method) / baseline * 100
    on MSE, one column per named baseline (default: the first method).
    """
    ok = [m for m in comparison.methods if m.ok]
    if not ok:
        raise StratkitError("no successful methods; refusing to render an empty report")
    if fmt not in ("csv", "markdown"):
        raise StratkitError(f"unknown report format {fmt!r}")
    if baselines is None:
        baselines = [ok[0].name]
    ok_names = {m.name for m in ok}
    for b in baselines:
        if b not in ok_names:
            raise StratkitError(f"baseline {b!r} is not a successful method")

    header = ["method", "mse", "mse_ci_low", "mse_ci_high", "mean_se"]
    header += [f"improvement_vs_{b}_pct" for b in baselines]
    rows = []
    for m in ok:
        row = [m.name, repr(m.mse), repr(m.mse_ci_low), repr(m.mse_ci_high), repr(m.mean_se)]
        row += [repr(comparison.relative_improvement(m.name, b)) for b in baselines]
        rows.append(row)

    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            if fmt == "csv":
                if header_comment:
                    fh.write(f"# {header_comment}\n")
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
            else:
                if header_comment:
                    fh.write(f"<!-- {header_comment} -->\n")
                fh.write("| " + " | ".join(header) + " |\n")
                fh.write("|" + "|".join(["---"] * len(header)) + "|\n")
                for row in rows:
                    fh.write("| " + " | ".join(row) + " |\n")
    except OSError as exc:
        raise StratkitError(f"cannot write report to {path}: {exc}") from exc


def write_replications_csv(comparison: MethodComparison, path, header_comment: str | None = None) -> None:
    """Per-replication estimates for external analysis (plain CSV)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["replication", "method", "tau_hat", "se_hat"])
        for name in comparison.replication_taus:
            t = comparison.replication_taus[name]
            s = comparison.replication_ses[name]
            if np.isnan(t).all():
                continue
            for rep in range(comparison.reps):
                writer.writerow([rep, name, repr(float(t[rep])), repr(float(s[rep]))])


def read_replications_csv(path) -> tuple[list[str], dict, dict, dict]:
    """Read back a replications file: (method order, taus, ses, header meta).

    The leading comment line's ``key=value`` tokens (config hash, seed
    fingerprint, true_tau, n) come back in the meta dict.
    """
    path = Path(path)
    meta: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for token in first[1:].split():
                key, _, value = token.partition("=")
                if value:
                    meta[key] = value
            rows = list(csv.reader(fh))
        else:
            rows = list(csv.reader([first])) + list(csv.reader(fh))
    if not rows:
        raise StratkitError(f"no rows in replications file {path}")
    header, data = rows[0], rows[1:]
    idx = {name: i for i, name in enumerate(header)}
    for required in ("replication", "method", "tau_hat", "se_hat"):
        if required not in idx:
            raise StratkitError(f"replications file {path} missing column {required!r}")
    names: list[str] = []
    cells: dict[str, dict[int, tuple[float, float]]] = {}
    for row in data:
        name = row[idx["method"]]
        if name not in cells:
            names.append(name)
            cells[name] = {}
        rep = int(row[idx["replication"]])
        cells[name][rep] = (float(row[idx["tau_hat"]]), float(row[idx["se_hat"]]))
    reps = max(max(per) for per in cells.values()) + 1
    taus = {}
    ses = {}
    for name in names:
        t = np.full(reps, np.nan)
        s = np.full(reps, np.nan)
        for rep, (tv, sv) in cells[name].items():
            t[rep] = tv
            s[rep] = sv
        taus[name] = t
        ses[name] = s
    return names, taus, ses, meta
