"""Stratum formation: sorted pairs/blocks on the prognostic score,
Mahalanobis matched pairs on covariates, and hybrid-cost matched pairs
that trade the two off.

The pair matcher is greedy nearest-available construction followed by
2-opt pair-swap local search run to a local optimum; an exact brute-force
matcher over all perfect matchings is provided for small n and used by
tests to bound the optimality gap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DesignError, StratkitError
from .scoring import ScoredUnit


class BlockTooLarge(DesignError):
    def __init__(self, k: int, n: int):
        super().__init__(f"block size {k} exceeds unit count {n}")


class DimensionMismatch(StratkitError):
    pass


class OddCount(DesignError):
    def __init__(self, n: int):
        super().__init__(f"pair matching needs an even unit count, got {n}")


class NonFiniteCost(DesignError):
    def __init__(self, i: int, j: int):
        self.i, self.j = i, j
        super().__init__(f"cost matrix entry ({i}, {j}) is not finite")


class DegenerateCovariate(UserWarning):
    """A covariate column is constant and was dropped from the Mahalanobis term."""


@dataclass(frozen=True)
class Stratum:
    stratum_id: int
    member_unit_ids: tuple[str, ...]

    def __post_init__(self):
        if len(self.member_unit_ids) < 2:
            raise DesignError(f"stratum {self.stratum_id} has fewer than 2 members")

    @property
    def size(self) -> int:
        return len(self.member_unit_ids)


@dataclass(frozen=True)
class StratumSet:
    """A partition of units into strata.

    With an odd unit count under a pair design, the unit with the median
    score is set aside as ``leftover_unit_id``: it is randomized by a fair
    coin, flagged in exports, and excluded from the paired variance
    estimator.
    """

    strata: tuple[Stratum, ...]
    method_tag: str
    total_cost: float | None = None
    leftover_unit_id: str | None = None

    def __post_init__(self):
        for expected, stratum in enumerate(self.strata):
            if stratum.stratum_id != expected:
                raise DesignError(f"stratum ids must be consecutive from 0, got {stratum.stratum_id} at {expected}")
        seen: set[str] = set()
        for stratum in self.strata:
            for uid in stratum.member_unit_ids:
                if uid in seen:
                    raise DesignError(f"unit {uid!r} appears in more than one stratum")
                seen.add(uid)
        if self.leftover_unit_id is not None and self.leftover_unit_id in seen:
            raise DesignError(f"leftover unit {self.leftover_unit_id!r} also appears in a stratum")

    @property
    def unit_ids(self) -> tuple[str, ...]:
        ids = [uid for s in self.strata for uid in s.member_unit_ids]
        if self.leftover_unit_id is not None:
            ids.append(self.leftover_unit_id)
        return tuple(ids)

    def all_pairs(self) -> bool:
        return all(s.size == 2 for s in self.strata)


@dataclass(frozen=True)
class HybridCostParams:
    lambda_: float
    covariate_subset: tuple[str, ...]
    ridge_epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.lambda_ <= 1.0):
            raise DesignError(f"lambda must lie in [0, 1], got {self.lambda_!r}")
        if self.lambda_ < 1.0 and not self.covariate_subset:
            raise DesignError("a covariate subset is required when lambda < 1")
        if self.ridge_epsilon < 0:
            raise DesignError("ridge_epsilon must be nonnegative")


# ---------------------------------------------------------------------------
# array-level building blocks (index based; shared by the public wrappers
# and the simulation harness)
# ---------------------------------------------------------------------------


def score_order(g: np.ndarray) -> np.ndarray:
    """Ascending score order with ties broken by position (stable sort)."""
    return np.argsort(np.asarray(g, dtype=float), kind="stable")


def sorted_pair_indices(g: np.ndarray) -> np.ndarray:
    """Consecutive pairs of the score-sorted units; requires even length."""
    order = score_order(g)
    if order.size % 2:
        raise OddCount(order.size)
    return order.reshape(-1, 2)


def sorted_block_groups(g: np.ndarray, k: int) -> list[np.ndarray]:
    """Consecutive size-k blocks of the score-sorted units; a remainder of
    fewer than k units merges into the final block."""
    order = score_order(g)
    n = order.size
    if k < 2:
        raise DesignError(f"block size must be at least 2, got {k}")
    if k > n:
        raise BlockTooLarge(k, n)
    n_full = n // k
    groups = [order[i * k : (i + 1) * k] for i in range(n_full)]
    if n % k:
        groups[-1] = np.concatenate([groups[-1], order[n_full * k :]])
    return groups


def median_score_index(g: np.ndarray) -> int:
    """Position of the median-score unit (ties by position); used as the
    set-aside unit when pairing an odd number of units."""
    order = score_order(g)
    return int(order[order.size // 2])


def mahalanobis_distance(xi, xj, sigma_inv) -> float:
    """Covariance-standardized distance sqrt((xi-xj)' S^-1 (xi-xj))."""
    xi = np.asarray(xi, dtype=float).ravel()
    xj = np.asarray(xj, dtype=float).ravel()
    sigma_inv = np.asarray(sigma_inv, dtype=float)
    if xi.shape != xj.shape or sigma_inv.shape != (xi.size, xi.size):
        raise DimensionMismatch(
            f"incompatible shapes: x {xi.shape} vs {xj.shape}, sigma_inv {sigma_inv.shape}"
        )
    d = xi - xj
    return float(np.sqrt(max(d @ sigma_inv @ d, 0.0)))


def squared_mahalanobis_matrix(x: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
    """All pairwise squared Mahalanobis distances (the Eq-style cost term)."""
    x = np.asarray(x, dtype=float)
    sigma_inv = np.asarray(sigma_inv, dtype=float)
    if x.ndim != 2 or sigma_inv.shape != (x.shape[1], x.shape[1]):
        raise DimensionMismatch(f"x {x.shape} incompatible with sigma_inv {sigma_inv.shape}")
    xs = x @ sigma_inv
    sq = np.einsum("ij,ij->i", xs, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (xs @ x.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def design_matrix(dataset: Dataset, covariate_subset) -> tuple[np.ndarray, tuple[str, ...]]:
    """Numeric matrix for the listed covariates.

    Categorical variables are one-hot expanded with the first (sorted)
    level dropped as reference; text variables are rejected -- they reach
    the design only through the prognostic score.
    """
    subset = tuple(covariate_subset)
    if not subset:
        raise DesignError("covariate subset must be nonempty")
    columns: list[np.ndarray] = []
    names: list[str] = []
    for name in subset:
        try:
            var = dataset.schema.variable(name)
        except KeyError:
            raise DesignError(f"unknown covariate {name!r}") from None
        values = [u.values[name] for u in dataset.units]
        if var.kind == "numeric":
            columns.append(np.asarray(values, dtype=float))
            names.append(name)
        elif var.kind == "categorical":
            levels = sorted(set(values))
            for level in levels[1:]:
                columns.append(np.asarray([1.0 if v == level else 0.0 for v in values]))
                names.append(f"{name}={level}")
        else:
            raise DesignError(f"text covariate {name!r} cannot enter the Mahalanobis term")
    return np.column_stack(columns), tuple(names)


@dataclass(frozen=True)
class CovarianceModel:
    sigma: np.ndarray
    sigma_inv: np.ndarray
    columns: tuple[str, ...]
    dropped: tuple[str, ...]
    ridged: bool

    @property
    def dim(self) -> int:
        return len(self.columns)


def covariance_from_matrix(x: np.ndarray, ridge_epsilon: float = 1e-8) -> tuple[np.ndarray, np.ndarray, bool]:
    """Sample covariance (divisor n-1) and its inverse; a ridge of
    ridge_epsilon * mean(diag) is added when the matrix is ill-conditioned
    (condition number above 1e12) or numerically singular."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        raise DesignError("need at least 2 units to estimate a covariance")
    centered = x - x.mean(axis=0)
    sigma = centered.T @ centered / (x.shape[0] - 1)
    sigma = np.atleast_2d(sigma)
    inv, ridged = _invert(sigma, ridge_epsilon)
    return sigma, inv, ridged


def _invert(sigma: np.ndarray, ridge_epsilon: float) -> tuple[np.ndarray, bool]:
    cond = np.linalg.cond(sigma)
    ridged = False
    work = sigma
    if not np.isfinite(cond) or cond > 1e12:
        work = sigma + ridge_epsilon * float(np.mean(np.diag(sigma))) * np.eye(sigma.shape[0])
        ridged = True
    try:
        return np.linalg.inv(work), ridged
    except np.linalg.LinAlgError:
        scale = float(np.mean(np.diag(sigma))) or 1.0
        work = sigma + max(ridge_epsilon, 1e-12) * scale * np.eye(sigma.shape[0])
        return np.linalg.inv(work), True


def estimate_covariance(dataset: Dataset, covariate_subset, ridge_epsilon: float = 1e-8) -> CovarianceModel:
    """Covariance of the (expanded) covariates with constant columns dropped.

    Dropping is a warning, not an error: a constant column carries no
    pairing information and would only make the inverse undefined.
    """
    x, names = design_matrix(dataset, covariate_subset)
    spread = np.ptp(x, axis=0)
    dropped = tuple(name for name, s in zip(names, spread) if s == 0)
    for name in dropped:
        warnings.warn(f"covariate column {name!r} is constant; dropped from Mahalanobis term", DegenerateCovariate)
    keep = spread > 0
    if not keep.any():
        raise DesignError("all covariate columns are constant; nothing to match on")
    x = x[:, keep]
    names = tuple(name for name, k in zip(names, keep) if k)
    sigma, inv, ridged = covariance_from_matrix(x, ridge_epsilon)
    return CovarianceModel(sigma=sigma, sigma_inv=inv, columns=names, dropped=dropped, ridged=ridged)


def default_lambda(k: int) -> float:
    """Score weight 1/(k+1) for k covariate columns in the Mahalanobis term:
    the score counts as roughly one more independent covariate."""
    if k < 0:
        raise DesignError(f"covariate dimension must be nonnegative, got {k}")
    return 1.0 / (k + 1)


def hybrid_pair_cost(i: int, j: int, g_hats, s_g_sq: float, x_vectors, sigma_inv, lam: float) -> float:
    """Pairing cost lambda*(g_i-g_j)^2/s_g^2 + (1-lambda)*squared Mahalanobis."""
    if not (0.0 <= lam <= 1.0):
        raise DesignError(f"lambda must lie in [0, 1], got {lam!r}")
    g = np.asarray(g_hats, dtype=float)
    score_term = 0.0
    if lam > 0.0:
        score_term = (g[i] - g[j]) ** 2 / s_g_sq if s_g_sq > 0 else 0.0
    if lam == 1.0:
        return lam * score_term
    x = np.asarray(x_vectors, dtype=float)
    d = mahalanobis_distance(x[i], x[j], sigma_inv)
    if lam == 0.0:
        return d * d
    return lam * score_term + (1.0 - lam) * d * d


def pairwise_hybrid_costs(
    g: np.ndarray | None,
    x: np.ndarray | None,
    sigma_inv: np.ndarray | None,
    lam: float,
    s_g_sq: float | None = None,
) -> np.ndarray:
    """Full cost matrix for pair matching.

    The limits are computed as single terms so that lambda = 0 is bitwise
    identical to pure Mahalanobis pairing and lambda = 1 to pure score
    pairing.
    """
    if not (0.0 <= lam <= 1.0):
        raise DesignError(f"lambda must lie in [0, 1], got {lam!r}")
    score_term = None
    if lam > 0.0:
        if g is None:
            raise DesignError("scores are required when lambda > 0")
        g = np.asarray(g, dtype=float)
        if s_g_sq is None:
            s_g_sq = float(np.var(g, ddof=1))
        diff = g[:, None] - g[None, :]
        score_term = diff * diff / s_g_sq if s_g_sq > 0 else np.zeros((g.size, g.size))
    if lam == 1.0:
        return score_term
    if x is None or sigma_inv is None:
        raise DesignError("covariates and a covariance inverse are required when lambda < 1")
    mahal_term = squared_mahalanobis_matrix(x, sigma_inv)
    if lam == 0.0:
        return mahal_term
    return lam * score_term + (1.0 - lam) * mahal_term


# ---------------------------------------------------------------------------
# minimum-cost perfect matching
# ---------------------------------------------------------------------------


def _canonical_pairs(pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2).copy()
    pairs.sort(axis=1)
    return pairs[np.argsort(pairs[:, 0], kind="stable")]


def matching_total(cost: np.ndarray, pairs) -> float:
    """Total matching cost accumulated in canonical pair order, so equal
    pair sets always produce bit-identical totals."""
    total = 0.0
    for i, j in _canonical_pairs(pairs):
        total += float(cost[i, j])
    return total


def _validate_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DesignError(f"cost matrix must be square, got shape {cost.shape}")
    n = cost.shape[0]
    if n % 2:
        raise OddCount(n)
    bad = ~np.isfinite(cost)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NonFiniteCost(int(i), int(j))
    return cost


def _greedy_pairs(cost: np.ndarray) -> np.ndarray:
    n = cost.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    order = np.argsort(cost[iu, ju], kind="stable")
    free = np.ones(n, dtype=bool)
    pairs = []
    want = n // 2
    for idx in order:
        i, j = int(iu[idx]), int(ju[idx])
        if free[i] and free[j]:
            free[i] = False
            free[j] = False
            pairs.append((i, j))
            if len(pairs) == want:
                break
    return np.asarray(pairs, dtype=np.int64)


def _two_opt(cost: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Repeatedly apply improving swaps between two pairs until no swap of
    any two pairs improves the total (a 2-opt local optimum).  Each pass
    applies a maximal disjoint batch of the best improving swaps."""
    a = pairs[:, 0].copy()
    b = pairs[:, 1].copy()
    k = a.size
    if k < 2:
        return pairs
    tol = 1e-12 * (1.0 + float(np.mean(cost[a, b])))
    while True:
        cur = cost[a, b]
        keep = cur[:, None] + cur[None, :]
        alt1 = cost[np.ix_(a, a)] + cost[np.ix_(b, b)]
        alt2 = cost[np.ix_(a, b)] + cost[np.ix_(b, a)]
        gain = keep - np.minimum(alt1, alt2)
        gain[np.tril_indices(k)] = -np.inf
        improving = np.argwhere(gain > tol)
        if improving.size == 0:
            break
        ranked = improving[np.argsort(-gain[improving[:, 0], improving[:, 1]], kind="stable")]
        used = np.zeros(k, dtype=bool)
        for i, j in ranked:
            if used[i] or used[j]:
                continue
            used[i] = used[j] = True
            if alt1[i, j] <= alt2[i, j]:
                a[i], b[i], a[j], b[j] = a[i], a[j], b[i], b[j]
            else:
                a[i], b[i], a[j], b[j] = a[i], b[j], b[i], a[j]
    return np.column_stack([a, b])


def matching_pairs(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Greedy + 2-opt heuristic matching; returns canonical pairs and total."""
    cost = _validate_cost(cost)
    pairs = _two_opt(cost, _greedy_pairs(cost))
    pairs = _canonical_pairs(pairs)
    return pairs, matching_total(cost, pairs)


def brute_force_pairs(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum over all perfect matchings; intended for n <= 12."""
    cost = _validate_cost(cost)
    n = cost.shape[0]
    if n > 16:
        raise DesignError(f"brute-force matching is limited to n <= 16, got {n}")
    rows = cost.tolist()
    best_total = None
    best_pairs = None

    def recurse(free: list[int], acc: list[tuple[int, int]], running: float):
        nonlocal best_total, best_pairs
        if not free:
            if best_total is None or running < best_total:
                best_total = running
                best_pairs = list(acc)
            return
        first = free[0]
        row = rows[first]
        for t in range(1, len(free)):
            partner = free[t]
            acc.append((first, partner))
            recurse(free[1:t] + free[t + 1 :], acc, running + row[partner])
            acc.pop()

    recurse(list(range(n)), [], 0.0)
    pairs = _canonical_pairs(best_pairs)
    return pairs, matching_total(cost, pairs)


# ---------------------------------------------------------------------------
# public stratum-set constructors
# ---------------------------------------------------------------------------


def _pairs_to_strata(pairs: np.ndarray, unit_ids, method_tag: str, total_cost=None, leftover=None) -> StratumSet:
    strata = tuple(
        Stratum(stratum_id=s, member_unit_ids=(unit_ids[int(i)], unit_ids[int(j)]))
        for s, (i, j) in enumerate(pairs)
    )
    return StratumSet(strata=strata, method_tag=method_tag, total_cost=total_cost, leftover_unit_id=leftover)


def sorted_block_strata(scored: list[ScoredUnit], block_size: int) -> StratumSet:
    """Sort by score (ties by input order) and chunk into size-k strata;
    any remainder joins the final stratum."""
    g = np.asarray([s.g_hat for s in scored], dtype=float)
    groups = sorted_block_groups(g, block_size)
    strata = tuple(
        Stratum(stratum_id=s, member_unit_ids=tuple(scored[int(i)].unit_id for i in group))
        for s, group in enumerate(groups)
    )
    tag = "sorted-pair" if block_size == 2 else f"sorted-block-{block_size}"
    return StratumSet(strata=strata, method_tag=tag)


def min_cost_pair_matching(cost: np.ndarray, unit_ids=None, method_tag: str = "min-cost-pairs") -> StratumSet:
    """Heuristic minimum-cost perfect matching as a StratumSet of pairs."""
    pairs, total = matching_pairs(cost)
    if unit_ids is None:
        unit_ids = [str(i) for i in range(np.asarray(cost).shape[0])]
    return _pairs_to_strata(pairs, list(unit_ids), method_tag, total_cost=total)


def brute_force_pair_matching(cost: np.ndarray, unit_ids=None) -> StratumSet:
    """Exact matcher counterpart of min_cost_pair_matching (n <= 16)."""
    pairs, total = brute_force_pairs(cost)
    if unit_ids is None:
        unit_ids = [str(i) for i in range(np.asarray(cost).shape[0])]
    return _pairs_to_strata(pairs, list(unit_ids), "brute-force-pairs", total_cost=total)


def categorical_strata(dataset: Dataset, variables) -> StratumSet:
    """One stratum per observed combination of the listed categorical
    covariates (the generic 'stratify on listed covariates' baseline)."""
    variables = tuple(variables)
    if not variables:
        raise DesignError("categorical stratification needs at least one variable")
    for name in variables:
        try:
            var = dataset.schema.variable(name)
        except KeyError:
            raise DesignError(f"unknown covariate {name!r}") from None
        if var.kind != "categorical":
            raise DesignError(f"variable {name!r} is not categorical")
    keys: dict[tuple, list[str]] = {}
    for u in dataset.units:
        key = tuple(str(u.values[v]) for v in variables)
        keys.setdefault(key, []).append(u.unit_id)
    strata = []
    for s, key in enumerate(sorted(keys)):
        members = keys[key]
        if len(members) < 2:
            raise DesignError(
                f"category {key!r} has a single unit; cannot randomize within it"
            )
        strata.append(Stratum(stratum_id=s, member_unit_ids=tuple(members)))
    return StratumSet(strata=tuple(strata), method_tag="categorical")


def _order_pairs_by_score(pairs: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Order matched pairs by mean score so downstream pairs-of-pairs
    variance estimation sees score-adjacent strata."""
    means = g[pairs].mean(axis=1)
    return pairs[np.argsort(means, kind="stable")]


def paired_design_strata(
    scored: list[ScoredUnit] | None,
    dataset: Dataset | None,
    method: str,
    params: HybridCostParams | None = None,
) -> StratumSet:
    """Design-stage pair construction with the odd-n set-aside rule.

    method: "sorted-pair", "mahalanobis-pair", or "hybrid-pair".  With an
    odd unit count the median-score unit is set aside (for score-free
    Mahalanobis pairing: the most central unit by total cost).
    """
    if method == "sorted-pair":
        if scored is None:
            raise DesignError("sorted-pair needs scores")
        g = np.asarray([s.g_hat for s in scored], dtype=float)
        ids = [s.unit_id for s in scored]
        leftover = None
        keep = np.arange(g.size)
        if g.size % 2:
            drop = median_score_index(g)
            leftover = ids[drop]
            keep = np.delete(keep, drop)
        pairs = keep[np.argsort(g[keep], kind="stable")].reshape(-1, 2)
        strata = tuple(
            Stratum(stratum_id=s, member_unit_ids=(ids[int(i)], ids[int(j)])) for s, (i, j) in enumerate(pairs)
        )
        return StratumSet(strata=strata, method_tag="sorted-pair", leftover_unit_id=leftover)

    if method not in ("mahalanobis-pair", "hybrid-pair"):
        raise DesignError(f"unknown pair design {method!r}")
    if dataset is None or params is None:
        raise DesignError(f"{method} needs a dataset and cost parameters")
    lam = 0.0 if method == "mahalanobis-pair" else params.lambda_
    g = None
    ids = list(dataset.unit_ids)
    if scored is not None:
        if [s.unit_id for s in scored] != ids:
            raise DesignError("scores are not aligned with the dataset")
        g = np.asarray([s.g_hat for s in scored], dtype=float)
    if lam > 0.0 and g is None:
        raise DesignError(f"{method} with lambda > 0 needs scores")

    x = sigma_inv = None
    if lam < 1.0:
        cov = estimate_covariance(dataset, params.covariate_subset, params.ridge_epsilon)
        full_x, names = design_matrix(dataset, params.covariate_subset)
        keep_cols = [i for i, name in enumerate(names) if name in cov.columns]
        x = full_x[:, keep_cols]
        sigma_inv = cov.sigma_inv

    n = len(ids)
    keep = np.arange(n)
    leftover = None
    if n % 2:
        if g is not None:
            drop = median_score_index(g)
        else:
            full_cost = pairwise_hybrid_costs(None, x, sigma_inv, 0.0)
            drop = int(np.argsort(full_cost.sum(axis=1), kind="stable")[0])
        leftover = ids[drop]
        keep = np.delete(keep, drop)

    cost = pairwise_hybrid_costs(
        g[keep] if g is not None else None,
        x[keep] if x is not None else None,
        sigma_inv,
        lam,
    )
    pairs, total = matching_pairs(cost)
    if g is not None:
        pairs = _order_pairs_by_score(pairs, g[keep])
    tag = "mahalanobis-pair" if method == "mahalanobis-pair" else "hybrid-pair"
    strata = tuple(
        Stratum(stratum_id=s, member_unit_ids=(ids[int(keep[i])], ids[int(keep[j])]))
        for s, (i, j) in enumerate(pairs)
    )
    return StratumSet(strata=strata, method_tag=tag, total_cost=total, leftover_unit_id=leftover)
