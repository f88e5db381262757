"""Prognostic scores from predicted potential outcomes.

For a 50/50 allocation the score is the plain sum of the two predictions;
for unequal allocation the probability-weighted variant applies.  Scores
are used raw (sorting is scale-invariant); standardization happens only
inside the hybrid pairing cost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidProbability, StratkitError
from .predictor import PredictionPair


class LengthMismatch(StratkitError):
    pass


class DegenerateVariance(StratkitError):
    pass


@dataclass(frozen=True)
class ScoredUnit:
    unit_id: str
    g_hat: float
    y0_hat: float
    y1_hat: float


def prognostic_score(pair: PredictionPair) -> float:
    """Sum of predicted potential outcomes (the 50/50 allocation score)."""
    return pair.y1_hat + pair.y0_hat


def weighted_prognostic_score(pair: PredictionPair, p: float) -> float:
    """Probability-weighted score for unequal allocation: y1/p + y0/(1-p)."""
    if not (0.0 < p < 1.0):
        raise InvalidProbability(p)
    return pair.y1_hat / p + pair.y0_hat / (1.0 - p)


def score_units(pairs: list[PredictionPair], p: float = 0.5) -> list[ScoredUnit]:
    """Score every prediction pair; the plain sum at p = 0.5, else weighted."""
    if not (0.0 < p < 1.0):
        raise InvalidProbability(p)
    if p == 0.5:
        return [ScoredUnit(q.unit_id, prognostic_score(q), q.y0_hat, q.y1_hat) for q in pairs]
    return [ScoredUnit(q.unit_id, weighted_prognostic_score(q, p), q.y0_hat, q.y1_hat) for q in pairs]


@dataclass(frozen=True)
class ScoreDiagnostics:
    pearson: float
    spearman: float
    r_squared: float


def score_quality(g_hats, reference) -> ScoreDiagnostics:
    """Agreement between a score vector and a reference score.

    Evaluation-only: the reference (true or imputed optimal score) is never
    available on the design path.
    """
    g = np.asarray(g_hats, dtype=float)
    r = np.asarray(reference, dtype=float)
    if g.shape != r.shape or g.ndim != 1:
        raise LengthMismatch(f"score and reference lengths differ: {g.shape} vs {r.shape}")
    if g.size < 3:
        raise LengthMismatch("need at least 3 units for score diagnostics")
    if np.ptp(g) == 0 or np.ptp(r) == 0:
        raise DegenerateVariance("constant vector has no correlation")
    pearson = float(np.corrcoef(g, r)[0, 1])
    # Spearman: Pearson on midranks.
    spearman = float(np.corrcoef(_midranks(g), _midranks(r))[0, 1])
    return ScoreDiagnostics(pearson=pearson, spearman=spearman, r_squared=pearson**2)


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=float)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def write_scores_csv(scored: list[ScoredUnit], path, header_comment: str | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "y0_hat", "y1_hat", "g_hat"])
        for s in scored:
            writer.writerow([s.unit_id, repr(s.y0_hat), repr(s.y1_hat), repr(s.g_hat)])


def read_scores_csv(path) -> list[ScoredUnit]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise StratkitError(f"no score rows in {path}")
    header, data = rows[0], rows[1:]
    idx = {name: i for i, name in enumerate(header)}
    for required in ("unit_id", "y0_hat", "y1_hat", "g_hat"):
        if required not in idx:
            raise StratkitError(f"scores file {path} missing column {required!r}")
    return [
        ScoredUnit(
            unit_id=r[idx["unit_id"]],
            y0_hat=float(r[idx["y0_hat"]]),
            y1_hat=float(r[idx["y1_hat"]]),
            g_hat=float(r[idx["g_hat"]]),
        )
        for r in data
    ]
