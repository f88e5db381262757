"""Seeded treatment assignment.

Each stratum draws from its own counter-based stream keyed by
(seed, stratum_id), so assignments are reproducible and independent of the
order in which strata are processed or of thread scheduling.  The simple
baseline is complete randomization: exactly round(n * p) treated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DesignError, InvalidProbability
from .rng import LEFTOVER_KEY, SIMPLE_KEY, fingerprint, stratum_stream
from .stratification import StratumSet


class NonIntegralAllocation(DesignError):
    def __init__(self, stratum_id, size: int, p: float):
        self.stratum_id = stratum_id
        self.size = size
        self.p = p
        super().__init__(
            f"stratum {stratum_id}: size {size} times allocation {p} is not a positive integer"
        )


@dataclass(frozen=True)
class Assignment:
    unit_id: str
    treatment: int
    stratum_id: int | None
    seed_fingerprint: str


def _treated_count(stratum_id, size: int, p: float) -> int:
    m = size * p
    m_int = int(round(m))
    if abs(m - m_int) > 1e-9 or m_int < 1 or m_int >= size:
        raise NonIntegralAllocation(stratum_id, size, p)
    return m_int


def assign_within_strata(strata: StratumSet, p: float, seed: int) -> list[Assignment]:
    """Assign exactly size*p treated units within every stratum.

    size*p must be a positive integer for every stratum.  A leftover
    singleton (odd-n pair designs) is assigned by a fair coin from its own
    stream and carries no stratum id.
    """
    if not (0.0 < p < 1.0):
        raise InvalidProbability(p)
    for stratum in strata.strata:
        _treated_count(stratum.stratum_id, stratum.size, p)

    assignments: list[Assignment] = []
    for stratum in strata.strata:
        size = stratum.size
        m = _treated_count(stratum.stratum_id, size, p)
        gen = stratum_stream(seed, stratum.stratum_id)
        chosen = set(gen.permutation(size)[:m].tolist())
        tag = fingerprint(seed, stratum.stratum_id)
        for pos, unit_id in enumerate(stratum.member_unit_ids):
            assignments.append(
                Assignment(
                    unit_id=unit_id,
                    treatment=1 if pos in chosen else 0,
                    stratum_id=stratum.stratum_id,
                    seed_fingerprint=tag,
                )
            )
    if strata.leftover_unit_id is not None:
        gen = stratum_stream(seed, LEFTOVER_KEY)
        assignments.append(
            Assignment(
                unit_id=strata.leftover_unit_id,
                treatment=int(gen.integers(0, 2)),
                stratum_id=None,
                seed_fingerprint=fingerprint(seed, "leftover"),
            )
        )
    return assignments


def simple_randomization(dataset: Dataset | int, p: float, seed: int) -> list[Assignment]:
    """Complete randomization: exactly round(n * p) treated, chosen uniformly."""
    n = len(dataset) if not isinstance(dataset, int) else dataset
    if not (0.0 < p < 1.0):
        raise InvalidProbability(p)
    if int(n * p) < 1:
        raise InvalidProbability(p)
    m = int(round(n * p))
    gen = stratum_stream(seed, SIMPLE_KEY)
    treated = np.zeros(n, dtype=np.int8)
    treated[gen.permutation(n)[:m]] = 1
    ids = dataset.unit_ids if isinstance(dataset, Dataset) else [str(i) for i in range(n)]
    tag = fingerprint(seed, "simple")
    return [
        Assignment(unit_id=ids[i], treatment=int(treated[i]), stratum_id=None, seed_fingerprint=tag)
        for i in range(n)
    ]


def write_assignments_csv(
    assignments: list[Assignment], method_tag: str, path, header_comment: str | None = None
) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "stratum_id", "treatment", "method_tag", "seed_fingerprint"])
        for a in assignments:
            writer.writerow(
                [
                    a.unit_id,
                    "" if a.stratum_id is None else a.stratum_id,
                    a.treatment,
                    method_tag,
                    a.seed_fingerprint,
                ]
            )
