"""Potential-outcome prediction: prompt rendering, response parsing,
backends (remote HTTP plus deterministic local mocks), and an append-only
prediction cache.

One prompt per unit requests both the control and the treatment prediction;
the response must carry exactly two numbers inside a ``<prediction>`` block.
Remote calls always run at temperature 0.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .data import CovariateSchema, Dataset, UnitRecord, render_unit_description, _display_value
from .errors import BackendError, StratkitError


class UnboundPlaceholder(StratkitError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"prompt placeholder {{{{{name}}}}} has no matching schema variable")


class ParseError(StratkitError):
    """Base for response-parsing failures."""


class MissingPredictionBlock(ParseError):
    def __init__(self):
        super().__init__("response contains no <prediction>...</prediction> block")


class WrongLineCount(ParseError):
    def __init__(self, found: int):
        self.found = found
        super().__init__(f"expected 2 prediction lines, found {found}")


class MalformedNumber(ParseError):
    def __init__(self, line: str):
        self.line = line
        super().__init__(f"cannot parse prediction line {line!r} as a number")


class BackendUnavailable(BackendError):
    def __init__(self, detail: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"backend unavailable after {attempts} attempts: {detail}")


class ParseFailure(BackendError):
    """Backend responded, but no attempt produced a parseable prediction."""

    def __init__(self, cause: ParseError, attempts: int):
        self.cause = cause
        self.attempts = attempts
        super().__init__(f"unparseable response after {attempts} attempts: {cause}")


class PredictionFailed(BackendError):
    """predict_dataset aggregate: one or more units failed after retries."""

    def __init__(self, failures: dict):
        self.failures = failures
        ids = ", ".join(sorted(failures))
        super().__init__(f"prediction failed for unit(s): {ids}")


@dataclass(frozen=True)
class ExperimentContext:
    """Experiment framing injected into every prompt."""

    background: str
    outcome_definition: str
    outcome_type_label: str
    control_description: str
    treatment_description: str
    example_control_value: str
    example_treatment_value: str

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not getattr(self, name):
                raise StratkitError(f"experiment context field {name!r} must be nonempty")
        if self.treatment_description == self.control_description:
            raise StratkitError("treatment and control descriptions must differ")


@dataclass(frozen=True)
class PredictionPair:
    unit_id: str
    y0_hat: float
    y1_hat: float
    backend_tag: str
    raw_response: str | None = None

    def __post_init__(self):
        if not (np.isfinite(self.y0_hat) and np.isfinite(self.y1_hat)):
            raise StratkitError(f"unit {self.unit_id!r}: predictions must be finite")


PROMPT_TEMPLATE = """You are an AI assistant tasked with predicting outcomes for individuals in an experiment based on their characteristics and treatment conditions.

<experiment_background>
{background}
</experiment_background>

<outcome_definition>
The outcome to predict is: {outcome_definition}
</outcome_definition>

<variable_descriptions>
{variable_descriptions}
</variable_descriptions>

<individual_characteristics>
{individual_characteristics}
</individual_characteristics>

<treatment_condition>
Control condition: {control_description}
Treatment condition: {treatment_description}
</treatment_condition>

Based on the information provided, predict the outcome for this individual under both the control condition (does not receive treatment) and the treatment condition (receives treatment).

Your response should contain only two numbers:
1. The predicted {outcome_type} under the control condition
2. The predicted {outcome_type} under the treatment condition

Format your response EXACTLY as follows:
<prediction>
[Control prediction]
[Treatment prediction]
</prediction>

Example response:
<prediction>
{example_control}
{example_treatment}
</prediction>

Do not provide any explanation or commentary."""

_PLACEHOLDER_RE = re.compile(r"\{\{([^{}]+)\}\}")


def _describe_variables(schema: CovariateSchema) -> str:
    lines = []
    for v in schema.variables:
        desc = v.description or v.name
        if v.units:
            desc = f"{desc} ({v.units})"
        lines.append(f"- {v.name}: {desc}")
    return "\n".join(lines)


def render_prompt(unit: UnitRecord, schema: CovariateSchema, ctx: ExperimentContext) -> str:
    """Instantiate the prediction prompt for one unit.

    ``{{variable_name}}`` placeholders (in the characteristics block and
    anywhere in the context text) are replaced with the unit's rendered
    values; a placeholder naming no schema variable raises
    UnboundPlaceholder.
    """
    text = PROMPT_TEMPLATE.format(
        background=ctx.background,
        outcome_definition=ctx.outcome_definition,
        variable_descriptions=_describe_variables(schema),
        individual_characteristics="\n".join(f"- {v.name}: {{{{{v.name}}}}}" for v in schema.variables),
        control_description=ctx.control_description,
        treatment_description=ctx.treatment_description,
        outcome_type=ctx.outcome_type_label,
        example_control=ctx.example_control_value,
        example_treatment=ctx.example_treatment_value,
    )

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in unit.values:
            raise UnboundPlaceholder(name)
        return _display_value(unit.values[name])

    return _PLACEHOLDER_RE.sub(substitute, text)


_PREDICTION_RE = re.compile(r"<prediction>(.*?)</prediction>", re.DOTALL)


def parse_prediction(response: str) -> tuple[float, float]:
    """Extract (control, treatment) predictions from a response.

    The first ``<prediction>`` block wins; within it, the first nonempty
    line is the control prediction and the second the treatment prediction.
    """
    match = _PREDICTION_RE.search(response)
    if match is None:
        raise MissingPredictionBlock()
    lines = [line.strip() for line in match.group(1).splitlines()]
    lines = [line for line in lines if line]
    if len(lines) != 2:
        raise WrongLineCount(len(lines))
    numbers = []
    for line in lines:
        try:
            numbers.append(float(line))
        except ValueError:
            raise MalformedNumber(line) from None
    return numbers[0], numbers[1]


def cache_key(prompt: str, backend_tag: str, model_id: str) -> str:
    """256-bit content hash over every prompt-visible input."""
    h = hashlib.sha256()
    for part in (prompt, backend_tag, model_id):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class PredictionCache:
    """Append-only JSON Lines cache keyed by content hash.

    A hit bypasses any backend call.  Writes are serialized by a lock so
    concurrent prediction workers can share one cache.  Unparseable raw
    responses go to a sibling ``failures.jsonl`` for audit.
    """

    def __init__(self, path=None, failures_path=None):
        self.path = Path(path) if path else None
        self.failures_path = Path(failures_path) if failures_path else None
        self._entries: dict[str, PredictionPair] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._entries[rec["key"]] = PredictionPair(
                        unit_id=rec["unit_id"],
                        y0_hat=rec["y0_hat"],
                        y1_hat=rec["y1_hat"],
                        backend_tag=rec["backend_tag"],
                        raw_response=rec.get("raw_response"),
                    )

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> PredictionPair | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, pair: PredictionPair) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = pair
            if self.path:
                rec = {
                    "key": key,
                    "unit_id": pair.unit_id,
                    "y0_hat": pair.y0_hat,
                    "y1_hat": pair.y1_hat,
                    "backend_tag": pair.backend_tag,
                    "raw_response": pair.raw_response,
                }
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")

    def record_failure(self, unit_id: str, key: str, raw_response: str, error: str) -> None:
        with self._lock:
            if not self.failures_path:
                return
            rec = {"unit_id": unit_id, "key": key, "raw_response": raw_response, "error": error}
            with self.failures_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


class RemoteBackend:
    """Minimal chat-completion-style HTTP backend.

    POST body: ``{"model": ..., "temperature": 0.0, "messages": [{"role":
    "user", "content": prompt}]}``; the completion text is read from
    ``choices[0].message.content``.  The API key, when present, is sent as
    a bearer token.
    """

    def __init__(self, endpoint: str, model_id: str, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key = api_key
        self.timeout = timeout
        self.calls = 0

    @property
    def tag(self) -> str:
        return f"remote:{self.model_id}"

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model_id,
            "temperature": 0.0,
            "messages": [{"role": "user", "content": prompt}],
        }
        self.calls += 1
        try:
            resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"transport error: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc


class MockLinearBackend:
    """Deterministic linear oracle: Y(d) = intercept[d] + sum_j coef[j][d] * x_j
    over numeric covariates, read back out of the rendered prompt so the
    backend interface stays uniform with the remote one."""

    def __init__(self, schema: CovariateSchema, intercepts=(0.0, 0.0), coefficients=None):
        self.schema = schema
        self.intercepts = (float(intercepts[0]), float(intercepts[1]))
        self.coefficients = {k: (float(v[0]), float(v[1])) for k, v in (coefficients or {}).items()}
        for name in self.coefficients:
            if name not in schema.numeric_names():
                raise StratkitError(f"mock-linear coefficient for unknown numeric variable {name!r}")
        self.calls = 0
        self.model_id = "mock-linear"

    @property
    def tag(self) -> str:
        digest = hashlib.sha256(
            json.dumps([self.intercepts, sorted(self.coefficients.items())]).encode()
        ).hexdigest()[:12]
        return f"mock-linear:{digest}"

    def predict_values(self, values: dict) -> tuple[float, float]:
        y = [self.intercepts[0], self.intercepts[1]]
        for name, (c0, c1) in self.coefficients.items():
            x = float(values[name])
            y[0] += c0 * x
            y[1] += c1 * x
        return y[0], y[1]

    def complete(self, prompt: str) -> str:
        self.calls += 1
        values = _characteristics_from_prompt(prompt)
        y0, y1 = self.predict_values(values)
        return f"<prediction>\n{y0!r}\n{y1!r}\n</prediction>"


class MockNoiseBackend:
    """Seeded standard-normal predictions, independent of covariates in the
    statistical sense (the stream is keyed by a hash of the prompt, so the
    same unit always gets the same noise)."""

    def __init__(self, seed: int, scale: float = 1.0):
        self.seed = int(seed)
        self.scale = float(scale)
        self.calls = 0
        self.model_id = "mock-noise"

    @property
    def tag(self) -> str:
        return f"mock-noise:{self.seed}:{self.scale!r}"

    def complete(self, prompt: str) -> str:
        self.calls += 1
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        sub = int.from_bytes(digest[:8], "big")
        key = np.array([self.seed & ((1 << 64) - 1), sub], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        y0, y1 = gen.standard_normal(2) * self.scale
        return f"<prediction>\n{y0!r}\n{y1!r}\n</prediction>"


def _characteristics_from_prompt(prompt: str) -> dict:
    match = re.search(r"<individual_characteristics>\n(.*?)\n</individual_characteristics>", prompt, re.DOTALL)
    if match is None:
        raise MissingPredictionBlock()
    values = {}
    for line in match.group(1).splitlines():
        if not line.startswith("- "):
            continue
        name, _, raw = line[2:].partition(": ")
        values[name] = raw
    return values


def predict_unit(
    unit: UnitRecord,
    schema: CovariateSchema,
    ctx: ExperimentContext,
    backend,
    cache: PredictionCache,
    retries: int = 3,
    backoff: float = 1.0,
) -> PredictionPair:
    """Predict one unit's potential outcomes, consulting the cache first.

    Transport errors and unparseable responses are each retried up to
    ``retries`` attempts with exponential backoff; the last raw response of
    a parse failure is persisted for audit before giving up.
    """
    prompt = render_prompt(unit, schema, ctx)
    key = cache_key(prompt, backend.tag, getattr(backend, "model_id", ""))
    hit = cache.get(key)
    if hit is not None:
        return hit

    last_error: Exception | None = None
    for attempt in range(retries):
        if attempt and backoff:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            raw = backend.complete(prompt)
        except BackendError as exc:
            last_error = exc
            continue
        try:
            y0, y1 = parse_prediction(raw)
        except ParseError as exc:
            cache.record_failure(unit.unit_id, key, raw, str(exc))
            last_error = exc
            continue
        pair = PredictionPair(unit_id=unit.unit_id, y0_hat=y0, y1_hat=y1, backend_tag=backend.tag, raw_response=raw)
        cache.put(key, pair)
        return pair

    if isinstance(last_error, ParseError):
        raise ParseFailure(last_error, retries)
    raise BackendUnavailable(str(last_error), retries)


@dataclass
class PredictStats:
    units: int = 0
    cache_hits: int = 0
    backend_calls: int = 0
    failures: int = 0


def predict_dataset(
    dataset: Dataset,
    ctx: ExperimentContext,
    backend,
    cache: PredictionCache,
    parallelism: int = 1,
    retries: int = 3,
    backoff: float = 1.0,
) -> tuple[list[PredictionPair], PredictStats]:
    """Predict every unit, in dataset order, with bounded concurrency.

    Partial progress lands in the cache as it completes, so an interrupted
    run resumes without repeating calls.  If any unit still fails after
    retries the whole call raises PredictionFailed listing the unit ids;
    successful units remain cached.
    """
    if parallelism < 1:
        raise StratkitError("parallelism must be >= 1")
    calls_before = getattr(backend, "calls", 0)
    results: dict[int, PredictionPair] = {}
    failures: dict[str, str] = {}
    hits = 0

    def work(index_unit):
        index, unit = index_unit
        prompt = render_prompt(unit, dataset.schema, ctx)
        key = cache_key(prompt, backend.tag, getattr(backend, "model_id", ""))
        cached = cache.get(key) is not None
        pair = predict_unit(unit, dataset.schema, ctx, backend, cache, retries=retries, backoff=backoff)
        return index, pair, cached

    items = list(enumerate(dataset.units))
    safe_work = _safe(work)
    if parallelism == 1:
        outcomes = [safe_work(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(safe_work, items))
    for out in outcomes:
        if isinstance(out, tuple):
            index, pair, cached = out
            results[index] = pair
            hits += cached
        else:
            unit_id, err = out.unit_id, out.error
            failures[unit_id] = err

    stats = PredictStats(
        units=len(dataset.units),
        cache_hits=hits,
        backend_calls=getattr(backend, "calls", 0) - calls_before,
        failures=len(failures),
    )
    if failures:
        raise PredictionFailed(failures)
    return [results[i] for i in range(len(dataset.units))], stats


class _UnitFailure:
    def __init__(self, unit_id: str, error: str):
        self.unit_id = unit_id
        self.error = error


def _safe(fn):
    def wrapped(item):
        try:
            return fn(item)
        except BackendError as exc:
            return _UnitFailure(item[1].unit_id, str(exc))

    return wrapped
