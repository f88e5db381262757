"""Run configuration: one JSON file drives the whole pipeline.

The file carries the dataset path, schema, experiment context, backend
selection, allocation, design method, master seed, and simulation
settings.  CLI overrides (--seed/--out/--backend) are folded into the
resolved dictionary before hashing, so the config hash embedded in output
files identifies exactly what ran.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import CovariateSchema, schema_from_dict
from .errors import ConfigError, DataError, StratkitError
from .harness import DesignSpec, ScoreSpec, SyntheticDGP, make_linear_dgp
from .predictor import ExperimentContext, MockLinearBackend, MockNoiseBackend, RemoteBackend
from .rng import fingerprint

DEFAULT_API_KEY_ENV = "STRATKIT_API_KEY"


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def seed_fingerprint(self) -> str:
        return fingerprint(self.seed)

    @property
    def header_comment(self) -> str:
        return f"config_hash={self.config_hash} seed_fingerprint={self.seed_fingerprint}"

    @property
    def allocation(self) -> float:
        p = self.raw.get("allocation", 0.5)
        if not isinstance(p, (int, float)) or not (0.0 < p < 1.0):
            raise ConfigError(f"allocation must lie strictly between 0 and 1, got {p!r}")
        return float(p)

    @property
    def output_dir(self) -> Path:
        out = self.raw.get("output_dir", "out")
        path = Path(out)
        if not path.is_absolute():
            path = self.base_dir / path
        return path

    @property
    def parallelism(self) -> int:
        value = int(self.raw.get("parallelism", 1))
        if value < 1:
            raise ConfigError(f"parallelism must be >= 1, got {value}")
        return value

    @property
    def dataset_path(self) -> Path:
        if "dataset" not in self.raw:
            raise ConfigError("config has no 'dataset' path")
        path = Path(self.raw["dataset"])
        if not path.is_absolute():
            path = self.base_dir / path
        return path

    def schema(self) -> CovariateSchema:
        if "schema" not in self.raw:
            raise ConfigError("config has no 'schema' block")
        try:
            return schema_from_dict(self.raw["schema"])
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def context(self) -> ExperimentContext:
        block = self.raw.get("context")
        if not isinstance(block, dict):
            raise ConfigError("config has no 'context' block (experiment background for prompts)")
        try:
            return ExperimentContext(
                background=block["background"],
                outcome_definition=block["outcome_definition"],
                outcome_type_label=block["outcome_type_label"],
                control_description=block["control_description"],
                treatment_description=block["treatment_description"],
                example_control_value=str(block["example_control_value"]),
                example_treatment_value=str(block["example_treatment_value"]),
            )
        except KeyError as exc:
            raise ConfigError(f"context block missing field {exc.args[0]!r}") from exc
        except StratkitError as exc:
            raise ConfigError(str(exc)) from exc

    def backend(self, schema: CovariateSchema | None = None):
        block = dict(self.raw.get("backend") or {})
        name = block.get("name")
        if name == "remote":
            endpoint = block.get("endpoint")
            model = block.get("model")
            if not endpoint or not model:
                raise ConfigError("remote backend needs 'endpoint' and 'model'")
            key_env = block.get("api_key_env", DEFAULT_API_KEY_ENV)
            return RemoteBackend(
                endpoint=endpoint,
                model_id=model,
                api_key=os.environ.get(key_env),
                timeout=float(block.get("timeout", 60.0)),
            )
        if name == "mock-linear":
            if schema is None:
                schema = self.schema()
            return MockLinearBackend(
                schema=schema,
                intercepts=tuple(block.get("intercepts", (0.0, 0.0))),
                coefficients=block.get("coefficients", {}),
            )
        if name == "mock-noise":
            return MockNoiseBackend(seed=int(block.get("seed", self.seed)), scale=float(block.get("scale", 1.0)))
        raise ConfigError(f"unknown backend {name!r} (expected remote, mock-linear, or mock-noise)")

    @property
    def max_description_chars(self) -> int | None:
        block = self.raw.get("prompt") or {}
        limit = block.get("max_description_chars")
        if limit is None:
            return None
        limit = int(limit)
        if limit < 1:
            raise ConfigError("prompt.max_description_chars must be positive")
        return limit

    # -- design ----------------------------------------------------------

    def design(self) -> dict:
        block = self.raw.get("design")
        if not isinstance(block, dict) or "method" not in block:
            raise ConfigError("config has no 'design' block with a 'method'")
        return block

    # -- simulation ------------------------------------------------------

    def simulation(self) -> dict:
        block = self.raw.get("simulation")
        if not isinstance(block, dict):
            raise ConfigError("config has no 'simulation' block")
        return block

    def simulation_specs(self) -> list[DesignSpec]:
        methods = self.simulation().get("methods")
        if not methods:
            raise ConfigError("simulation block lists no methods")
        specs = []
        names = set()
        for i, m in enumerate(methods):
            if not isinstance(m, dict) or "method" not in m:
                raise ConfigError(f"simulation method #{i} must be an object with a 'method' field")
            name = m.get("name", m["method"])
            if name in names:
                raise ConfigError(f"duplicate simulation method name {name!r}")
            names.add(name)
            try:
                specs.append(
                    DesignSpec(
                        name=name,
                        method=m["method"],
                        block_size=int(m.get("block_size", 2)),
                        lambda_=m.get("lambda"),
                        covariates=tuple(m.get("covariates", ())),
                        categorical=tuple(m.get("categorical", ())),
                        ridge_epsilon=float(m.get("ridge_epsilon", 1e-8)),
                    )
                )
            except StratkitError as exc:
                raise ConfigError(str(exc)) from exc
        return specs

    def dgp(self) -> tuple[SyntheticDGP, ScoreSpec] | None:
        block = self.simulation().get("dgp")
        if block is None:
            return None
        try:
            dgp = make_linear_dgp(
                dim=int(block["dim"]),
                beta=block.get("beta"),
                gamma=block.get("gamma"),
                alpha0=float(block.get("alpha0", 0.0)),
                alpha1=float(block.get("alpha1", 0.0)),
                noise_sd=float(block.get("noise_sd", 1.0)),
                categorical_bins=block.get("categorical_bins"),
            )
        except (KeyError, TypeError, ValueError, StratkitError) as exc:
            raise ConfigError(f"malformed dgp block: {exc}") from exc
        score_block = block.get("score") or {}
        score = ScoreSpec(
            kind=score_block.get("kind", "exact"),
            rho=float(score_block.get("rho", 1.0)),
            scale=float(score_block.get("scale", 1.0)),
        )
        return dgp, score


def load_config(path, seed: int | None = None, out: str | None = None, backend: str | None = None) -> RunConfig:
    """Read and resolve a config file, folding in CLI overrides."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if seed is not None:
        raw["seed"] = int(seed)
    if out is not None:
        raw["output_dir"] = out
    if backend is not None:
        raw.setdefault("backend", {})
        raw["backend"] = dict(raw["backend"])
        raw["backend"]["name"] = backend
    if "seed" in raw and not isinstance(raw["seed"], int):
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}")
    return RunConfig(raw=raw, base_dir=path.parent.resolve())
