"""Scenario configuration and the single-run driver shared by the CLI and sweeps.

A scenario file (YAML or JSON) describes the environment, the algorithm and its
hyper-parameters, the horizon and the class schedule. Validation is total:
every problem is collected and reported before anything runs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np
import yaml

from . import data_io
from .bandit_core import HyperParams, PolicyState, init_policy, make_strategy
from .environment import (
    Environment,
    ImputedContext,
    ReplayEnvironment,
    Schedule,
    SyntheticEnvironment,
    SyntheticSpec,
    Trace,
    run_protocol,
)
from .metrics import (
    BaselineTheta,
    RandomProjection,
    baseline_loss,
    cumulative_regret,
    fit_full_feedback,
    summarize_trace,
)

DEFAULT_ACTION_NAMES = (
    "VS-parallel",
    "VS-perpendicular",
    "TV-parallel",
    "TV-perpendicular",
    "TA-parallel",
    "TA-perpendicular",
)

# Contexts per class drawn to fit the full-feedback baseline of a synthetic environment.
SYNTHETIC_BASELINE_SAMPLES = 200

_SYNTH_CLASS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["label", "center", "success_rates"],
    "properties": {
        "label": {"type": "string"},
        "center": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "noise_scale": {"type": "number", "minimum": 0},
        "success_rates": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 1,
        },
    },
}

SYNTHETIC_SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["classes"],
    "properties": {
        "k": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "classes": {"type": "array", "items": _SYNTH_CLASS, "minItems": 1},
    },
}

SCENARIO_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bitebandit scenario",
    "type": "object",
    "additionalProperties": False,
    "required": ["environment", "algorithm", "T"],
    "properties": {
        "environment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["replay", "synthetic"]},
                "pool": {"type": "string", "description": "imputed pool (JSON lines), replay only"},
                "spec": {
                    "description": "synthetic spec: a path or an inline object",
                    "anyOf": [{"type": "string"}, SYNTHETIC_SPEC_SCHEMA],
                },
                "success_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "algorithm": {"enum": ["greedy", "epsilon_greedy", "linucb"]},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "exclusiveMinimum": 0},
                "d": {"type": "integer", "minimum": 1},
                "epsilon": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "alpha": {"type": "number", "minimum": 0},
            },
        },
        "T": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "integer", "minimum": 1},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["iid", "cycle", "segments"]},
                "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "segments": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["class", "rounds"],
                        "properties": {
                            "class": {"type": "string"},
                            "rounds": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
        "warm_start": {"type": "string", "description": "checkpoint to start from"},
        "projection_seed": {"type": "integer", "minimum": 0},
        "baseline": {"type": "boolean", "description": "fit pi* and report regret"},
        "action_names": {"type": "array", "items": {"type": "string"}, "minItems": 1},
    },
}


class ConfigError(ValueError):
    """Scenario validation failed; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(self.problems))


@dataclass
class ScenarioConfig:
    environment_kind: str
    algorithm: str
    T: int
    lam: float = 1.0
    d: Optional[int] = None
    epsilon: float = 0.0
    alpha: float = 0.0
    seed: int = 0
    seeds: int = 1
    pool_path: Optional[Path] = None
    synthetic: Optional[SyntheticSpec] = None
    success_threshold: float = 0.5
    schedule: Schedule = field(default_factory=Schedule)
    warm_start: Optional[Path] = None
    projection_seed: int = 0
    baseline: bool = False
    action_names: tuple[str, ...] = DEFAULT_ACTION_NAMES
    # loaded lazily and shared by every run of the scenario
    _pool: Optional[list[ImputedContext]] = field(default=None, repr=False, compare=False)
    _checkpoint: Optional[bytes] = field(default=None, repr=False, compare=False)

    def with_overrides(self, **params: Any) -> ScenarioConfig:
        """Copy with hyper-parameters replaced; unknown names raise."""
        cfg = copy.copy(self)
        for name, value in params.items():
            if name == "lambda":
                cfg.lam = float(value)
            elif name == "d":
                cfg.d = int(value)
            elif name in ("epsilon", "alpha"):
                setattr(cfg, name, float(value))
            else:
                raise ConfigError([f"cannot override {name!r}"])
        return cfg

    # -- resources --------------------------------------------------------------

    def pool(self) -> list[ImputedContext]:
        if self._pool is None:
            self._pool = data_io.parse_pool(self.pool_path)
        return self._pool

    def native_dim(self) -> int:
        if self.environment_kind == "replay":
            return self.pool()[0].context.d
        return self.synthetic.d

    def n_actions(self) -> int:
        if self.environment_kind == "replay":
            return int(self.pool()[0].dr_losses.shape[0])
        return self.synthetic.k

    def classes(self) -> list[str]:
        if self.environment_kind == "replay":
            return sorted({str(item.class_label) for item in self.pool()})
        return [c.label for c in self.synthetic.classes]

    def warm_policy(self) -> Optional[PolicyState]:
        if self.warm_start is None:
            return None
        if self._checkpoint is None:
            self._checkpoint = Path(self.warm_start).read_bytes()
        return data_io.checkpoint_from_bytes(self._checkpoint)

    def hyper(self) -> HyperParams:
        return HyperParams(
            d=self.d or self.native_dim(),
            k=self.n_actions(),
            lam=self.lam,
            epsilon=self.epsilon,
            alpha=self.alpha,
        )

    def validate_runtime(self) -> list[str]:
        """Checks that need the referenced files; returns problems."""
        problems: list[str] = []
        try:
            D, k, labels = self.native_dim(), self.n_actions(), set(self.classes())
        except (OSError, data_io.DataFormatError, ValueError) as exc:
            return [f"environment: {exc}"]
        if self.environment_kind == "replay" and not self.pool():
            return ["environment.pool: pool is empty"]
        if self.d is not None and self.d > D:
            problems.append(f"hyper.d: {self.d} exceeds feature dimension {D}")
        unknown = sorted(self.schedule.labels() - labels)
        if unknown:
            problems.append(f"schedule: classes not in environment: {unknown}")
        if self.schedule.kind == "segments" and self.schedule.total_rounds != self.T:
            problems.append(
                f"schedule: segments cover {self.schedule.total_rounds} rounds but T = {self.T}"
            )
        if len(self.action_names) != k:
            problems.append(f"action_names: {len(self.action_names)} names for {k} actions")
        if self.warm_start is not None:
            try:
                warm = self.warm_policy()
            except (OSError, data_io.DataFormatError) as exc:
                problems.append(f"warm_start: {exc}")
            else:
                d = self.d or D
                if (warm.hyper.d, warm.hyper.k) != (d, k):
                    problems.append(
                        f"warm_start: checkpoint has d={warm.hyper.d}, k={warm.hyper.k}; "
                        f"scenario needs d={d}, k={k}"
                    )
                if warm.hyper.lam != self.lam:
                    problems.append(
                        f"warm_start: checkpoint lambda {warm.hyper.lam} differs from hyper.lambda {self.lam}"
                    )
        try:
            self.hyper()
        except ValueError as exc:
            problems.append(f"hyper: {exc}")
        return problems


def _schema_problems(raw: Any) -> list[str]:
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    return problems


def load_structured(path: Path) -> Any:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def parse_scenario(raw: Any, base_dir: Path = Path(".")) -> ScenarioConfig:
    """Validate a scenario mapping and build the config, or raise ConfigError."""
    problems = _schema_problems(raw)
    if problems:
        raise ConfigError(problems)
    env = raw["environment"]
    kind = env["kind"]
    hyper = raw.get("hyper", {})
    algorithm = raw["algorithm"]

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base_dir / q

    pool_path = synthetic = None
    if kind == "replay":
        if "pool" not in env:
            problems.append("environment.pool: required for replay environments")
        else:
            pool_path = resolve(env["pool"])
            if not pool_path.is_file():
                problems.append(f"environment.pool: no such file {pool_path}")
        if "spec" in env:
            problems.append("environment.spec: only valid for synthetic environments")
    else:
        if "spec" not in env:
            problems.append("environment.spec: required for synthetic environments")
        else:
            spec_raw = env["spec"]
            try:
                if isinstance(spec_raw, str):
                    spec_raw = load_structured(resolve(spec_raw))
                    inner = jsonschema.Draft202012Validator(SYNTHETIC_SPEC_SCHEMA)
                    for err in inner.iter_errors(spec_raw):
                        problems.append(f"environment.spec: {err.message}")
                if not problems:
                    synthetic = SyntheticSpec.from_dict(spec_raw)
            except (OSError, yaml.YAMLError, json.JSONDecodeError, ValueError) as exc:
                problems.append(f"environment.spec: {exc}")
        if "pool" in env:
            problems.append("environment.pool: only valid for replay environments")

    if algorithm == "epsilon_greedy" and "epsilon" not in hyper:
        problems.append("hyper.epsilon: required for epsilon_greedy")
    if algorithm == "linucb" and "alpha" not in hyper:
        problems.append("hyper.alpha: required for linucb")
    if "lambda" not in hyper and "warm_start" not in raw:
        problems.append("hyper.lambda: required unless warm_start is given")

    sched_raw = raw.get("schedule", {"kind": "iid"})
    schedule = Schedule()
    sk = sched_raw["kind"]
    if sk == "cycle" and "classes" not in sched_raw:
        problems.append("schedule.classes: required for cycle schedules")
    elif sk == "segments" and "segments" not in sched_raw:
        problems.append("schedule.segments: required for segments schedules")
    else:
        schedule = Schedule(
            kind=sk,
            classes=tuple(sched_raw.get("classes", ())) if sk == "cycle" else (),
            segments=tuple((s["class"], s["rounds"]) for s in sched_raw.get("segments", ())),
        )

    warm = resolve(raw["warm_start"]) if "warm_start" in raw else None
    if warm is not None and not warm.is_file():
        problems.append(f"warm_start: no such file {warm}")
    if problems:
        raise ConfigError(problems)

    cfg = ScenarioConfig(
        environment_kind=kind,
        algorithm=algorithm,
        T=int(raw["T"]),
        lam=float(hyper["lambda"]) if "lambda" in hyper else float("nan"),
        d=hyper.get("d"),
        epsilon=float(hyper.get("epsilon", 0.0)),
        alpha=float(hyper.get("alpha", 0.0)),
        seed=int(raw.get("seed", 0)),
        seeds=int(raw.get("seeds", 1)),
        pool_path=pool_path,
        synthetic=synthetic,
        success_threshold=float(env.get("success_threshold", 0.5)),
        schedule=schedule,
        warm_start=warm,
        projection_seed=int(raw.get("projection_seed", 0)),
        baseline=bool(raw.get("baseline", False)),
        action_names=tuple(raw.get("action_names", DEFAULT_ACTION_NAMES)),
    )
    if warm is not None and "lambda" not in hyper:
        try:
            cfg.lam = cfg.warm_policy().hyper.lam
        except (OSError, data_io.DataFormatError) as exc:
            raise ConfigError([f"warm_start: {exc}"]) from None
    problems = cfg.validate_runtime()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = load_structured(path)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return parse_scenario(raw, path.parent)


# -- running ------------------------------------------------------------------


@dataclass
class RunResult:
    trace: Trace
    policy: PolicyState
    env: Environment
    summary: dict
    baseline: Optional[BaselineTheta] = None
    regret: Optional[np.ndarray] = None


def seed_streams(seed: int, seed_index: int, n: int = 3) -> list[np.random.Generator]:
    """Independent generators for (environment, policy, baseline) of one run."""
    children = np.random.SeedSequence([seed, seed_index]).spawn(n)
    return [np.random.default_rng(c) for c in children]


def build_environment(cfg: ScenarioConfig, rng: np.random.Generator) -> Environment:
    if cfg.environment_kind == "replay":
        env: Environment = ReplayEnvironment(cfg.pool(), cfg.success_threshold, rng)
    else:
        env = SyntheticEnvironment(cfg.synthetic, rng)
    D = env.feature_dim
    if cfg.d is not None and cfg.d != D:
        env.set_transform(RandomProjection(D, cfg.d, cfg.projection_seed))
    return env


def run_scenario(cfg: ScenarioConfig, seed_index: int = 0) -> RunResult:
    env_rng, policy_rng, baseline_rng = seed_streams(cfg.seed, seed_index)
    env = build_environment(cfg, env_rng)
    policy = cfg.warm_policy()
    hyper = cfg.hyper()
    if policy is None:
        policy = init_policy(hyper, algorithm=cfg.algorithm)
    else:
        policy.algorithm = cfg.algorithm
    strategy = make_strategy(cfg.algorithm, epsilon=cfg.epsilon, alpha=cfg.alpha)
    trace, policy = run_protocol(env, policy, strategy, cfg.T, policy_rng, cfg.schedule)
    summary = summarize_trace(trace, env.best_sets(), env.k)
    summary["algorithm"] = cfg.algorithm
    result = RunResult(trace=trace, policy=policy, env=env, summary=summary)
    if cfg.baseline:
        fit_pool = baseline_pool(cfg, env, baseline_rng)
        result.baseline = fit_full_feedback(fit_pool, cfg.lam)
        result.regret = cumulative_regret(trace, result.baseline, env.pool).regret
        summary["regret"] = float(result.regret[-1])
        summary["pi_star_loss"] = baseline_loss(result.baseline, fit_pool)
    return result


def baseline_pool(cfg: ScenarioConfig, env: Environment, rng: np.random.Generator) -> list[ImputedContext]:
    """Full-feedback contexts in the learner's feature space."""
    if isinstance(env, SyntheticEnvironment):
        return env.full_feedback_pool(SYNTHETIC_BASELINE_SAMPLES, rng)
    pool = cfg.pool()
    if env.transform is not None:
        return env.transform.project_pool(pool)
    return pool
