"""Simulated environments and the online interaction loop.

Two environments are provided. ``ReplayEnvironment`` replays contexts from a
pool whose full loss vectors were imputed from logged bandit data with the
doubly-robust correction. ``SyntheticEnvironment`` draws contexts and
Bernoulli outcomes from known per-class success rates and serves as ground
truth for tests.

Both follow the same rule for the current item: it is replaced only after a
successful attempt. Failures keep the same item on the plate.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .bandit_core import (
    Context,
    LinUCB,
    PolicyState,
    Strategy,
    learn,
    linucb_scores,
    sample_action,
)

BEST_SET_TOL = 1e-9


class EnvError(ValueError):
    """Invalid environment construction or use."""


@dataclass(frozen=True)
class LoggedExample:
    item_id: str
    class_label: str
    features: NDArray[np.float64]
    logged_action: int
    loss: float
    propensity: float

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.loss not in (0, 1):
            raise EnvError(f"logged loss must be 0 or 1, got {self.loss!r}")
        if not (0.0 < self.propensity <= 1.0):
            raise EnvError(f"propensity must be in (0, 1], got {self.propensity!r}")
        if self.logged_action < 0:
            raise EnvError(f"logged action must be non-negative, got {self.logged_action}")


@dataclass(frozen=True)
class ImputedContext:
    context: Context
    dr_losses: NDArray[np.float64]
    best_set: frozenset[int]

    def __post_init__(self) -> None:
        v = np.asarray(self.dr_losses, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise EnvError("dr_losses must be a finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "dr_losses", v)
        object.__setattr__(self, "best_set", frozenset(int(a) for a in self.best_set))

    @property
    def class_label(self) -> Optional[str]:
        return self.context.class_label


def best_actions(mean_losses: Sequence[float], tol: float = BEST_SET_TOL) -> frozenset[int]:
    """All actions whose loss is within ``tol`` of the minimum."""
    v = np.asarray(mean_losses, dtype=np.float64)
    return frozenset(int(a) for a in np.flatnonzero(v <= v.min() + tol))


def herding_estimate(
    dataset: Sequence[LoggedExample], k: Optional[int] = None
) -> dict[str, NDArray[np.float64]]:
    """Per-class mean observed loss of every action.

    Raises if any (class, action) cell has no examples, listing every empty cell.
    """
    if not dataset:
        raise EnvError("herding estimate needs a non-empty dataset")
    if k is None:
        k = 1 + max(ex.logged_action for ex in dataset)
    sums: dict[str, NDArray[np.float64]] = defaultdict(lambda: np.zeros(k))
    counts: dict[str, NDArray[np.int64]] = defaultdict(lambda: np.zeros(k, dtype=np.int64))
    for ex in dataset:
        if ex.logged_action >= k:
            raise EnvError(f"logged action {ex.logged_action} outside [0, {k})")
        sums[ex.class_label][ex.logged_action] += ex.loss
        counts[ex.class_label][ex.logged_action] += 1
    empty = [
        f"({label!r}, {a})"
        for label in sorted(counts)
        for a in range(k)
        if counts[label][a] == 0
    ]
    if empty:
        raise EnvError("no logged examples for cells: " + ", ".join(empty))
    return {label: sums[label] / counts[label] for label in sorted(counts)}


def impute_dr_losses(
    dataset: Sequence[LoggedExample], herding: dict[str, NDArray[np.float64]]
) -> list[ImputedContext]:
    """Full loss vectors via the doubly-robust correction of the herding estimate.

    For each example the logged action gets ``m_a + (l - m_a) / p`` and every
    other action keeps the class mean ``m_a``.
    """
    missing = sorted({ex.class_label for ex in dataset} - set(herding))
    if missing:
        raise EnvError(f"herding estimate lacks classes: {missing}")
    best = {label: best_actions(m) for label, m in herding.items()}
    pool = []
    for ex in dataset:
        means = herding[ex.class_label]
        dr = np.array(means, dtype=np.float64, copy=True)
        a = ex.logged_action
        dr[a] = means[a] + (ex.loss - means[a]) / ex.propensity
        ctx = Context(ex.features, item_id=ex.item_id, class_label=ex.class_label)
        pool.append(ImputedContext(ctx, dr, best[ex.class_label]))
    return pool


@dataclass(frozen=True)
class ClassSpec:
    label: str
    center: NDArray[np.float64]
    noise_scale: float
    success_rates: NDArray[np.float64]

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=np.float64)
        s = np.asarray(self.success_rates, dtype=np.float64)
        if not np.all(np.isfinite(c)):
            raise EnvError(f"class {self.label!r}: center must be finite")
        if not (math.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise EnvError(f"class {self.label!r}: noise_scale must be >= 0")
        if np.any((s < 0) | (s > 1)):
            raise EnvError(f"class {self.label!r}: success rates must lie in [0, 1]")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "success_rates", s)

    @property
    def mean_losses(self) -> NDArray[np.float64]:
        return 1.0 - self.success_rates


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ClassSpec, ...]
    k: int
    d: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise EnvError("synthetic spec needs at least one class")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise EnvError(f"duplicate class labels in {labels}")
        for c in self.classes:
            if c.center.shape != (self.d,):
                raise EnvError(f"class {c.label!r}: center has shape {c.center.shape}, expected ({self.d},)")
            if c.success_rates.shape != (self.k,):
                raise EnvError(f"class {c.label!r}: expected {self.k} success rates")

    def by_label(self, label: str) -> ClassSpec:
        for c in self.classes:
            if c.label == label:
                return c
        raise EnvError(f"unknown class {label!r}")

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticSpec:
        classes = tuple(
            ClassSpec(
                label=str(c["label"]),
                center=np.asarray(c["center"], dtype=np.float64),
                noise_scale=float(c.get("noise_scale", 0.0)),
                success_rates=np.asarray(c["success_rates"], dtype=np.float64),
            )
            for c in data["classes"]
        )
        d = int(data.get("d", len(classes[0].center) if classes else 0))
        k = int(data.get("k", len(classes[0].success_rates) if classes else 0))
        return cls(classes=classes, k=k, d=d)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "classes": [
                {
                    "label": c.label,
                    "center": c.center.tolist(),
                    "noise_scale": c.noise_scale,
                    "success_rates": c.success_rates.tolist(),
                }
                for c in self.classes
            ],
        }

    def sample_log(
        self, n_per_cell: int, rng: np.random.Generator, prefix: str = ""
    ) -> list[LoggedExample]:
        """Uniform-propensity bandit log, ``n_per_cell`` examples per (class, action) on average."""
        out = []
        p = 1.0 / self.k
        for c in self.classes:
            for i in range(n_per_cell * self.k):
                a = int(rng.integers(self.k))
                x = c.center + c.noise_scale * rng.standard_normal(self.d)
                loss = float(rng.random() >= c.success_rates[a])
                out.append(LoggedExample(f"{prefix}{c.label}-{i}", c.label, x, a, loss, p))
        return out


@dataclass(frozen=True)
class StepOutcome:
    loss: float
    success: bool


class Environment:
    """Common bookkeeping: the current item and resample-on-success.

    Subclasses implement ``_draw(class_label)`` which returns a context and the
    index of its entry in ``self.pool``, and ``_outcome(pool_index, action)``.
    """

    k: int
    feature_dim: int

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.pool: list[ImputedContext] = []
        self.transform: Optional[Callable[[NDArray[np.float64]], NDArray[np.float64]]] = None
        self._current: Optional[Context] = None
        self._current_index: Optional[int] = None
        self._draws = 0

    @property
    def d(self) -> int:
        return self.feature_dim if self.transform is None else self.transform.d_target

    def set_transform(self, transform) -> None:
        """Map every future context through ``transform`` (e.g. a random projection).

        ``transform`` must expose ``d_target``. Pool entries keep their raw
        features; only the contexts handed to the learner are transformed.
        """
        self.transform = transform

    @property
    def classes(self) -> list[str]:
        raise NotImplementedError

    def _draw(self, class_label: Optional[str]) -> tuple[Context, int]:
        raise NotImplementedError

    def best_set(self, class_label: str) -> frozenset[int]:
        raise NotImplementedError

    def best_sets(self) -> dict[str, frozenset[int]]:
        return {label: self.best_set(label) for label in self.classes}

    @property
    def context(self) -> Context:
        if self._current is None:
            raise EnvError("environment has no current context; call reset() first")
        return self._current

    @property
    def context_index(self) -> int:
        self.context
        return self._current_index  # type: ignore[return-value]

    def reset(self, class_label: Optional[str] = None) -> Context:
        """Draw a new item, optionally restricted to ``class_label``."""
        if class_label is not None and class_label not in self.classes:
            raise EnvError(f"class {class_label!r} is not available in this environment")
        ctx, idx = self._draw(class_label)
        self._draws += 1
        x = ctx.features if self.transform is None else self.transform(ctx.features)
        # Each draw is a new physical item, even if its features were seen before.
        ctx = Context(x, item_id=f"{ctx.item_id}#{self._draws}", class_label=ctx.class_label)
        self._current, self._current_index = ctx, idx
        return ctx

    def step(self, action: int, next_class: Optional[str] = None) -> StepOutcome:
        """Attempt ``action`` on the current item; on success draw the next item."""
        if not (0 <= action < self.k):
            raise EnvError(f"action {action} outside [0, {self.k})")
        outcome = self._outcome(self.context_index, int(action))
        if outcome.success:
            self.reset(next_class)
        return outcome

    def _outcome(self, index: int, action: int) -> StepOutcome:
        raise NotImplementedError


class ReplayEnvironment(Environment):
    """Replays imputed contexts; the loss of an action is its DR loss.

    Success means the DR loss is below ``success_threshold``.
    """

    def __init__(
        self,
        imputed: Sequence[ImputedContext],
        success_threshold: float = 0.5,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if not imputed:
            raise EnvError("replay environment needs a non-empty pool")
        if not (0.0 < success_threshold < 1.0):
            raise EnvError(f"success threshold must be in (0, 1), got {success_threshold!r}")
        super().__init__(rng if rng is not None else np.random.default_rng())
        self.pool = list(imputed)
        self.success_threshold = success_threshold
        self.k = int(self.pool[0].dr_losses.shape[0])
        self.feature_dim = self.pool[0].context.d
        by_class: dict[str, list[int]] = defaultdict(list)
        for i, item in enumerate(self.pool):
            if item.dr_losses.shape != (self.k,) or item.context.d != self.feature_dim:
                raise EnvError(f"pool entry {i} has inconsistent shape")
            by_class[str(item.class_label)].append(i)
        self._by_class = dict(by_class)
        self._best = {label: self.pool[idx[0]].best_set for label, idx in self._by_class.items()}

    @property
    def classes(self) -> list[str]:
        return sorted(self._by_class)

    def best_set(self, class_label: str) -> frozenset[int]:
        return self._best[class_label]

    def _draw(self, class_label: Optional[str]) -> tuple[Context, int]:
        if class_label is None:
            idx = int(self.rng.integers(len(self.pool)))
        else:
            members = self._by_class[class_label]
            idx = members[int(self.rng.integers(len(members)))]
        return self.pool[idx].context, idx

    def _outcome(self, index: int, action: int) -> StepOutcome:
        loss = float(self.pool[index].dr_losses[action])
        return StepOutcome(loss, loss < self.success_threshold)


def replay_environment(
    imputed: Sequence[ImputedContext],
    success_threshold: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> ReplayEnvironment:
    return ReplayEnvironment(imputed, success_threshold, rng)


class SyntheticEnvironment(Environment):
    """Ground-truth environment: Gaussian features around class centers and
    Bernoulli losses with known per-action success rates.

    Every drawn context is appended to ``pool`` with its expected loss vector,
    which lets regret be computed against the true optimum.
    """

    def __init__(self, spec: SyntheticSpec, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__(rng if rng is not None else np.random.default_rng())
        self.spec = spec
        self.k = spec.k
        self.feature_dim = spec.d
        self._best = {c.label: best_actions(c.mean_losses) for c in spec.classes}

    @property
    def classes(self) -> list[str]:
        return [c.label for c in self.spec.classes]

    def best_set(self, class_label: str) -> frozenset[int]:
        return self._best[class_label]

    def _sample(self, c: ClassSpec) -> NDArray[np.float64]:
        if c.noise_scale == 0:
            return np.array(c.center, copy=True)
        return c.center + c.noise_scale * self.rng.standard_normal(self.feature_dim)

    def _draw(self, class_label: Optional[str]) -> tuple[Context, int]:
        if class_label is None:
            c = self.spec.classes[int(self.rng.integers(len(self.spec.classes)))]
        else:
            c = self.spec.by_label(class_label)
        ctx = Context(self._sample(c), item_id=c.label, class_label=c.label)
        self.pool.append(ImputedContext(ctx, c.mean_losses, self._best[c.label]))
        return ctx, len(self.pool) - 1

    def _outcome(self, index: int, action: int) -> StepOutcome:
        c = self.spec.by_label(str(self.pool[index].class_label))
        success = bool(self.rng.random() < c.success_rates[action])
        return StepOutcome(0.0 if success else 1.0, success)

    def full_feedback_pool(self, n: int, rng: np.random.Generator) -> list[ImputedContext]:
        """``n`` contexts per class with their expected loss vectors."""
        out = []
        for c in self.spec.classes:
            for i in range(n):
                x = c.center + c.noise_scale * rng.standard_normal(self.feature_dim) if c.noise_scale else c.center
                if self.transform is not None:
                    x = self.transform(x)
                ctx = Context(x, item_id=f"{c.label}-{i}", class_label=c.label)
                out.append(ImputedContext(ctx, c.mean_losses, self._best[c.label]))
        return out


def synthetic_environment(
    spec: SyntheticSpec, rng: Optional[np.random.Generator] = None
) -> SyntheticEnvironment:
    return SyntheticEnvironment(spec, rng)


# -- schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Which class the next item comes from.

    ``iid``: any class, uniformly over the environment's contexts.
    ``cycle``: classes in the given order, advancing after every success.
    ``segments``: a fixed class per block of rounds, e.g. 20/5/5; the item is
    swapped at a block boundary even after a failure.
    """

    kind: str = "iid"
    classes: tuple[str, ...] = ()
    segments: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "segments", tuple((str(c), int(n)) for c, n in self.segments))
        if self.kind not in ("iid", "cycle", "segments"):
            raise EnvError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cycle" and not self.classes:
            raise EnvError("cycle schedule needs at least one class")
        if self.kind == "segments":
            if not self.segments:
                raise EnvError("segments schedule needs at least one segment")
            if any(n < 1 for _, n in self.segments):
                raise EnvError("segment lengths must be positive")

    @property
    def total_rounds(self) -> Optional[int]:
        return sum(n for _, n in self.segments) if self.kind == "segments" else None

    def labels(self) -> set[str]:
        return set(self.classes) | {c for c, _ in self.segments}

    def segment_class(self, t: int) -> Optional[str]:
        """Class that round ``t`` (1-based) must use, for segment schedules."""
        if self.kind != "segments":
            return None
        end = 0
        for label, n in self.segments:
            end += n
            if t <= end:
                return label
        return self.segments[-1][0]

    def cycler(self) -> Iterator[Optional[str]]:
        if self.kind == "cycle":
            return itertools.cycle(self.classes)
        return itertools.repeat(None)


@dataclass
class RoundRecord:
    t: int
    item_id: Optional[str]
    class_label: Optional[str]
    context: Context
    pool_index: Optional[int]
    action: int
    propensity: float
    loss: float
    success: bool
    cumulative_loss: float
    estimates: Optional[NDArray[np.float64]] = None
    widths: Optional[NDArray[np.float64]] = None


Trace = list[RoundRecord]


def run_protocol(
    env: Environment,
    policy: PolicyState,
    strategy: Strategy,
    T: int,
    rng: np.random.Generator,
    schedule: Optional[Schedule] = None,
    record_scores: Optional[bool] = None,
) -> tuple[Trace, PolicyState]:
    """Run ``T`` rounds of explore / sample / observe / learn.

    ``rng`` drives action sampling only; the environment owns its own stream.
    The policy is updated in place (pass a loaded checkpoint to warm-start).
    LinUCB rounds record per-arm estimates and widths unless
    ``record_scores`` is False.
    """
    if T < 1:
        raise EnvError(f"T must be >= 1, got {T}")
    if env.d != policy.hyper.d or env.k != policy.hyper.k:
        raise EnvError(
            f"environment (d={env.d}, k={env.k}) does not match policy "
            f"(d={policy.hyper.d}, k={policy.hyper.k})"
        )
    schedule = schedule or Schedule()
    unknown = schedule.labels() - set(env.classes)
    if unknown:
        raise EnvError(f"schedule uses classes missing from the environment: {sorted(unknown)}")
    if record_scores is None:
        record_scores = isinstance(strategy, LinUCB)

    upcoming = schedule.cycler()
    if schedule.kind == "segments":
        pending = None
        ctx = env.reset(schedule.segment_class(1))
    else:
        # class of the next item; a cycle advances only when an item is consumed
        ctx = env.reset(next(upcoming))
        pending = next(upcoming)
    trace: Trace = []
    total = 0.0
    for t in range(1, T + 1):
        forced = schedule.segment_class(t)
        if forced is not None and ctx.class_label != forced:
            ctx = env.reset(forced)
        estimates = widths = None
        if record_scores:
            estimates, widths = linucb_scores(policy, ctx, getattr(strategy, "alpha", 0.0))
        dist = strategy.explore(policy, ctx)
        action = sample_action(dist, rng)
        p = dist[action]
        index = env.context_index
        nxt = schedule.segment_class(t + 1) if schedule.kind == "segments" else pending
        outcome = env.step(action, nxt)
        if outcome.success and schedule.kind != "segments":
            pending = next(upcoming)
        learn(policy, ctx, action, outcome.loss, p)
        total += outcome.loss
        trace.append(
            RoundRecord(
                t=t,
                item_id=ctx.item_id,
                class_label=ctx.class_label,
                context=ctx,
                pool_index=index,
                action=action,
                propensity=p,
                loss=outcome.loss,
                success=outcome.success,
                cumulative_loss=total,
                estimates=estimates,
                widths=widths,
            )
        )
        ctx = env.context
    return trace, policy

