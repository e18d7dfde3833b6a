"""Baselines and trace metrics: full-feedback fit, regret, cumulative loss,
convergence point, and random projection of features."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve

from .bandit_core import Context, DimensionMismatchError
from .environment import ImputedContext, RoundRecord


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineTheta:
    theta_star: NDArray[np.float64]  # shape (k, d)
    lambda_used: float

    def predict(self, x: ArrayLike) -> NDArray[np.float64]:
        return self.theta_star @ np.asarray(x, dtype=np.float64)

    def action(self, x: ArrayLike) -> int:
        return int(np.argmin(self.predict(x)))


@dataclass(frozen=True)
class RegretCurve:
    regret: NDArray[np.float64]
    loss: NDArray[np.float64]

    @property
    def final(self) -> float:
        return float(self.regret[-1]) if self.regret.size else 0.0


def fit_full_feedback(imputed: Sequence[ImputedContext], lam: float) -> BaselineTheta:
    """Ridge regression of every action's loss on the features, using the full
    loss vectors of the pool.

    All actions share the design matrix, so one Cholesky factorization serves
    all ``k`` right-hand sides.
    """
    if not imputed:
        raise MetricsError("cannot fit a baseline on an empty pool")
    if not lam > 0:
        raise MetricsError(f"lambda must be > 0, got {lam!r}")
    d = imputed[0].context.d
    k = imputed[0].dr_losses.shape[0]
    if any(item.context.d != d or item.dr_losses.shape != (k,) for item in imputed):
        raise DimensionMismatchError("pool entries have inconsistent dimensions")
    X = np.stack([item.context.features for item in imputed])
    L = np.stack([item.dr_losses for item in imputed])
    gram = X.T @ X + lam * np.eye(d)
    theta = cho_solve(cho_factor(gram), X.T @ L).T
    return BaselineTheta(theta_star=theta, lambda_used=float(lam))


def baseline_loss(baseline: BaselineTheta, imputed: Sequence[ImputedContext]) -> float:
    """Mean loss of the baseline's greedy policy over the pool."""
    if not imputed:
        raise MetricsError("empty pool")
    return float(
        np.mean([item.dr_losses[baseline.action(item.context.features)] for item in imputed])
    )


def cumulative_loss(trace: Sequence[RoundRecord]) -> NDArray[np.float64]:
    return np.cumsum(np.array([r.loss for r in trace], dtype=np.float64))


def cumulative_regret(
    trace: Sequence[RoundRecord],
    baseline: BaselineTheta,
    pool: Sequence[ImputedContext],
) -> RegretCurve:
    """Running ``sum(loss_s - dr_loss_s[pi*(x_s)])``.

    The counterfactual loss of the baseline's action comes from the pool entry
    the round's context was drawn from.
    """
    losses = np.array([r.loss for r in trace], dtype=np.float64)
    ref = np.empty_like(losses)
    for i, r in enumerate(trace):
        if r.pool_index is None or not (0 <= r.pool_index < len(pool)):
            raise MetricsError(f"round {r.t}: context is not in the pool")
        item = pool[r.pool_index]
        ref[i] = item.dr_losses[baseline.action(r.context.features)]
    return RegretCurve(regret=np.cumsum(losses - ref), loss=np.cumsum(losses))


def convergence_point(
    trace: Sequence[RoundRecord], best_sets: Mapping[str, frozenset[int] | set[int]]
) -> Optional[int]:
    """First round ``t`` after which every chosen action is in its class's best set.

    Returns None when the last action is outside its best set (or the trace is
    empty).
    """
    missing = sorted({str(r.class_label) for r in trace} - set(best_sets))
    if missing:
        raise MetricsError(f"no best set for classes {missing}")
    point: Optional[int] = None
    for r in reversed(trace):
        if r.action not in best_sets[str(r.class_label)]:
            break
        point = r.t
    return point


def failures_before(trace: Sequence[RoundRecord], t: Optional[int]) -> dict[str, int]:
    """Failures per class among rounds strictly before ``t`` (all rounds if None)."""
    counts: dict[str, int] = defaultdict(int)
    for r in trace:
        counts[str(r.class_label)] += 0
        if (t is None or r.t < t) and not r.success:
            counts[str(r.class_label)] += 1
    return dict(counts)


@dataclass(frozen=True)
class ClassConvergence:
    point: Optional[int]
    failures: int  # failures of this class before ``point``; all of them if None


def class_convergence(
    trace: Sequence[RoundRecord], best_sets: Mapping[str, frozenset[int] | set[int]]
) -> dict[str, ClassConvergence]:
    """Convergence judged separately on each class's own rounds.

    A hard class whose best action still fails sometimes does not hold back
    the convergence of the others.
    """
    by_class: dict[str, list[RoundRecord]] = defaultdict(list)
    for r in trace:
        by_class[str(r.class_label)].append(r)
    out = {}
    for label, rounds in sorted(by_class.items()):
        point = convergence_point(rounds, best_sets)
        fails = sum(1 for r in rounds if (point is None or r.t < point) and not r.success)
        out[label] = ClassConvergence(point, fails)
    return out


def action_histogram(trace: Sequence[RoundRecord], k: int) -> dict[str, list[int]]:
    hist: dict[str, list[int]] = {}
    for r in trace:
        hist.setdefault(str(r.class_label), [0] * k)[r.action] += 1
    return dict(sorted(hist.items()))


class RandomProjection:
    """Seeded Gaussian projection from ``D`` to ``d_target`` dimensions.

    Entries are drawn from N(0, 1/d_target), so squared norms are preserved in
    expectation. ``d_target == D`` is the identity.
    """

    def __init__(self, D: int, d_target: int, seed: int = 0) -> None:
        if not (1 <= d_target <= D):
            raise MetricsError(f"target dimension must be in [1, {D}], got {d_target}")
        self.D = D
        self.d_target = d_target
        self.seed = seed
        if d_target == D:
            self.matrix = None
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, D, d_target]))
            self.matrix = rng.normal(0.0, 1.0 / np.sqrt(d_target), size=(D, d_target))

    def __call__(self, features: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.D:
            raise DimensionMismatchError(f"expected {self.D} features, got {x.shape[-1]}")
        if self.matrix is None:
            return np.array(x, copy=True)
        return x @ self.matrix

    def project_pool(self, pool: Sequence[ImputedContext]) -> list[ImputedContext]:
        out = []
        for item in pool:
            c = item.context
            out.append(
                ImputedContext(Context(self(c.features), c.item_id, c.class_label), item.dr_losses, item.best_set)
            )
        return out


def reduce_dimension(features: ArrayLike, d_target: int, seed: int = 0) -> NDArray[np.float64]:
    x = np.asarray(features, dtype=np.float64)
    return RandomProjection(x.shape[-1], d_target, seed)(x)


def summarize_trace(trace: Sequence[RoundRecord], best_sets: Mapping[str, frozenset[int]], k: int) -> dict:
    point = convergence_point(trace, best_sets)
    return {
        "rounds": len(trace),
        "total_loss": float(sum(r.loss for r in trace)),
        "successes": int(sum(r.success for r in trace)),
        "convergence_point": point,
        "failures_before_convergence": failures_before(trace, point) if point is not None else None,
        "class_convergence": {
            c: {"point": v.point, "failures": v.failures}
            for c, v in class_convergence(trace, best_sets).items()
        },
        "action_histogram": action_histogram(trace, k),
        "best_sets": {c: sorted(s) for c, s in sorted(best_sets.items())},
    }
