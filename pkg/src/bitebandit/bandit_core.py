"""Linear contextual-bandit policies over precomputed feature vectors.

Every arm keeps its own importance-weighted ridge statistics ``A``, ``b`` and
``theta = A^-1 b``. The learner is shared by all exploration strategies; the
strategies only differ in how they turn the per-arm loss estimates into an
action distribution.

Losses, not rewards: smaller is better everywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg as sla


# Above this dimension the inverse is maintained by Sherman-Morrison instead of
# being refactorized after every update.
DENSE_SOLVE_MAX_DIM = 256


class BanditError(ValueError):
    """Invalid input to a bandit operation."""


class DimensionMismatchError(BanditError):
    pass


@dataclass(frozen=True)
class HyperParams:
    """Hyper-parameters of the ridge oracle and its exploration strategies.

    Parameters
    ----------
    d : int
        Feature dimension.
    k : int
        Number of actions.
    lam : float
        L2 regularization; every arm starts with ``A = lam * I``.
    epsilon : float
        Uniform exploration rate for epsilon-greedy, in ``[0, 1)``.
    alpha : float
        Confidence width multiplier for LinUCB.
    """

    d: int
    k: int
    lam: float = 1.0
    epsilon: float = 0.0
    alpha: float = 0.0

    def __post_init__(self) -> None:
        problems = []
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            problems.append(f"d must be a positive integer, got {self.d!r}")
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            problems.append(f"k must be a positive integer, got {self.k!r}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            problems.append(f"lambda must be > 0, got {self.lam!r}")
        if not (0.0 <= self.epsilon < 1.0):
            problems.append(f"epsilon must be in [0, 1), got {self.epsilon!r}")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            problems.append(f"alpha must be >= 0, got {self.alpha!r}")
        if problems:
            raise BanditError("; ".join(problems))


@dataclass(frozen=True)
class Context:
    """One observed item: its feature vector plus metadata.

    ``item_id`` and ``class_label`` never influence action selection or
    learning; they only travel along for bookkeeping.
    """

    features: NDArray[np.float64]
    item_id: Optional[str] = None
    class_label: Optional[str] = None

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise BanditError(f"features must be a non-empty vector, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise BanditError("features contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def d(self) -> int:
        return int(self.features.shape[0])


@dataclass
class ArmState:
    A: NDArray[np.float64]
    b: NDArray[np.float64]
    theta: NDArray[np.float64]
    _A_inv: Optional[NDArray[np.float64]] = field(default=None, repr=False, compare=False)

    @classmethod
    def fresh(cls, d: int, lam: float) -> ArmState:
        return cls(
            A=lam * np.eye(d),
            b=np.zeros(d),
            theta=np.zeros(d),
            _A_inv=np.eye(d) / lam,
        )

    @property
    def A_inv(self) -> NDArray[np.float64]:
        if self._A_inv is None:
            self._A_inv = sla.cho_solve(sla.cho_factor(self.A), np.eye(self.A.shape[0]))
        return self._A_inv

    def update(self, x: NDArray[np.float64], weight: float, target: float) -> None:
        """Add ``weight * x x^T`` to A and ``weight * target * x`` to b."""
        self.A += weight * np.outer(x, x)
        self.b += (weight * target) * x
        d = x.shape[0]
        if d <= DENSE_SOLVE_MAX_DIM:
            factor = sla.cho_factor(self.A)
            self.theta = sla.cho_solve(factor, self.b)
            self._A_inv = None
        else:
            u = self.A_inv @ x
            self._A_inv = self.A_inv - np.outer(u, u) * (weight / (1.0 + weight * (x @ u)))
            self.theta = self._A_inv @ self.b


@dataclass
class PolicyState:
    hyper: HyperParams
    arms: list[ArmState]
    rounds_learned: int = 0
    algorithm: Optional[str] = None

    def __post_init__(self) -> None:
        if len(self.arms) != self.hyper.k:
            raise BanditError(f"expected {self.hyper.k} arms, got {len(self.arms)}")
        d = self.hyper.d
        for a, arm in enumerate(self.arms):
            if arm.A.shape != (d, d) or arm.b.shape != (d,) or arm.theta.shape != (d,):
                raise DimensionMismatchError(f"arm {a} has statistics of the wrong dimension")

    @property
    def thetas(self) -> NDArray[np.float64]:
        """Stacked per-arm weights, shape ``(k, d)``."""
        return np.stack([arm.theta for arm in self.arms])


@dataclass(frozen=True)
class ActionDistribution:
    probs: NDArray[np.float64]

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise BanditError("action distribution must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise BanditError("action probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise BanditError(f"action probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def one_hot(cls, k: int, action: int) -> ActionDistribution:
        p = np.zeros(k)
        p[action] = 1.0
        return cls(p)

    def __getitem__(self, action: int) -> float:
        return float(self.probs[action])


def init_policy(hyper: HyperParams, algorithm: Optional[str] = None) -> PolicyState:
    return PolicyState(
        hyper=hyper,
        arms=[ArmState.fresh(hyper.d, hyper.lam) for _ in range(hyper.k)],
        algorithm=algorithm,
    )


def _features(policy: PolicyState, ctx: Context | ArrayLike) -> NDArray[np.float64]:
    x = ctx.features if isinstance(ctx, Context) else np.asarray(ctx, dtype=np.float64)
    if x.shape != (policy.hyper.d,):
        raise DimensionMismatchError(
            f"context has shape {x.shape}, policy expects ({policy.hyper.d},)"
        )
    return x


def _check_action(policy: PolicyState, action: int) -> int:
    if not (0 <= int(action) < policy.hyper.k) or int(action) != action:
        raise BanditError(f"action {action!r} outside [0, {policy.hyper.k})")
    return int(action)


def predict_losses(policy: PolicyState, ctx: Context) -> NDArray[np.float64]:
    """Estimated loss ``theta_a . x`` for every arm."""
    x = _features(policy, ctx)
    return policy.thetas @ x


def learn(
    policy: PolicyState, ctx: Context, action: int, loss: float, propensity: float
) -> PolicyState:
    """Importance-weighted ridge update of the arm that was played.

    The update weight is ``1 / propensity``, so after any sequence of calls the
    arm's ``theta`` solves ``(sum_t w_t x_t x_t^T + lam I) theta = sum_t w_t c_t x_t``.
    The policy is modified in place and returned.
    """
    x = _features(policy, ctx)
    a = _check_action(policy, action)
    if not (0.0 < propensity <= 1.0):
        raise BanditError(f"propensity must be in (0, 1], got {propensity!r}")
    if not math.isfinite(loss):
        raise BanditError(f"loss must be finite, got {loss!r}")
    policy.arms[a].update(x, 1.0 / propensity, float(loss))
    policy.rounds_learned += 1
    return policy


def _argmin(values: NDArray[np.float64]) -> int:
    # np.argmin returns the first minimum, which is the lowest-index tie-break.
    return int(np.argmin(values))


def greedy_action(policy: PolicyState, ctx: Context) -> int:
    return _argmin(predict_losses(policy, ctx))


def greedy_distribution(policy: PolicyState, ctx: Context) -> ActionDistribution:
    return ActionDistribution.one_hot(policy.hyper.k, greedy_action(policy, ctx))


def epsilon_greedy_distribution(
    policy: PolicyState, ctx: Context, epsilon: float
) -> ActionDistribution:
    """Mix the greedy one-hot with a uniform ``epsilon / k`` floor."""
    if not (0.0 <= epsilon < 1.0):
        raise BanditError(f"epsilon must be in [0, 1), got {epsilon!r}")
    k = policy.hyper.k
    probs = np.full(k, epsilon / k)
    probs[greedy_action(policy, ctx)] += 1.0 - epsilon
    return ActionDistribution(probs)


def linucb_scores(
    policy: PolicyState, ctx: Context, alpha: float
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-arm loss estimate and confidence width ``alpha * ||x||_{A^-1}``.

    Returns
    -------
    estimates, widths : ndarray of shape (k,)
    """
    if not (math.isfinite(alpha) and alpha >= 0):
        raise BanditError(f"alpha must be >= 0, got {alpha!r}")
    x = _features(policy, ctx)
    estimates = policy.thetas @ x
    quad = np.array([x @ arm.A_inv @ x for arm in policy.arms])
    widths = alpha * np.sqrt(np.maximum(quad, 0.0))
    return estimates, widths


def linucb_select(
    policy: PolicyState, ctx: Context, alpha: float
) -> tuple[int, ActionDistribution]:
    """Pick the arm with the lowest loss LCB ``estimate - width``.

    Minimizing the loss lower bound is the same as maximizing the reward upper
    bound. The policy is deterministic, so the distribution is one-hot.
    """
    estimates, widths = linucb_scores(policy, ctx, alpha)
    action = _argmin(estimates - widths)
    return action, ActionDistribution.one_hot(policy.hyper.k, action)


def success_ucb(estimates: ArrayLike, widths: ArrayLike) -> NDArray[np.float64]:
    """Optimistic success probability ``1 - (estimate - width)``, clipped to [0, 1]."""
    return np.clip(1.0 - (np.asarray(estimates) - np.asarray(widths)), 0.0, 1.0)


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> int:
    """Draw one action by inverting the CDF with a single uniform from ``rng``.

    Exactly one uniform is consumed per call, even for one-hot distributions,
    so the stream position does not depend on the distribution's shape.
    """
    if not isinstance(dist, ActionDistribution):
        dist = ActionDistribution(dist)
    u = rng.random()
    cdf = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= cdf.size:
        # u landed in the rounding gap above the last cumsum entry
        idx = int(np.flatnonzero(dist.probs > 0)[-1])
    return idx


# -- strategies ---------------------------------------------------------------


@dataclass(frozen=True)
class Greedy:
    name = "greedy"

    def explore(self, policy: PolicyState, ctx: Context) -> ActionDistribution:
        return greedy_distribution(policy, ctx)

    @property
    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class EpsilonGreedy:
    epsilon: float
    name = "epsilon_greedy"

    def __post_init__(self) -> None:
        if not (0.0 <= self.epsilon < 1.0):
            raise BanditError(f"epsilon must be in [0, 1), got {self.epsilon!r}")

    def explore(self, policy: PolicyState, ctx: Context) -> ActionDistribution:
        return epsilon_greedy_distribution(policy, ctx, self.epsilon)

    @property
    def params(self) -> dict:
        return {"epsilon": self.epsilon}


@dataclass(frozen=True)
class LinUCB:
    alpha: float
    name = "linucb"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise BanditError(f"alpha must be >= 0, got {self.alpha!r}")

    def explore(self, policy: PolicyState, ctx: Context) -> ActionDistribution:
        return linucb_select(policy, ctx, self.alpha)[1]

    @property
    def params(self) -> dict:
        return {"alpha": self.alpha}


Strategy = Greedy | EpsilonGreedy | LinUCB


def make_strategy(name: str, epsilon: float = 0.0, alpha: float = 0.0) -> Strategy:
    if name == "greedy":
        return Greedy()
    if name == "epsilon_greedy":
        return EpsilonGreedy(epsilon)
    if name == "linucb":
        return LinUCB(alpha)
    raise BanditError(f"unknown algorithm {name!r}")
