"""Hyper-parameter sweeps over independent seeded runs.

Each (cell, seed) run draws its random streams from ``(scenario.seed, seed)``
only, so a cell's numbers do not depend on the grid order, on which other
cells exist, or on how many worker processes are used. Every cell sees the
same seeds (common random numbers), which sharpens comparisons between cells.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .scenario import ScenarioConfig, run_scenario

log = logging.getLogger(__name__)

SWEEPABLE = ("lambda", "d", "epsilon", "alpha")


@dataclass
class SweepCell:
    params: dict[str, Any]
    losses: list[float] = field(default_factory=list)
    regrets: list[float] = field(default_factory=list)
    pi_star_losses: list[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def seeds(self) -> int:
        return len(self.losses)

    @property
    def mean(self) -> Optional[float]:
        return float(np.mean(self.losses)) if self.losses else None

    @property
    def std(self) -> Optional[float]:
        return float(np.std(self.losses, ddof=1)) if len(self.losses) >= 2 else None

    @property
    def ci95(self) -> Optional[float]:
        return ci95_halfwidth(self.losses)

    @property
    def regret_mean(self) -> Optional[float]:
        return float(np.mean(self.regrets)) if self.regrets else None

    @property
    def regret_ci95(self) -> Optional[float]:
        return ci95_halfwidth(self.regrets)

    @property
    def pi_star_loss(self) -> Optional[float]:
        return float(np.mean(self.pi_star_losses)) if self.pi_star_losses else None


@dataclass
class SweepReport:
    param_names: tuple[str, ...]
    cells: list[SweepCell]

    def best(self) -> Optional[SweepCell]:
        """Cell with the lowest mean cumulative loss (first one on ties)."""
        ok = [c for c in self.cells if c.error is None and c.mean is not None]
        return min(ok, key=lambda c: c.mean) if ok else None

    def cell(self, **params: Any) -> SweepCell:
        for c in self.cells:
            if all(c.params.get(k) == v for k, v in params.items()):
                return c
        raise KeyError(params)


def ci95_halfwidth(values: Sequence[float]) -> Optional[float]:
    """Normal-approximation half-width ``1.96 * std / sqrt(n)``; None below 2 samples."""
    n = len(values)
    if n < 2:
        return None
    return 1.96 * float(np.std(values, ddof=1)) / math.sqrt(n)


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    if not grid:
        raise ValueError("sweep grid is empty")
    unknown = sorted(set(grid) - set(SWEEPABLE))
    if unknown:
        raise ValueError(f"cannot sweep {unknown}; choose from {list(SWEEPABLE)}")
    names = list(grid)
    for name in names:
        if len(grid[name]) == 0:
            raise ValueError(f"grid entry {name!r} has no values")
    return [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]


def _run_one(scenario: ScenarioConfig, params: dict[str, Any], seed_index: int) -> dict:
    try:
        cfg = scenario.with_overrides(**params)
        problems = cfg.validate_runtime()
        if problems:
            return {"error": "; ".join(problems)}
        result = run_scenario(cfg, seed_index)
    except Exception as exc:  # noqa: BLE001 - a failing cell is reported, never dropped
        return {"error": f"{type(exc).__name__}: {exc}"}
    out = {"loss": result.summary["total_loss"]}
    if "regret" in result.summary:
        out["regret"] = result.summary["regret"]
        out["pi_star_loss"] = result.summary["pi_star_loss"]
    return out


def sweep(
    scenario: ScenarioConfig,
    grid: Mapping[str, Sequence[Any]],
    seeds: int,
    parallelism: int = 1,
) -> SweepReport:
    """Run every grid cell for ``seeds`` seeds and aggregate final cumulative loss.

    Regret and baseline loss are aggregated too when ``scenario.baseline`` is set.
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    combos = expand_grid(grid)
    tasks = [(i, s) for i in range(len(combos)) for s in range(seeds)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_one, scenario, combos[i], s) for i, s in tasks]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(scenario, combos[i], s) for i, s in tasks]

    cells = [SweepCell(params=dict(p)) for p in combos]
    for (i, _), res in zip(tasks, results):
        cell = cells[i]
        if "error" in res:
            if cell.error is None:
                cell.error = res["error"]
                log.warning("sweep cell %s failed: %s", cell.params, res["error"])
            continue
        cell.losses.append(res["loss"])
        if "regret" in res:
            cell.regrets.append(res["regret"])
            cell.pi_star_losses.append(res["pi_star_loss"])
    for cell in cells:
        if cell.error is not None:
            # partial results from a failing cell would be misleading
            cell.losses, cell.regrets, cell.pi_star_losses = [], [], []
    return SweepReport(param_names=tuple(grid), cells=cells)
