import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from bitebandit.environment import ClassSpec, SyntheticSpec

# Generated ground truth for three food classes: one roll-sensitive (best
# actions 1, 3 and 5), one dominated by the tilted pair (4, 5), and one where
# no action beats a coin flip.
ARCHETYPE_RATES = {
    "apple": [0.3, 0.9, 0.3, 0.9, 0.3, 0.9],
    "banana": [0.2, 0.2, 0.3, 0.3, 0.9, 0.9],
    "grape": [0.5] * 6,
}


def archetype_spec(centers=None, noise=0.0) -> SyntheticSpec:
    centers = np.eye(3) if centers is None else np.asarray(centers, dtype=float)
    classes = tuple(
        ClassSpec(label, centers[i], noise, np.array(rates))
        for i, (label, rates) in enumerate(ARCHETYPE_RATES.items())
    )
    return SyntheticSpec(classes, k=6, d=centers.shape[1])


@pytest.fixture
def spec_file(tmp_path) -> Path:
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.safe_dump(archetype_spec().to_dict()))
    return path


@pytest.fixture
def scenario_file(tmp_path, spec_file):
    def make(**overrides) -> Path:
        raw = {
            "environment": {"kind": "synthetic", "spec": spec_file.name},
            "algorithm": "epsilon_greedy",
            "hyper": {"lambda": 1.0, "epsilon": 0.1},
            "T": 60,
            "seed": 7,
            "schedule": {"kind": "cycle", "classes": ["apple", "banana", "grape"]},
        }
        raw.update(overrides)
        path = tmp_path / f"scenario{len(list(tmp_path.glob('scenario*')))}.json"
        path.write_text(json.dumps(raw))
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(results, key=lambda c: int(c[1:])):
            terminalreporter.write_line(results[cid])
