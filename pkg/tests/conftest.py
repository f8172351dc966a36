import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def make_random_tree_records(rng: np.random.Generator, n_nodes: int,
                             max_level: int = 5) -> list[dict]:
    """Random rooted tree where every child sits strictly below its parent."""
    records = [{"id": 0, "name": "node0", "level": max_level, "parent_id": None}]
    for i in range(1, n_nodes):
        candidates = [r for r in records if r["level"] >= 1]
        parent = candidates[rng.integers(len(candidates))]
        level = int(rng.integers(0, parent["level"]))
        records.append({"id": i, "name": f"node{i}", "level": level,
                        "parent_id": parent["id"]})
    return records


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
