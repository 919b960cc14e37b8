import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixsgcl.dataset import dataset_from_edges  # noqa: E402


def random_bipartite(n_users, n_items, n_edges, seed):
    rng = np.random.default_rng(seed)
    pairs = set()
    # every node gets at least one edge
    for u in range(n_users):
        pairs.add((u, int(rng.integers(n_items))))
    for i in range(n_items):
        pairs.add((int(rng.integers(n_users)), i))
    while len(pairs) < n_edges:
        pairs.add((int(rng.integers(n_users)), int(rng.integers(n_items))))
    return np.array(sorted(pairs), dtype=np.int64)


@pytest.fixture
def small_dataset():
    """10 users x 15 items, every node with train degree >= 1."""
    train = random_bipartite(10, 15, 40, seed=3)
    valid = np.array([[u, (u * 7 + 1) % 15] for u in range(10)])
    valid = np.array([e for e in valid if not ((train == e).all(axis=1)).any()])
    test = np.array([[u, (u * 5 + 2) % 15] for u in range(10)])
    test = np.array([e for e in test if not ((train == e).all(axis=1)).any() and not ((valid == e).all(axis=1)).any()])
    return dataset_from_edges(10, 15, train, valid, test)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
