import os
from pathlib import Path

import numpy as np
import pytest

from icpns.data import Interactions

ROOT = Path(__file__).resolve().parents[1]


def ml100k_path() -> Path | None:
    """Location of the raw ML-100K ``u.data`` file, or None when it is not available."""
    env = os.environ.get("ICPNS_ML100K")
    for cand in ([Path(env)] if env else []) + [ROOT / "data" / "ml-100k" / "u.data"]:
        if cand.is_file():
            return cand
    return None


def random_interactions(rng, n_users, n_items, density=0.2) -> Interactions:
    dense = rng.random((n_users, n_items)) < density
    u, i = np.nonzero(dense)
    return Interactions.from_arrays(u, i, n_users, n_items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_path()
    if path is None:
        pytest.skip("ML-100K u.data not found (set ICPNS_ML100K or see README)")
    return path


def gradient_relative_error(state, graph, u, i, j, reg, n_layers, h=1e-5):
    """Norm-wise relative error between the analytic and central-difference gradient of one triplet."""
    from icpns.encoder import batch_loss, bpr_gradients

    users, pos, neg = np.array([u]), np.array([i]), np.array([j])
    grad, _ = bpr_gradients(state, graph, users, pos, neg, reg, n_layers)
    analytic = np.zeros_like(state.table)
    analytic[grad.rows] = grad.values
    numeric = np.zeros_like(state.table)
    table = state.table
    for r in range(table.shape[0]):
        for c in range(table.shape[1]):
            keep = table[r, c]
            table[r, c] = keep + h
            up = batch_loss(state, graph, users, pos, neg, reg, n_layers)
            table[r, c] = keep - h
            down = batch_loss(state, graph, users, pos, neg, reg, n_layers)
            table[r, c] = keep
            numeric[r, c] = (up - down) / (2 * h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """``report(number, title, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""
    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
