import numpy as np
import pytest

from fedrkg.config import DatasetSpec, ExperimentConfig
from fedrkg.dataset import InteractionDataset, preprocess, synthetic_raw
from fedrkg.model import HyperParams


# (criterion, status, detail) lines collected by the acceptance module
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{status:4} criterion {criterion:2d}: {detail}")


def make_dataset(train, val, test, m, name="toy"):
    """Hand-built dataset from per-user item lists (ids are already dense)."""
    n = len(train)
    return InteractionDataset(
        user_keys=[str(u) for u in range(n)],
        item_keys=[str(i) for i in range(m)],
        train=[np.array(t, dtype=np.int64) for t in train],
        val=np.array(val, dtype=np.int64),
        test=np.array(test, dtype=np.int64),
        train_ts=[np.arange(len(t), dtype=np.int64) for t in train],
        val_ts=np.array([len(t) for t in train], dtype=np.int64),
        test_ts=np.array([len(t) + 1 for t in train], dtype=np.int64),
        name=name,
    )


@pytest.fixture(scope="session")
def small_dataset():
    return preprocess(synthetic_raw(n_users=30, n_items=60, mean_interactions=10, seed=3), 5, name="small")


def tiny_config(regime="adaptive_guidance", **hp):
    base = dict(d=4, T=6, T_int=3, E=1, E_gate=2, eta=0.1, eta_gate=0.05)
    base.update(hp)
    return ExperimentConfig(
        dataset=DatasetSpec(name="synthetic", min_interactions=5),
        hp=HyperParams(**base),
        regime=regime,
        eval_interval=2,
        seed=7,
    )
