import dataclasses

import numpy as np
import pytest

from starec import SearchConfig, SyntheticSpec, TrainConfig, generate_synthetic, temporal_split
from starec.training import Trainer

TOY_SPEC = SyntheticSpec(n_users=30, n_items=20, n_categories=5, events_per_user=(8, 12),
                         period_range=(3, 6), mean_gap=2.0, seed=3)


def toy_configs(**train_overrides):
    fields = dict(dim=4, mlp_hidden=(4,), dropout=0.0, epochs=2, batch_size=8, seed=0, init_scale=0.3)
    train = TrainConfig(**{**fields, **train_overrides})
    search = SearchConfig(seq_len=5, n_similar_users=1)
    return train, search


@pytest.fixture(scope="session")
def toy_histories():
    return generate_synthetic(TOY_SPEC)


@pytest.fixture(scope="session")
def toy_split(toy_histories):
    return temporal_split(toy_histories)


@pytest.fixture
def toy_trainer(toy_histories):
    train, search = toy_configs()
    return Trainer(toy_histories, train, search)


def make_trainer(histories, **train_overrides):
    search_overrides = train_overrides.pop("search", {})
    train, search = toy_configs(**train_overrides)
    return Trainer(histories, train, dataclasses.replace(search, **search_overrides))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
