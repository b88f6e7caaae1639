"""Shared fixtures: small synthetic worlds reused across test modules."""

import numpy as np
import pytest

from promolab.datagen import GenConfig, generate_rct
from promolab.model import ModelConfig

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collector for one pass/fail line per acceptance criterion."""
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_world():
    """A 3-arm, 3000-customer trial with ground truth. Session-scoped; do not mutate."""
    cfg = GenConfig(
        n_customers=3000,
        coupon_values=np.array([0.0, 1.5, 3.0]),
        seed=427,
    )
    dataset, truth = generate_rct(cfg)
    return cfg, dataset, truth


@pytest.fixture(scope="session")
def fast_model_config():
    """A narrow full-architecture config that trains in a couple of seconds."""
    return ModelConfig(
        hidden_dims=(32, 32, 16, 8),
        batch_size=512,
        learning_rate=3e-3,
        max_epochs=12,
        patience_epochs=4,
        plateau_epochs=2,
    )
