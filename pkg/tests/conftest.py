import numpy as np
import pytest

from survae.data import Feature, FeatureSchema, SurvivalData, fit_preprocessor
from survae.model import SurvaeConfig, init_model

MIXED_SCHEMA = FeatureSchema(
    (
        Feature("age", "real"),
        Feature("marker", "real"),
        Feature("treated", "binary"),
        Feature("stage", "categorical", 3),
    ),
    time_column="time",
    event_column="event",
    time_unit="days",
)


def mixed_data(n: int, seed: int = 0) -> SurvivalData:
    rng = np.random.default_rng(seed)
    x = np.column_stack([
        rng.normal(60, 10, n),
        rng.normal(0, 2, n),
        rng.integers(0, 2, n),
        rng.integers(0, 3, n),
    ]).astype(float)
    times = rng.uniform(1, 100, n).round(3)
    events = rng.integers(0, 2, n)
    return SurvivalData(MIXED_SCHEMA, x, times, events, {"stage": ["I", "II", "III"]}, None, "mixed")


def small_model(data: SurvivalData, latent_dim=2, hidden=8, family="weibull", seed=0):
    """Random weights and biases, so no ReLU input sits exactly at a kink."""
    cfg = SurvaeConfig(latent_dim=latent_dim, hidden_width=hidden, time_family=family, seed=seed)
    rng = np.random.default_rng(seed)
    model = init_model(data.schema, fit_preprocessor(data), data.times.max(), cfg, rng, data.levels)
    for arr in model.param_arrays().values():
        arr[...] = rng.normal(0, 0.5, arr.shape)
    return model


@pytest.fixture
def mixed():
    return mixed_data(16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
