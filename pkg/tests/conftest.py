from pathlib import Path

import numpy as np
import pytest

from acceptance_report import RESULTS
from synthverify.panel import PanelDataset, VariableSchema, load_schema

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, title, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  {detail}")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def wage_schema():
    return load_schema(FIXTURES / "wage_schema.toml")


SMALL_SCHEMA = (
    VariableSchema("id", "entity-id"),
    VariableSchema("year", "year"),
    VariableSchema("x", "numeric"),
    VariableSchema("y", "numeric"),
)


def random_small_panel(rng: np.random.Generator, n_entities: int, n_years: int, slope: float = 0.5):
    """Balanced panel with y = 1 + slope * x + noise."""
    ids = np.repeat(np.arange(n_entities), n_years)
    years = np.tile(np.arange(1, n_years + 1), n_entities)
    x = rng.standard_normal(len(ids))
    y = 1.0 + slope * x + rng.standard_normal(len(ids))
    return PanelDataset.from_columns(SMALL_SCHEMA, {"id": ids, "year": years, "x": x, "y": y})
