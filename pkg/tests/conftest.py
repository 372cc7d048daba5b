import pytest

from dopp.generate import bp_multi_like
from dopp.pipeline import PipelineConfig
from dopp.search import SAConfig

ACCEPTANCE_LINES: list[str] = []


def small_config(**kw) -> PipelineConfig:
    base = dict(
        synthetic_netlist={"kind": "bp_multi_like", "seed": 0, "n_logic": 200, "n_nets": 500},
        sa=SAConfig(iterations=4000, cooling_rate=0.998, initial_temperature=0.05, grid_resolution=16, seed=0),
        backend={"kind": "synthetic", "seed": 0, "eta": 1.0, "sigma": 0.1},
        max_parallel_evals=4,
    )
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def small_netlist():
    return bp_multi_like(0, n_logic=200, n_nets=500)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
