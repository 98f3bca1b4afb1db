import pytest
import torch

from wplora.persona import DataConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(DataConfig(seed=0))


@pytest.fixture(scope="session")
def tiny_config():
    from wplora.model import ModelConfig

    # 16x16 grid is fixed by the frame layout; only width and depth shrink
    return ModelConfig(d_model=16, heads=2, blocks=1, t_dim=16)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Records one pass/fail line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(line):
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
