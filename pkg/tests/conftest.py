import pytest
import torch

from tailor.dataio import SynthSpec, generate_synthetic, load

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic set for fast end-to-end checks."""
    root = tmp_path_factory.mktemp("tiny")
    spec = SynthSpec(counts={"train": 40, "valid": 16, "test": 16})
    return load(generate_synthetic(root, spec, seed=0))


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default 200/50/50 synthetic set."""
    return load(generate_synthetic(tmp_path_factory.mktemp("synth"), seed=7))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
