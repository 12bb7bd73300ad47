import functools
from pathlib import Path

import numpy as np
import pytest

from llebkit import nets, pipeline
from llebkit.config import load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# lines printed in the terminal summary by the acceptance module
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def desk_config(method: str, M: int = 1):
    """The shipped two-moons profile for ``method``."""
    return load_config(CONFIGS / f"two_moons_{method}.yaml").replace(ensemble_size=M)


@functools.lru_cache(maxsize=None)
def desk_data(seed: int):
    return pipeline.load_data(desk_config("default"), seed)


@functools.lru_cache(maxsize=None)
def desk_run(method: str, seed: int, M: int = 1):
    """Trained run, cached for the whole session."""
    return pipeline.train_run(desk_config(method, M), seed, desk_data(seed))


@functools.lru_cache(maxsize=None)
def desk_report(method: str, seed: int, M: int = 1):
    return pipeline.evaluate_run(desk_config(method, M), desk_run(method, seed, M), desk_data(seed))


@pytest.fixture(scope="session")
def moons():
    return desk_data(0)


@pytest.fixture(scope="session")
def ml_params():
    """Maximum-likelihood two-moons classifier (seed 0, desk profile)."""
    return desk_run("default", 0).members[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_arch(h: int = 3, c: int = 2, inp: int = 2, dropout: float = 0.0):
    layers = [nets.Linear(inp, h), nets.ReLU()]
    if dropout:
        layers.append(nets.Dropout(dropout))
    layers.append(nets.Linear(h, c))
    return nets.Architecture((inp,), tuple(layers))
