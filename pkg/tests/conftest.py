"""Shared fixtures: bundled problems and seeded random instances."""
import os

import pytest

from measure_mdp.core.mdp import FiniteMdp, random_mdp
from measure_mdp.handlers.artifacts import load_problem

PROBLEMS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "problems")


def problem_path(name: str) -> str:
    return os.path.join(PROBLEMS_DIR, f"{name}.json")


def load_mdp(name: str) -> FiniteMdp:
    return load_problem(problem_path(name))[0]


@pytest.fixture
def dissipative_mdp() -> FiniteMdp:
    return load_mdp("dissipative")


@pytest.fixture
def anti_dissipative_mdp() -> FiniteMdp:
    return load_mdp("anti_dissipative")


@pytest.fixture
def three_state_mdp() -> FiniteMdp:
    return load_mdp("three_state")


@pytest.fixture
def two_cycle_mdp() -> FiniteMdp:
    return FiniteMdp([[[0.0, 1.0]], [[1.0, 0.0]]], [[0.0], [0.0]], 0.9)


@pytest.fixture
def random_mdps():
    """25 seeded instances with n <= 4, m <= 3 and gamma in {0.8, 0.9, 0.99}."""
    shapes = [(2, 2), (3, 2), (4, 2), (3, 3), (4, 3)]
    gammas = [0.8, 0.9, 0.99]
    return [
        random_mdp(n, m, gammas[seed % 3], seed)
        for seed, (n, m) in enumerate(shape for shape in shapes for _ in range(5))
    ]


@pytest.fixture
def problem_file():
    return problem_path
