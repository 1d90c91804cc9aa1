import numpy as np
import pytest

from nesyevo.policy import Literal, Policy, Rule


def random_rule(rng: np.random.Generator, n_atoms: int, max_body: int | None = None) -> Rule:
    max_body = max_body or n_atoms
    size = int(rng.integers(1, max_body + 1))
    atoms = rng.choice(n_atoms, size=size, replace=False)
    body = tuple(Literal(int(a), bool(rng.integers(2))) for a in atoms)
    return Rule(body, bool(rng.integers(2)))


def random_policy(
    rng: np.random.Generator,
    n_atoms: int,
    max_rules: int = 8,
    min_rules: int = 0,
    max_body: int | None = None,
) -> Policy:
    n_rules = int(rng.integers(min_rules, max_rules + 1))
    return Policy(n_atoms, tuple(random_rule(rng, n_atoms, max_body) for _ in range(n_rules)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
