import numpy as np
import pytest

from confound_ope.core import Dataset
from confound_ope.tabular_mdp import TabularMDP, TabularPolicy

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_mdp(seed: int, n_states: int = 6, n_actions: int = 3, horizon: int = 3,
               discount: float = 0.9) -> TabularMDP:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1, 1, size=(n_states, n_actions, n_states))
    init = rng.dirichlet(np.ones(n_states))
    return TabularMDP.from_dense(P, R, init, horizon=horizon, discount=discount)


def random_policy(seed: int, n_states: int, n_actions: int, horizon: int | None = None,
                  floor: float = 0.05) -> TabularPolicy:
    rng = np.random.default_rng(seed)
    shape = (n_states,) if horizon is None else (horizon, n_states)
    p = rng.dirichlet(np.ones(n_actions), size=shape)
    p = (1 - floor * n_actions) * p + floor
    return TabularPolicy(p, f"random{seed}")


def toy_dataset(n: int = 200, seed: int = 0, horizon: int = 2, n_states: int = 3,
                n_actions: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    states = tuple(rng.integers(0, n_states, n) for _ in range(horizon))
    actions = rng.integers(0, n_actions, (n, horizon))
    rewards = rng.normal(size=(n, horizon))
    return Dataset(states, actions, rewards, 1.0, (n_actions,) * horizon)


@pytest.fixture(scope="session")
def sepsis_sim():
    from confound_ope.sepsis_sim import SepsisSimulator
    return SepsisSimulator()
