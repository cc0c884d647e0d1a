import itertools

import numpy as np
import pytest

from revshield.core import EnvSpec, Environment


class DoubleIntegrator(Environment):
    """1-D point mass (position, velocity) with bounded acceleration."""

    name = "double_integrator"

    def __init__(self, dt=0.1, u_max=1.0):
        self.dt = dt
        super().__init__(EnvSpec(2, 1, (-u_max,), (u_max,), dt, 100))

    def _step_batch(self, states, actions):
        p, v = states[..., 0], states[..., 1]
        a = actions[..., 0]
        return np.stack([p + self.dt * v, v + self.dt * a], axis=-1)

    def _unsafe_batch(self, states):
        return np.zeros(states.shape[:-1], dtype=bool)

    def reward(self, state):
        return 0.0

    def sample_initial(self, rng_seed):
        return np.random.default_rng(rng_seed).uniform(-1, 1, size=2)


GRID = np.linspace(-1.0, 1.0, 5)


def all_grid_sequences(depth):
    return np.array(list(itertools.product(GRID, repeat=depth))).reshape(-1, depth, 1)


def brute_force_reachable(env, start, target, delta, depth=6):
    """Exhaustive search over grid action sequences of length <= depth.

    Returns the best closest-approach distance found; the pair counts as
    feasible when it is <= delta.
    """
    seqs = all_grid_sequences(depth)
    x = np.tile(np.asarray(start, dtype=float), (len(seqs), 1))
    best = np.linalg.norm(np.asarray(start) - target)
    for t in range(depth):
        x = env.dynamics.step_batch(x, seqs[:, t])
        best = min(best, float(np.min(np.linalg.norm(x - target, axis=1))))
    return best


@pytest.fixture
def double_integrator():
    return DoubleIntegrator()


# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
