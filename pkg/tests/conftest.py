import itertools

import numpy as np
import pytest

from brl.func_approx import value_tables
from brl.mdp import BatchDistribution, TabularMdp, random_batch_distribution, random_mdp
from brl.seeding import stream


def small_instance(seed, S=3, A=2, H=2, floor=0.2):
    mdp = random_mdp(S, A, H, stream(seed, 0))
    return mdp, random_batch_distribution(mdp, stream(seed, 1), floor=floor)


def deterministic_chain(S=2, A=1, H=2, reward=0.0):
    """Every action moves s to (s + 1) mod S."""
    P = np.zeros((H, S, A, S))
    for s in range(S):
        P[:, s, :, (s + 1) % S] = 1.0
    return TabularMdp(P, np.full((H, S, A), reward))


def uniform_mu(mdp):
    H, S, A = mdp.shape
    return BatchDistribution(np.full((H, S, A), 1.0 / (S * A)))


def enumerate_tuples(mdp, mu, h, double=False):
    """All (s, a, s', [s'']) with their probabilities at step h."""
    S, A = mdp.num_states, mdp.num_actions
    for s, a in itertools.product(range(S), range(A)):
        if mu.mu[h, s, a] == 0:
            continue
        P = mdp.transitions[h, s, a]
        if double:
            for t1, t2 in itertools.product(range(S), range(S)):
                yield (s, a, t1, t2), mu.mu[h, s, a] * P[t1] * P[t2]
        else:
            for t in range(S):
                yield (s, a, t), mu.mu[h, s, a] * P[t]


def oracle_lds(mdp, mu, f):
    """Enumerate every (s, a, s', s'') with its probability; scalar arithmetic only."""
    V = value_tables(f)
    total = 0.0
    for h in range(mdp.horizon):
        for (s, a, t1, t2), p in enumerate_tuples(mdp, mu, h, double=True):
            y = mdp.rewards[h, s, a]
            total += p * ((f[h, s, a] - y - V[h + 1, t1]) ** 2 - 0.5 * (V[h + 1, t1] - V[h + 1, t2]) ** 2)
    return total / mdp.horizon


def oracle_bellman_error(mdp, mu, f):
    V = value_tables(f)
    total = 0.0
    for h in range(mdp.horizon):
        for s in range(mdp.num_states):
            for a in range(mdp.num_actions):
                target = mdp.rewards[h, s, a] + sum(mdp.transitions[h, s, a, t] * V[h + 1, t]
                                                    for t in range(mdp.num_states))
                total += mu.mu[h, s, a] * (f[h, s, a] - target) ** 2
    return total / mdp.horizon


@pytest.fixture
def instance():
    return small_instance(11)


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
