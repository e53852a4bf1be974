"""Seed substreams.

Every random quantity in an experiment is drawn from a generator keyed by
the master seed plus a fixed label, so adding a draw in one place never
shifts the numbers seen elsewhere.
"""

import numpy as np

GRAPH = 1
DATA = 2
ZINIT = 3
TRIAL_BASE = 4


def substream(seed, *labels):
    """Return an independent generator for ``(seed, *labels)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, labels)]))


def trial_stream(seed, k):
    """Generator for Monte Carlo trial ``k`` (label ``4 + k``)."""
    return substream(seed, TRIAL_BASE + k)
