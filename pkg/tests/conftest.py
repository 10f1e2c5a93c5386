import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cobrar.dataset import InteractionDataset, split_user_based  # noqa: E402


def random_dataset(n_users, n_items, density, seed, min_per_user=1, max_per_user=None):
    """Random binary matrix where every user has at least ``min_per_user`` items."""
    rng = np.random.default_rng(seed)
    dense = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        if max_per_user is not None and dense[u].sum() > max_per_user:
            on = np.flatnonzero(dense[u])
            dense[u, rng.choice(on, size=len(on) - max_per_user, replace=False)] = False
        short = min_per_user - dense[u].sum()
        if short > 0:
            free = np.flatnonzero(~dense[u])
            dense[u, rng.choice(free, size=short, replace=False)] = True
    users, items = np.nonzero(dense)
    return InteractionDataset.from_pairs(users, items, n_users, n_items)


@pytest.fixture
def small_split():
    ds = random_dataset(20, 30, 0.3, seed=7, min_per_user=4)
    return split_user_based(ds, (0.7, 0.1, 0.2), seed=3)
