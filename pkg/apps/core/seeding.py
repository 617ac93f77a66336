"""
Seed derivation. Every random draw in the toolkit comes from a
numpy Generator seeded through these helpers, so a master seed fully
determines corpora, initializations and mixture draws.
"""
import numpy as np


def derive_seed(master: int, *tags: int) -> int:
    """Stable 32-bit seed for the stream named by (master, *tags)."""
    return int(np.random.SeedSequence([int(master), *(int(t) for t in tags)]).generate_state(1)[0])


def spawn_seeds(master: int, count: int) -> list[int]:
    """`count` independent child seeds, identical for identical master seeds."""
    children = np.random.SeedSequence(int(master)).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def generator(master: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
