"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, *key)``.  A stream is therefore addressable: the draws for
generation 7, particle block 3 of replicate 12 can be produced without touching
any other block, which is what makes results independent of scheduling.
"""

import numpy as np

# domain tags, kept distinct so that streams for different purposes never collide
ENV = 1
TREE_COUNTS = 2
TREE_STEPS = 3
SPINE = 4
REPLICATE = 5
ENVELOPE = 6
MOMENT = 7
PATH = 8


def stream(seed, *key):
    """Return a ``numpy.random.Generator`` backed by Philox keyed on ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *key):
    """Derive an independent 64-bit seed from ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
