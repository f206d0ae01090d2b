"""Derivation of independent RNG streams from a single master seed.

Every source of randomness in an experiment draws from its own stream,
keyed by (master seed, stream tag, *indices).  Streams are therefore
isolated: adding clients or rounds never perturbs existing streams.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are part of the reproducibility contract: changing
# them changes every derived stream.
TRAIN_DATA = 1
TEST_DATA = 2
PARTITION = 3
NOISE = 4  # per client: (seed, NOISE, client_id)
MODEL_INIT = 5
SELECTION = 6  # per round: (seed, SELECTION, round)
BATCH_ORDER = 7  # per client and round: (seed, BATCH_ORDER, client_id, round)
GMM = 8


def derive_seed(*parts: int) -> int:
    """Collapse a (master seed, tag, ...) tuple into a 64-bit integer seed."""
    seq = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(seq.generate_state(1, np.uint64)[0])


def stream(*parts: int) -> np.random.Generator:
    """Return a Generator seeded from the given (master seed, tag, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in parts)))
