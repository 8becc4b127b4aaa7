"""Deterministic, splittable random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, seeded
by a ``SeedSequence`` whose spawn key is the tuple of integer labels passed
to :func:`stream`. PCG64 and SeedSequence are specified bit-for-bit by numpy
and give identical draws on every platform, so a ``(seed, labels)`` pair
names one reproducible stream.
"""

import numpy as np

# stream labels
INIT = 1
DROPOUT = 2
SHUFFLE = 3
SELECT = 4
CLIENT = 5
PARTITION = 6
SYNTH = 7
SWEEP = 8


def stream(seed, *labels):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))


def client_stream(seed, client_index, round_idx):
    """Training stream for one client in one round."""
    return stream(seed, CLIENT, client_index, round_idx)
