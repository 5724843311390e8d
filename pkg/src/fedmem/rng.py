"""Named random streams derived from one root seed.

A stream is identified by a name and integer keys, e.g.
``stream(seed, "client", round, client_id)``. It is built as::

    SeedSequence(entropy=root_seed, spawn_key=(crc32(name), *keys))

so each (name, keys) pair gets an independent generator, and the draws a
client sees do not depend on which other clients ran or in what order.
"""

import zlib

import numpy as np

# stream names used across the package
CORPUS = "corpus"
POPULATION = "population"
CANARIES = "canaries"
INIT = "init"
ELIGIBILITY = "eligibility"
SAMPLING = "sampling"
CLIENT = "client"
NOISE = "noise"
AUDIT = "audit-references"


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(root_seed),
                                 spawn_key=(stream_key(name), *map(int, keys)))
    return np.random.Generator(np.random.PCG64(seq))
