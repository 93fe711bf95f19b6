"""Deterministic random-stream derivation.

Every random draw in the simulator comes from a Philox counter-based
generator keyed by ``(seed, purpose, ...)``. Server and clients can both
rebuild any stream from the shared seed alone, which is what lets the two
endpoints of the sketch channel agree on the projection without ever
transmitting it.
"""

import numpy as np

# Purpose tags for stream splitting. Keep stable: changing a tag changes
# every downstream draw.
SIGN_FLIPS = 0      # sketch operator: diagonal of random sign flips
SAMPLE_INDICES = 1  # sketch operator: subsampled output rows
DATA = 2            # synthetic data generation
INIT = 3            # shared model initialization
CLIENT = 4          # per-client mini-batch streams, keyed (CLIENT, client_id)
SAMPLING = 5        # server-side participant sampling
PROBE = 6           # diagnostics probes (variance / smoothness estimates)
PARTITION = 7       # label-skew shard dealing
SPLIT = 8           # per-client train/test holdout, keyed (SPLIT, client_id)


def stream(seed, *path):
    """Independent generator for ``(seed, *path)``.

    Streams with distinct paths are statistically independent; an
    identical (seed, path) pair always reproduces the identical stream.
    """
    key = tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
