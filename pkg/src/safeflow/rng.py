"""Counter-based random streams.

Every stream is a Philox generator keyed on ``seed`` with the stream index
placed in the high word of the counter, so point ``i`` always receives the
same draws no matter how a batch is split or ordered.
"""

import numpy as np

# stream-id domains, kept apart so e.g. initial noise never aliases training noise
NOISE = 0
DATA = 1
TRAIN = 2
INIT = 3
TRIAL = 4


def generator(seed: int, stream: int = 0, domain: int = DATA) -> np.random.Generator:
    """Independent generator for ``(seed, domain, stream)``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    counter = np.array([0, 0, domain, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def point_normals(seed: int, n: int, dim: int, start: int = 0) -> np.ndarray:
    """Standard-normal rows keyed on ``(seed, point index)``.

    Row ``j`` of the result equals ``point_normals(seed, 1, dim, start + j)``.
    """
    out = np.empty((n, dim))
    for j in range(n):
        out[j] = generator(seed, start + j, NOISE).standard_normal(dim)
    return out
