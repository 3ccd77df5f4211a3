"""Shared fixtures-by-function for the test suite."""

import numpy as np

from crelay.routing import LinkTable


def corrupt(rng, frame: bytes, ratio: float) -> bytes:
    """Flip ceil(ratio * len) distinct bytes to random wrong values."""
    buf = np.frombuffer(frame, dtype=np.uint8).copy()
    k = int(np.ceil(ratio * buf.size))
    pos = rng.choice(buf.size, size=k, replace=False)
    buf[pos] ^= rng.integers(1, 256, size=k, dtype=np.uint8)
    return buf.tobytes()


def random_link_table(rng, n, link_prob=0.4):
    """Random mesh with near-symmetric links.

    Each unordered pair gets a link with probability link_prob; directions
    share a base erasure in [0.2, 0.8] and error in [0, 0.05] with small
    independent jitter. Strongly asymmetric dense meshes drive the path
    metric's validity check into pathological territory (overheard totals
    past 1, negative loads), which no deployment this models would show, so
    the family stays close to symmetric.
    """
    t = LinkTable(range(n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < link_prob:
                eps = rng.uniform(0.2, 0.8)
                err = rng.uniform(0, 0.05)
                for a, b in ((i, j), (j, i)):
                    t.set_link(
                        a, b,
                        float(np.clip(eps + rng.uniform(-0.05, 0.05), 0, 0.98)),
                        float(np.clip(err + rng.uniform(-0.02, 0.02), 0, 0.24)),
                    )
    return t
