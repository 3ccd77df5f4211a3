"""Broadcast channel with erasures and heavy-tailed byte corruption.

Every transmission reaches every other node independently: the link either
erases the frame entirely or delivers it with a Pareto-distributed fraction
of its bytes flipped to random wrong values. Corruption positions are drawn
over the raw frame, before any deinterleaving the receiver may do.
"""

from dataclasses import dataclass

import numpy as np

from . import _rng

GAMMA = 0.001
NU = 0.999


def pareto_ratio(u, alpha: float, gamma: float = GAMMA, nu: float = NU):
    """Inverse CDF of the truncated Pareto over [gamma, nu]."""
    u = np.asarray(u, dtype=np.float64)
    scale = 1.0 - (gamma / nu) ** alpha
    return gamma * (1.0 - u * scale) ** (-1.0 / alpha)


def pareto_mean(alpha: float, gamma: float = GAMMA, nu: float = NU) -> float:
    """Closed-form mean of the truncated Pareto over [gamma, nu]."""
    scale = 1.0 - (gamma / nu) ** alpha
    if abs(alpha - 1.0) < 1e-12:
        return gamma * np.log(nu / gamma) / scale
    return (alpha * gamma ** alpha / (1.0 - alpha)
            * (nu ** (1.0 - alpha) - gamma ** (1.0 - alpha)) / scale)


def alpha_for_mean(p: float) -> float:
    """Tail parameter whose truncated-Pareto mean error ratio equals p.

    The mean is monotone decreasing in alpha; outside the reachable range
    the nearest endpoint of the estimator's grid is returned.
    """
    from scipy.optimize import brentq

    lo, hi = 0.02, 2.0
    if p >= pareto_mean(lo):
        return lo
    if p <= pareto_mean(hi):
        return hi
    return float(brentq(lambda a: pareto_mean(a) - p, lo, hi, xtol=1e-6))


@dataclass(frozen=True)
class LinkParams:
    erasure: float
    alpha: float

    @property
    def mean_error(self) -> float:
        return pareto_mean(self.alpha)


@dataclass
class Delivery:
    """One receiver's view of a transmission."""

    data: bytes
    corrupted: np.ndarray  # positions in the raw frame, sorted


class Channel:
    """Directed-link broadcast medium.

    Nodes without a link entry never hear each other. `burst` switches the
    corruption positions from uniform to a single contiguous run, which is
    what the interleaver exists to defeat.
    """

    def __init__(self, links: dict, seed: int, burst: bool = False):
        self.links = dict(links)
        self.rng = np.random.default_rng(_rng.derive(seed, 0xC4A2))
        self.burst = burst

    def receivers(self, sender: int):
        return sorted(dst for (src, dst) in self.links if src == sender)

    def transmit(self, frame: bytes, sender: int) -> dict[int, Delivery]:
        """Per-receiver outcome; receivers not in the result saw nothing."""
        out = {}
        size = len(frame)
        base = np.frombuffer(frame, dtype=np.uint8)
        for dst in self.receivers(sender):
            link = self.links[(sender, dst)]
            if self.rng.random() < link.erasure:
                continue
            ratio = float(pareto_ratio(self.rng.random(), link.alpha))
            k = min(size, int(np.ceil(ratio * size)))
            if self.burst:
                start = int(self.rng.integers(0, size))
                pos = (start + np.arange(k)) % size
                pos.sort()
            else:
                pos = np.sort(self.rng.choice(size, size=k, replace=False))
            buf = base.copy()
            buf[pos] += self.rng.integers(1, 256, size=k, dtype=np.uint8)
            out[dst] = Delivery(buf.tobytes(), pos)
        return out
