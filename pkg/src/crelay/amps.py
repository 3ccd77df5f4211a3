"""Byte-error estimation from amplified parity samples.

A sender folds K payload bytes (positions drawn from a shared PRNG) into one
parity bit; 64 such bits ride in every frame header at three resolutions.
The receiver recomputes them on what it got, and the mismatch count m feeds
a MAP estimate of how many bytes are corrupt: a binomial likelihood for m
given c error bytes, against a truncated-Pareto prior over the error ratio.
From the total, a balls-in-bins tail bound gives the per-segment maximum
that seeds each Segment.est_errors.

Sampling K bytes per bit amplifies small error counts: one bad byte flips
the parity with probability 1/2 whenever it is sampled, so the flip rate at
ratio x is (1 - (1-x)^K)/2 rather than x itself.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import binom

from . import _rng

GAMMA = 0.001
NU = 0.999
ALPHA_GRID = np.round(np.arange(1, 101) * 0.02, 2)
DEFAULT_ALPHA = 1.0

REP_FRAME_SIZES = (375, 750, 1500, 2200)
REP_SEGMENT_COUNTS = (1, 2, 5, 10, 15)
C_TABLE_MAX = 2200
SEGMENT_ERROR_CAP = 255
MIN_SEGMENT_ERRORS = 3


@dataclass(frozen=True)
class SampleSpec:
    """One sampling resolution: K bytes per parity bit, count bits per frame."""

    k: int
    count: int
    ratio_range: tuple[float, float]


SAMPLE_SPECS = (
    SampleSpec(128, 8, (0.001, 0.01)),
    SampleSpec(32, 16, (0.01, 0.03)),
    SampleSpec(10, 40, (0.03, 0.2)),
)
SAMPLE_COUNT = sum(s.count for s in SAMPLE_SPECS)  # 64 bits = 8 header bytes

# sample indices 0..7 use K=128, 8..23 use K=32, 24..63 use K=10
_TYPE_SLICES = []
_off = 0
for _spec in SAMPLE_SPECS:
    _TYPE_SLICES.append((_off, _off + _spec.count))
    _off += _spec.count
del _off, _spec


@dataclass(frozen=True)
class PriorModel:
    alpha: float
    gamma: float = GAMMA
    nu: float = NU


_PARITY = np.array([bin(v).count("1") & 1 for v in range(256)], dtype=np.uint8)

_NAIVE_TAG = 0x4E56
_position_cache: OrderedDict = OrderedDict()
_POSITION_CACHE_MAX = 1024


def sample_positions(frame_seq: int, sample_index: int, k: int, payload_len: int) -> np.ndarray:
    """Byte positions for one sample, derivable by any overhearer."""
    return _rng.indices(_rng.derive(frame_seq, sample_index), k, payload_len)


def _positions_for(frame_seq: int, payload_len: int):
    key = (frame_seq, payload_len)
    hit = _position_cache.get(key)
    if hit is not None:
        return hit
    mats = []
    idx = 0
    for spec in SAMPLE_SPECS:
        mat = np.empty((spec.count, spec.k), dtype=np.int64)
        for row in range(spec.count):
            mat[row] = sample_positions(frame_seq, idx, spec.k, payload_len)
            idx += 1
        mats.append(mat)
    if len(_position_cache) >= _POSITION_CACHE_MAX:
        _position_cache.popitem(last=False)
    _position_cache[key] = mats
    return mats


def compute_samples(payload, frame_seq: int) -> np.ndarray:
    """The 64 parity-sample bits for a frame data field."""
    payload = np.asarray(payload, dtype=np.uint8)
    bits = np.zeros(SAMPLE_COUNT, dtype=np.uint8)
    if payload.size == 0:
        return bits
    pos = 0
    for spec, mat in zip(SAMPLE_SPECS, _positions_for(frame_seq, payload.size)):
        folded = np.bitwise_xor.reduce(payload[mat], axis=1)
        bits[pos : pos + spec.count] = _PARITY[folded]
        pos += spec.count
    return bits


def pack_samples(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_samples(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=SAMPLE_COUNT)


def mismatch_counts(sent_bits, received_bits) -> tuple[int, int, int]:
    """Per-resolution counts of samples whose recomputation disagrees."""
    diff = np.asarray(sent_bits) != np.asarray(received_bits)
    return tuple(int(diff[a:b].sum()) for a, b in _TYPE_SLICES)


def p_sample_error(B: int, c, K: int):
    """Probability one K-byte parity sample mismatches given c error bytes.

    [1 - C(B-c,K)/C(B,K)] / 2, in log space: the hypergeometric chance the
    sample hits no bad byte, and a fair coin when it hits any (error values
    are uniform over the 255 alternatives, so the folded parity is random).
    """
    c_arr = np.asarray(c, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        log_ratio = (
            gammaln(B - c_arr + 1)
            - gammaln(B - c_arr - K + 1)
            - gammaln(B + 1)
            + gammaln(B - K + 1)
        )
    ratio = np.where(c_arr > B - K, 0.0, np.exp(log_ratio))
    p = 0.5 * (1.0 - ratio)
    return float(p) if np.isscalar(c) or np.ndim(c) == 0 else p


def likelihood_m_given_c(m: int, c, S: int, B: int, K: int):
    """Binomial(S, p_sample_error) pmf at m, samples treated as independent."""
    return binom.pmf(m, S, p_sample_error(B, c, K))


def prior_pmf(prior: PriorModel, B: int) -> np.ndarray:
    """P(C = c) for c in 0..B by integrating the ratio density over [c/B, (c+1)/B).

    The truncated-Pareto prior lives on the error *ratio*; bins outside
    [gamma, nu] get zero mass, and the bin edges clip so the pmf telescopes
    to exactly 1.
    """
    a, g, v = prior.alpha, prior.gamma, prior.nu
    edges = np.arange(B + 2, dtype=np.float64) / B
    t = np.clip(edges, g, v)
    denom = 1.0 - (g / v) ** a
    cdf = (1.0 - (g / t) ** a) / denom
    return np.diff(cdf)


def _log_likelihood_matrix(B: int, K: int, S: int) -> np.ndarray:
    """(S+1, B+1) matrix of log P(m | c)."""
    p = p_sample_error(B, np.arange(B + 1), K)
    m = np.arange(S + 1)[:, None]
    return binom.logpmf(m, S, p[None, :])


def _log_posterior(prior: PriorModel, B: int, K: int, S: int) -> np.ndarray:
    """(S+1, B+1) matrix of log P(m | c) + log P(c)."""
    pr = prior_pmf(prior, B)
    with np.errstate(divide="ignore"):
        logpr = np.log(pr)
    return _log_likelihood_matrix(B, K, S) + logpr[None, :]


def map_estimate_c(m: int, prior: PriorModel, B: int, K: int, S: int) -> int:
    """MAP error-byte count for m mismatches; ties go to the larger c."""
    post = _log_posterior(prior, B, K, S)[m]
    return int(B - np.argmax(post[::-1]))


def map_table(prior: PriorModel, B: int, K: int, S: int) -> np.ndarray:
    """map_estimate_c for every m in 0..S as one array."""
    post = _log_posterior(prior, B, K, S)
    return (B - np.argmax(post[:, ::-1], axis=1)).astype(np.int64)


def _max_cdf_matrix(c_max: int, e_max: int, wanted: tuple[int, ...]) -> dict[int, np.ndarray]:
    """P(max per segment <= e | c) for c in 0..c_max, e in 0..e_max.

    Tagged-segment recursion: going from i to i+1 segments, the tagged one
    takes t ~ Binomial(c, 1/(i+1)) of the c errors and the rest must also
    stay <= e, so D_{i+1}(e|c) = sum_t C(c,t)(1/(i+1))^t(i/(i+1))^(c-t)
    [t <= e] D_i(e|c-t). Columns are independent, so capping e is exact.
    Returns snapshots for the requested segment counts.
    """
    c_arr = np.arange(c_max + 1, dtype=np.float64)
    e_arr = np.arange(e_max + 1)
    D = (c_arr[:, None] <= e_arr[None, :]).astype(np.float64)  # one segment
    out = {}
    if 1 in wanted:
        out[1] = D.copy()
    log_fact = gammaln(np.arange(c_max + 1, dtype=np.float64) + 1)
    for i in range(1, max(wanted)):
        q = 1.0 / (i + 1)
        t_vals = np.arange(min(e_max, c_max) + 1)
        # W[c, t] = Binomial(c, q) pmf at t (0 where t > c)
        with np.errstate(invalid="ignore"):
            logW = (
                log_fact[:, None]
                - log_fact[t_vals][None, :]
                - np.where(
                    c_arr[:, None] >= t_vals[None, :],
                    gammaln(c_arr[:, None] - t_vals[None, :] + 1),
                    np.inf,
                )
                + t_vals[None, :] * math.log(q)
                + (c_arr[:, None] - t_vals[None, :]) * math.log1p(-q)
            )
        W = np.exp(logW)
        W[c_arr[:, None] < t_vals[None, :]] = 0.0
        nxt = np.zeros_like(D)
        for t in t_vals:
            nxt[t:, t:] += W[t:, t][:, None] * D[: c_max + 1 - t, t:]
        D = nxt
        if i + 1 in wanted:
            out[i + 1] = D.copy()
    return out


def max_per_segment_dist(c: int, numB: int) -> np.ndarray:
    """pmf of the maximum error count in any one of numB equal segments."""
    if numB < 1:
        raise ValueError("numB must be >= 1")
    if c == 0:
        return np.array([1.0])
    cdf = _max_cdf_matrix(c, c, (numB,))[numB][c]
    return np.diff(cdf, prepend=0.0)


def bound_e(c_hat: int, numB: int, threshold: float = 0.95) -> int:
    """Smallest e with P(E <= e | c_hat) strictly above threshold, floored at 3."""
    if c_hat == 0:
        e = 0
    elif numB == 1:
        e = c_hat
    else:
        cdf = _max_cdf_matrix(c_hat, c_hat, (numB,))[numB][c_hat]
        e = int(np.argmax(cdf > threshold))
    return max(e, MIN_SEGMENT_ERRORS)


def combine_multi_resolution(estimates) -> int:
    """Conservative merge of the per-resolution estimates: the largest."""
    return max(estimates)


def apportion(c_hat: int, packet_sizes) -> list[int]:
    """Split a frame-level count across packets proportionally, rounding up."""
    total = sum(packet_sizes)
    if total <= 0:
        raise ValueError("packet sizes must sum to a positive length")
    return [math.ceil(c_hat * size / total) for size in packet_sizes]


_FIT_LHS = None


def _fit_lhs() -> np.ndarray:
    global _FIT_LHS
    if _FIT_LHS is None:
        a = ALPHA_GRID
        q = (GAMMA / NU) ** a
        _FIT_LHS = 1.0 / a + q * math.log(GAMMA / NU) / (1.0 - q) + math.log(GAMMA)
    return _FIT_LHS


def fit_alpha(ratios) -> float:
    """Tail parameter whose truncated-Pareto log-likelihood equation best
    matches the observed mean log ratio, snapped to the 100-value grid."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        return DEFAULT_ALPHA
    clamped = np.clip(ratios, GAMMA, NU)
    rhs = float(np.mean(np.log(clamped)))
    return float(ALPHA_GRID[np.argmin(np.abs(_fit_lhs() - rhs))])


def naive_positions(frame_seq: int, payload_len: int) -> np.ndarray:
    """The 8 byte positions the naive raw-byte sampler embeds."""
    return _rng.indices(_rng.derive(frame_seq, _NAIVE_TAG), 8, payload_len)


def naive_sample_bytes(payload, frame_seq: int) -> np.ndarray:
    payload = np.asarray(payload, dtype=np.uint8)
    if payload.size == 0:
        return np.zeros(8, dtype=np.uint8)
    return payload[naive_positions(frame_seq, payload.size)]


def naive_estimate(B: int, mismatches: int, samples: int = 8) -> float:
    """Scale the sampled-byte mismatch fraction to the payload size."""
    return B * mismatches / samples


def batch_mismatch_counts(clean: np.ndarray, corrupted: np.ndarray,
                          frame_seqs: np.ndarray) -> np.ndarray:
    """Per-resolution mismatch counts for many (payload, frame_seq) pairs.

    clean/corrupted are (T, B) uint8 row pairs; returns (T, 3) ints. Equals
    running compute_samples + mismatch_counts row by row, vectorized for
    Monte-Carlo sweeps.
    """
    clean = np.ascontiguousarray(clean, dtype=np.uint8)
    corrupted = np.ascontiguousarray(corrupted, dtype=np.uint8)
    T, B = clean.shape
    seqs = np.asarray(frame_seqs, dtype=np.uint64)
    rows = np.arange(T)[:, None]
    out = np.zeros((T, len(SAMPLE_SPECS)), dtype=np.int64)
    idx = 0
    for ti, spec in enumerate(SAMPLE_SPECS):
        for _ in range(spec.count):
            seeds = _rng.derive2_vec(seqs, idx)
            pos = _rng.indices_vec(seeds, spec.k, B)
            a = _PARITY[np.bitwise_xor.reduce(clean[rows, pos], axis=1)]
            b = _PARITY[np.bitwise_xor.reduce(corrupted[rows, pos], axis=1)]
            out[:, ti] += a != b
            idx += 1
    return out


def batch_naive_mismatches(clean: np.ndarray, corrupted: np.ndarray,
                           frame_seqs: np.ndarray) -> np.ndarray:
    """Mismatching raw-byte samples per row for the naive baseline."""
    clean = np.ascontiguousarray(clean, dtype=np.uint8)
    corrupted = np.ascontiguousarray(corrupted, dtype=np.uint8)
    T, B = clean.shape
    seeds = _rng.derive2_vec(np.asarray(frame_seqs, dtype=np.uint64), _NAIVE_TAG)
    pos = _rng.indices_vec(seeds, 8, B)
    rows = np.arange(T)[:, None]
    return (clean[rows, pos] != corrupted[rows, pos]).sum(axis=1)
