"""Reed-Solomon coding over GF(256) and the per-frame byte interleaver.

Data blocks use a systematic RS(255, 150) code: 150 data bytes followed by
105 parity bytes, one byte per field symbol. The decoder handles errors and
erasures jointly and recovers a block whenever 2*errors + erasures <= 105,
where erasures are the positions the caller marks absent. Every decode is
verified by re-encoding the corrected data and re-checking the errata
budget against the received bytes, so a block inside the guarantee region
is never silently mis-decoded; failure is reported as a value (None), not
an exception, because undecodable partial blocks are an expected state.

Shortened variants of the same code protect frame headers and announcement
sections (fewer data symbols, same field).

Field arithmetic uses the conventional primitive polynomial 0x11D with
generator element 2 and fcr=0. Kernels are numba-jitted; the first call in
a fresh environment pays a one-time compile cost (cached on disk).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f

RS_N = 255
RS_K = 150
RS_NSYM = RS_N - RS_K

HEADER_NSYM = 10
ANNOUNCE_NSYM = 32

_PRIME_POLY = 0x11D

# log of zero maps past the real exponent range; EXP2 is zero there, which
# makes multiply-by-zero come out as zero without a branch.
_LOG_ZERO = 512


def _build_tables() -> tuple[np.ndarray, np.ndarray]:
    exp = np.zeros(_LOG_ZERO + 255, dtype=np.int64)
    log = np.full(256, _LOG_ZERO, dtype=np.int64)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= _PRIME_POLY
    exp[255:510] = exp[0:255]
    return exp, log


GF_EXP, GF_LOG = _build_tables()

# _JD[j, i] = (j * degree of position i) mod 255 for the full-length code,
# used for branch-free syndrome accumulation.
_JD = (np.arange(RS_NSYM)[:, None] * ((RS_N - 1) - np.arange(RS_N))[None, :]) % 255
_JD = _JD.astype(np.int64)


def _generator_poly(nsym: int) -> np.ndarray:
    """Big-endian generator polynomial prod (x - alpha^i), i = 0..nsym-1."""
    g = [1]
    for i in range(nsym):
        factor = [1, int(GF_EXP[i])]
        out = [0] * (len(g) + 1)
        for a, ga in enumerate(g):
            if ga == 0:
                continue
            la = GF_LOG[ga]
            for b, fb in enumerate(factor):
                if fb == 0:
                    continue
                out[a + b] ^= int(GF_EXP[la + GF_LOG[fb]])
        g = out
    return np.array(g, dtype=np.int64)


_GEN_CACHE: dict[int, np.ndarray] = {}


def _gen(nsym: int) -> np.ndarray:
    if nsym not in _GEN_CACHE:
        _GEN_CACHE[nsym] = _generator_poly(nsym)
    return _GEN_CACHE[nsym]


@njit(cache=True)
def _encode_kernel(data, gen, exp, log, out):
    """Systematic encode by extended synthetic division; out has room for parity."""
    k = data.shape[0]
    nsym = gen.shape[0] - 1
    for i in range(k):
        out[i] = data[i]
    for i in range(k, k + nsym):
        out[i] = 0
    for i in range(k):
        coef = out[i]
        if coef != 0:
            lc = log[coef]
            for j in range(1, nsym + 1):
                out[i + j] = out[i + j] ^ np.uint8(exp[lc + log[gen[j]]])
    for i in range(k):
        out[i] = data[i]


@njit(cache=True)
def _decode_kernel(values, present, nsym, gen, jd, exp, log, corrected):
    """Errors-and-erasures decode of one (possibly shortened) codeword.

    values/present cover the codeword of length n = k + nsym; absent
    positions are erasures. Returns 1 and fills `corrected` on success,
    0 on failure. Success means: corrected re-encodes to itself and
    2 * (corrections at present positions) + erasures <= nsym.
    """
    n = values.shape[0]
    nerase = 0
    for i in range(n):
        if not present[i]:
            nerase += 1
    if nerase > nsym:
        return 0

    work = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        if present[i]:
            work[i] = values[i]

    # Syndromes S_j = C(alpha^j), j = 0..nsym-1, position i has degree n-1-i.
    synd = np.zeros(nsym, dtype=np.int64)
    any_nonzero = False
    if n == jd.shape[1] and nsym == jd.shape[0]:
        lw = np.empty(n, dtype=np.int64)
        for i in range(n):
            lw[i] = log[work[i]]
        for j in range(nsym):
            acc = 0
            for i in range(n):
                acc ^= exp[lw[i] + jd[j, i]]
            synd[j] = acc
            if acc != 0:
                any_nonzero = True
    else:
        for j in range(nsym):
            acc = 0
            for i in range(n):
                if acc != 0:
                    acc = exp[log[acc] + j] ^ work[i]
                else:
                    acc = int(work[i])
            synd[j] = acc
            if acc != 0:
                any_nonzero = True

    if not any_nonzero:
        for i in range(n):
            corrected[i] = work[i]
        return 1

    maxlen = nsym + 2

    # Erasure locator Gamma(x) = prod (1 + alpha^d x), little-endian coefficients.
    gamma = np.zeros(maxlen, dtype=np.int64)
    gamma[0] = 1
    glen = 1
    for i in range(n):
        if not present[i]:
            d = n - 1 - i
            lxd = d % 255
            for t in range(glen, 0, -1):
                if gamma[t - 1] != 0:
                    gamma[t] ^= exp[log[gamma[t - 1]] + lxd]
            glen += 1

    # Berlekamp-Massey initialised with the erasure locator.
    lam = np.zeros(maxlen, dtype=np.int64)
    old = np.zeros(maxlen, dtype=np.int64)
    tmp = np.zeros(maxlen, dtype=np.int64)
    for t in range(glen):
        lam[t] = gamma[t]
        old[t] = gamma[t]
    llen = glen
    olen = glen

    for it in range(nsym - nerase):
        K = nerase + it
        delta = synd[K]
        for j in range(1, llen):
            sidx = K - j
            if sidx >= 0 and lam[j] != 0 and synd[sidx] != 0:
                delta ^= exp[log[lam[j]] + log[synd[sidx]]]
        for t in range(olen, 0, -1):
            old[t] = old[t - 1]
        old[0] = 0
        olen += 1
        if olen > maxlen:
            return 0
        if delta != 0:
            ld = log[delta]
            if olen > llen:
                linv = 255 - ld
                for t in range(olen):
                    tmp[t] = exp[log[old[t]] + ld] if old[t] != 0 else 0
                for t in range(llen):
                    old[t] = exp[log[lam[t]] + linv] if lam[t] != 0 else 0
                for t in range(llen, olen):
                    old[t] = 0
                swap = olen
                olen = llen
                llen = swap
                for t in range(llen):
                    lam[t] = tmp[t]
            for t in range(olen):
                if old[t] != 0:
                    lam[t] ^= exp[log[old[t]] + ld]

    while llen > 1 and lam[llen - 1] == 0:
        llen -= 1
    deg = llen - 1
    if (deg - nerase) * 2 + nerase > nsym:
        return 0

    # Chien search over valid degrees; root at alpha^{-d} marks degree d.
    pos = np.zeros(nsym, dtype=np.int64)
    nroots = 0
    for d in range(n):
        acc = 0
        for j in range(llen):
            if lam[j] != 0:
                acc ^= exp[(log[lam[j]] + (255 - (d % 255)) * j) % 255]
        if acc == 0:
            if nroots >= nsym:
                return 0
            pos[nroots] = n - 1 - d
            nroots += 1
    if nroots != deg:
        return 0

    # Errata evaluator: Omega(x) = (x * S(x) * Lambda(x)) mod x^(deg+1).
    om = np.zeros(maxlen + 1, dtype=np.int64)
    for t in range(1, deg + 1):
        acc = 0
        for j in range(llen):
            sidx = t - 1 - j
            if 0 <= sidx < nsym and lam[j] != 0 and synd[sidx] != 0:
                acc ^= exp[log[lam[j]] + log[synd[sidx]]]
        om[t] = acc

    for i in range(n):
        corrected[i] = work[i]

    for r in range(nroots):
        d = n - 1 - pos[r]
        lxi = d % 255
        lxi_inv = 255 - lxi
        # numerator: Xi^(1-fcr) * Omega(Xi^-1) with fcr = 0
        y = 0
        for t in range(1, deg + 1):
            if om[t] != 0:
                y ^= exp[(log[om[t]] + lxi_inv * t) % 255]
        if y != 0:
            y = exp[log[y] + lxi]
        # denominator: prod over other roots of (1 + Xq * Xi^-1)
        denom = 1
        for q in range(nroots):
            if q == r:
                continue
            dq = n - 1 - pos[q]
            term = 1 ^ exp[(dq + lxi_inv) % 255]
            if term == 0:
                return 0
            denom = exp[log[denom] + log[term]]
        mag = exp[(log[y] + 255 - log[denom]) % 255] if y != 0 else 0
        corrected[pos[r]] ^= np.uint8(mag)

    # Verification 1: corrected must re-encode to itself (true codeword).
    k = n - nsym
    reenc = np.zeros(n, dtype=np.uint8)
    for i in range(k):
        reenc[i] = corrected[i]
    for i in range(k):
        coef = reenc[i]
        if coef != 0:
            lc = log[coef]
            for j in range(1, nsym + 1):
                reenc[i + j] = reenc[i + j] ^ np.uint8(exp[lc + log[gen[j]]])
    for i in range(k, n):
        if reenc[i] != corrected[i]:
            return 0

    # Verification 2: errata budget against the received present bytes.
    nerr = 0
    for i in range(n):
        if present[i] and corrected[i] != values[i]:
            nerr += 1
    if 2 * nerr + nerase > nsym:
        return 0
    return 1


def rs_encode(block: bytes | np.ndarray) -> np.ndarray:
    """Encode a 150-byte block into a 255-byte systematic codeword."""
    data = np.frombuffer(bytes(block), dtype=np.uint8) if not isinstance(block, np.ndarray) else block.astype(np.uint8)
    if data.shape[0] != RS_K:
        raise ValueError(f"block must be {RS_K} bytes, got {data.shape[0]}")
    out = np.zeros(RS_N, dtype=np.uint8)
    _encode_kernel(data, _gen(RS_NSYM), GF_EXP, GF_LOG, out)
    return out


def rs_decode(values: np.ndarray, present: np.ndarray) -> np.ndarray | None:
    """Recover a 150-byte block from a partially received codeword.

    `values` holds the 255 received bytes (content at absent positions is
    ignored), `present` marks which positions actually arrived. Returns the
    corrected data block, or None when the codeword is beyond the
    2*errors + erasures <= 105 guarantee (or inconsistent).
    """
    if values.shape[0] != RS_N or present.shape[0] != RS_N:
        raise ValueError("values and present must cover all 255 codeword positions")
    corrected = np.zeros(RS_N, dtype=np.uint8)
    ok = _decode_kernel(
        np.ascontiguousarray(values, dtype=np.uint8),
        np.ascontiguousarray(present, dtype=np.bool_),
        RS_NSYM,
        _gen(RS_NSYM),
        _JD,
        GF_EXP,
        GF_LOG,
        corrected,
    )
    if not ok:
        return None
    return corrected[:RS_K]


def rs_encode_shortened(data: bytes | np.ndarray, nsym: int) -> bytes:
    """Shortened systematic RS codeword: data followed by nsym parity bytes."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data.astype(np.uint8)
    if arr.shape[0] + nsym > RS_N:
        raise ValueError("shortened codeword exceeds field length")
    out = np.zeros(arr.shape[0] + nsym, dtype=np.uint8)
    _encode_kernel(arr, _gen(nsym), GF_EXP, GF_LOG, out)
    return out.tobytes()


def rs_decode_shortened(codeword: bytes | np.ndarray, nsym: int) -> bytes | None:
    """Correct a shortened codeword (data followed by nsym parity bytes).

    All positions are treated as present; up to nsym/2 byte errors are
    corrected. Returns the corrected data part, or None.
    """
    arr = np.frombuffer(bytes(codeword), dtype=np.uint8) if not isinstance(codeword, np.ndarray) else codeword.astype(np.uint8)
    n = arr.shape[0]
    if n > RS_N or n <= nsym:
        raise ValueError("bad shortened codeword length")
    present = np.ones(n, dtype=np.bool_)
    corrected = np.zeros(n, dtype=np.uint8)
    ok = _decode_kernel(arr, present, nsym, _gen(nsym), _JD, GF_EXP, GF_LOG, corrected)
    if not ok:
        return None
    return corrected[: n - nsym].tobytes()


def interleave_permutation(n: int, perm_seed: int) -> np.ndarray:
    """Byte permutation for a payload of n bytes, Fisher-Yates from perm_seed."""
    rng = np.random.Generator(np.random.PCG64(perm_seed & 0xFFFFFFFFFFFFFFFF))
    return rng.permutation(n)


def interleave(payload: np.ndarray, perm_seed: int) -> np.ndarray:
    """Scatter payload bytes to pseudo-random positions (seeded, invertible)."""
    payload = np.asarray(payload, dtype=np.uint8)
    perm = interleave_permutation(payload.shape[0], perm_seed)
    out = np.empty_like(payload)
    out[perm] = payload
    return out


def deinterleave(payload: np.ndarray, perm_seed: int) -> np.ndarray:
    """Inverse of interleave for the same perm_seed."""
    payload = np.asarray(payload, dtype=np.uint8)
    perm = interleave_permutation(payload.shape[0], perm_seed)
    return payload[perm]
