"""Precomputed estimation tables: build, serialize, nearest-parameter lookup.

Estimation at runtime is two array reads: mismatches -> c_hat via a MAP
table for the nearest (alpha, frame size, sample type), then c_hat -> e_hat
via a per-segment-count quantile table. MAP tables depend on all of alpha,
frame size, and sample resolution; the 0.95-quantile of the per-segment
maximum is pure balls-in-bins and depends only on the segment count, so the
file stores the two kinds of record separately instead of duplicating the
quantile array across every parameter combination.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import amps

MAGIC = b"AMPS"
VERSION = 1

_ENV_VAR = "CRELAY_TABLES"


@dataclass
class Estimate:
    c_hat: int
    e_hat: int
    per_packet: list[int] | None = None


def _nearest(grid: np.ndarray, value: float) -> int:
    """Index of the grid entry closest to value, ties toward the larger."""
    d = np.abs(np.asarray(grid, dtype=np.float64) - value)
    return int(len(d) - 1 - np.argmin(d[::-1]))


class AmpsTables:
    """In-memory table set with nearest-parameter lookup."""

    def __init__(self, map_c: dict, max_e: dict):
        # map_c: (alpha_index, B, K) -> array of c_hat indexed by m
        # max_e: numB -> array of e_hat indexed by c_hat
        self.map_c = map_c
        self.max_e = max_e

    def _alpha_index(self, alpha: float) -> int:
        return _nearest(amps.ALPHA_GRID, alpha)

    def _frame_size(self, B: int) -> int:
        return amps.REP_FRAME_SIZES[_nearest(np.array(amps.REP_FRAME_SIZES), B)]

    def _seg_count(self, numB: int) -> int:
        return amps.REP_SEGMENT_COUNTS[_nearest(np.array(amps.REP_SEGMENT_COUNTS), numB)]

    def lookup_c(self, mismatches, alpha: float, B: int) -> int:
        """Frame-level MAP error-byte count from the three mismatch counts."""
        ai = self._alpha_index(alpha)
        Bn = self._frame_size(B)
        cs = []
        for m, spec in zip(mismatches, amps.SAMPLE_SPECS):
            if not (0 <= m <= spec.count):
                raise ValueError(f"mismatch count {m} out of range for S={spec.count}")
            cs.append(int(self.map_c[(ai, Bn, spec.k)][m]))
        return amps.combine_multi_resolution(cs)

    def lookup_e(self, c_hat: int, numB: int, segment_len: int | None = None) -> int:
        """0.95-quantile per-segment error bound for an estimated total."""
        arr = self.max_e[self._seg_count(numB)]
        e = int(arr[min(int(c_hat), amps.C_TABLE_MAX)])
        if segment_len is not None:
            e = min(e, segment_len)
        return e

    def estimate(self, mismatches, alpha: float, B: int, numB: int,
                 segment_len: int | None = None) -> Estimate:
        c_hat = self.lookup_c(mismatches, alpha, B)
        return Estimate(c_hat=c_hat, e_hat=self.lookup_e(c_hat, numB, segment_len))


def build_tables() -> AmpsTables:
    """Recompute every table from the estimation math (a few seconds)."""
    map_c = {}
    for B in amps.REP_FRAME_SIZES:
        for spec in amps.SAMPLE_SPECS:
            # the likelihood part is alpha-independent; reuse it across the grid
            loglik = amps._log_likelihood_matrix(B, spec.k, spec.count)
            for ai, alpha in enumerate(amps.ALPHA_GRID):
                with np.errstate(divide="ignore"):
                    lp = np.log(amps.prior_pmf(amps.PriorModel(alpha), B))
                post = loglik + lp[None, :]
                table = (B - np.argmax(post[:, ::-1], axis=1)).astype(np.uint16)
                map_c[(ai, B, spec.k)] = table

    cdfs = amps._max_cdf_matrix(amps.C_TABLE_MAX, amps.SEGMENT_ERROR_CAP,
                                tuple(amps.REP_SEGMENT_COUNTS))
    max_e = {}
    for numB, D in cdfs.items():
        crossed = D > 0.95
        e = np.where(crossed.any(axis=1), np.argmax(crossed, axis=1),
                     amps.SEGMENT_ERROR_CAP)
        max_e[numB] = np.maximum(e, amps.MIN_SEGMENT_ERRORS).astype(np.uint16)
    return AmpsTables(map_c, max_e)


# record header: alpha_centi, B, numB, K, S (all u16, zero = not applicable),
# then two u32-length-prefixed u16 arrays (map_c, max_e); one of the two is
# empty depending on the record kind
_HDR = struct.Struct("<HHHHH")


def _write_array(buf: bytearray, arr: np.ndarray) -> None:
    buf += struct.pack("<I", len(arr))
    buf += arr.astype("<u2").tobytes()


def save_tables(tables: AmpsTables, path: str) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HI", VERSION, len(tables.map_c) + len(tables.max_e))
    for (ai, B, K), arr in sorted(tables.map_c.items()):
        spec = next(s for s in amps.SAMPLE_SPECS if s.k == K)
        alpha_centi = round(amps.ALPHA_GRID[ai] * 100)
        buf += _HDR.pack(alpha_centi, B, 0, K, spec.count)
        _write_array(buf, arr)
        _write_array(buf, np.empty(0, dtype=np.uint16))
    for numB, arr in sorted(tables.max_e.items()):
        buf += _HDR.pack(0, 0, numB, 0, 0)
        _write_array(buf, np.empty(0, dtype=np.uint16))
        _write_array(buf, arr)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_tables(path: str) -> AmpsTables:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError("not a table file (bad magic)")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported table file version {version}")
    off = 10
    map_c: dict = {}
    max_e: dict = {}

    def read_array(off):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        arr = np.frombuffer(raw, dtype="<u2", count=n, offset=off)
        return arr.copy(), off + 2 * n

    for _ in range(count):
        alpha_centi, B, numB, K, S = _HDR.unpack_from(raw, off)
        off += _HDR.size
        a_map, off = read_array(off)
        a_max, off = read_array(off)
        if numB == 0:
            ai = _nearest(amps.ALPHA_GRID, alpha_centi / 100)
            if len(a_map) != S + 1:
                raise ValueError("map table length does not match sample count")
            map_c[(ai, B, K)] = a_map
        else:
            max_e[numB] = a_max
    if off != len(raw):
        raise ValueError("trailing bytes in table file")
    expected = {(ai, B, s.k)
                for ai in range(len(amps.ALPHA_GRID))
                for B in amps.REP_FRAME_SIZES
                for s in amps.SAMPLE_SPECS}
    if set(map_c) != expected or set(max_e) != set(amps.REP_SEGMENT_COUNTS):
        raise ValueError("table file is missing records")
    return AmpsTables(map_c, max_e)


_default: AmpsTables | None = None


def default_tables() -> AmpsTables:
    """Process-wide table set: from $CRELAY_TABLES when set, else built once."""
    global _default
    if _default is None:
        path = os.environ.get(_ENV_VAR)
        if path:
            _default = load_tables(path)
        else:
            _default = build_tables()
    return _default
