"""Partial-packet bookkeeping: segments, per-codeword records, packet buffers.

A packet is split into 150-byte blocks, each encoded to a 255-byte codeword.
Transmissions carry one (start, end) segment of every not-yet-decoded
codeword, so a receiver accumulates per-codeword records of which byte
ranges it holds and how many errors it believes each range carries. The
estimate drives two decisions: whether decoding is worth attempting
(each estimated error costs two parity bytes of budget) and which segment
an upstream node should send next.

Merge rule for overlapping ranges: the side with fewer estimated errors
keeps the disputed bytes; on an exact tie the bytes already held win. A
segment that loses part of its range keeps its full error estimate on the
remainder, deliberately over-counting rather than guessing how the errors
were distributed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fec


@dataclass(frozen=True)
class Segment:
    """Half-open byte range [start, end) of a codeword with an error estimate."""

    start: int
    end: int
    est_errors: int

    def __post_init__(self):
        if not (0 <= self.start < self.end <= fec.RS_N):
            raise ValueError(f"bad segment range [{self.start}, {self.end})")
        if not (0 <= self.est_errors <= self.end - self.start):
            raise ValueError("est_errors must be within the segment length")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class CodewordView:
    """Received bytes of one codeword plus the mask of positions present."""

    values: np.ndarray
    present: np.ndarray


class Record:
    """Everything a node holds about one codeword of one packet."""

    def __init__(self):
        self.view = CodewordView(
            values=np.zeros(fec.RS_N, dtype=np.uint8),
            present=np.zeros(fec.RS_N, dtype=np.bool_),
        )
        self.segments: list[Segment] = []
        self.decoded_block: np.ndarray | None = None

    @property
    def decoded(self) -> bool:
        return self.decoded_block is not None

    @property
    def present_count(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def est_total(self) -> int:
        return sum(s.est_errors for s in self.segments)

    def coverage(self) -> list[tuple[int, int]]:
        """Sorted disjoint covered ranges (adjacent pieces fused)."""
        out: list[tuple[int, int]] = []
        for seg in sorted(self.segments, key=lambda s: s.start):
            if out and seg.start <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], seg.end))
            else:
                out.append((seg.start, seg.end))
        return out

    def merge_segment(self, seg: Segment, data: np.ndarray) -> None:
        """Fold a received segment into the record.

        `data` holds the seg.length received bytes. Ranges disputed with
        already-held segments go to the side with fewer estimated errors
        (ties keep the incumbent); remainders keep their full estimate.
        """
        data = np.asarray(data, dtype=np.uint8)
        if data.shape[0] != seg.length:
            raise ValueError("data length does not match segment")

        incoming: list[tuple[int, int]] = [(seg.start, seg.end)]
        survivors: list[Segment] = []
        for ex in self.segments:
            if ex.end <= seg.start or ex.start >= seg.end:
                survivors.append(ex)
                continue
            if ex.est_errors <= seg.est_errors:
                # incumbent keeps the disputed bytes; trim the incoming ranges
                trimmed: list[tuple[int, int]] = []
                for ps, pe in incoming:
                    if pe <= ex.start or ps >= ex.end:
                        trimmed.append((ps, pe))
                        continue
                    if ps < ex.start:
                        trimmed.append((ps, ex.start))
                    if pe > ex.end:
                        trimmed.append((ex.end, pe))
                incoming = trimmed
                survivors.append(ex)
            else:
                # incoming wins the overlap; incumbent remainders keep the
                # full estimate (capped by the segment-length invariant)
                if ex.start < seg.start:
                    ln = seg.start - ex.start
                    survivors.append(Segment(ex.start, seg.start, min(ex.est_errors, ln)))
                if ex.end > seg.end:
                    ln = ex.end - seg.end
                    survivors.append(Segment(seg.end, ex.end, min(ex.est_errors, ln)))

        for ps, pe in incoming:
            if pe <= ps:
                continue
            survivors.append(Segment(ps, pe, min(seg.est_errors, pe - ps)))
            self.view.values[ps:pe] = data[ps - seg.start : pe - seg.start]
            self.view.present[ps:pe] = True

        survivors.sort(key=lambda s: s.start)
        self.segments = survivors

    def decodable_estimate(self) -> bool:
        """True when held bytes should suffice: present >= 150 + 2 * est_total."""
        return self.present_count >= fec.RS_K + 2 * self.est_total

    def try_decode(self) -> bool:
        if self.decoded:
            return True
        block = fec.rs_decode(self.view.values, self.view.present)
        if block is None:
            return False
        self.decoded_block = block
        return True


class PacketBuffer:
    """Per-packet receive state: one Record per 150-byte block."""

    def __init__(self, num_blocks: int):
        if not (1 <= num_blocks <= 32):
            raise ValueError("num_blocks must be in [1, 32]")
        self.num_blocks = num_blocks
        self.records = [Record() for _ in range(num_blocks)]

    @property
    def decoded_mask(self) -> int:
        mask = 0
        for i, rec in enumerate(self.records):
            if rec.decoded:
                mask |= 1 << i
        return mask

    @property
    def fully_decoded(self) -> bool:
        return all(rec.decoded for rec in self.records)

    def undecoded_indices(self) -> list[int]:
        return [i for i, rec in enumerate(self.records) if not rec.decoded]

    def try_decode(self) -> dict[int, bool]:
        """Attempt rs_decode on every undecoded record; outcome per block index."""
        out: dict[int, bool] = {}
        for i, rec in enumerate(self.records):
            if not rec.decoded:
                out[i] = rec.try_decode()
        return out

    def assemble_payload(self, pkt_bytes: int) -> bytes | None:
        """Original packet bytes once all blocks decoded, else None."""
        if not self.fully_decoded:
            return None
        parts = [rec.decoded_block for rec in self.records]
        return b"".join(p.tobytes() for p in parts)[:pkt_bytes]


def pack_blocks(payload: bytes) -> list[np.ndarray]:
    """Split payload into 150-byte blocks, zero-padding the last one."""
    if len(payload) == 0:
        raise ValueError("payload must not be empty")
    n = (len(payload) + fec.RS_K - 1) // fec.RS_K
    arr = np.zeros(n * fec.RS_K, dtype=np.uint8)
    arr[: len(payload)] = np.frombuffer(payload, dtype=np.uint8)
    return [arr[i * fec.RS_K : (i + 1) * fec.RS_K] for i in range(n)]


def _coverage_of(segments) -> tuple[list[tuple[int, int]], int, int]:
    """(disjoint covered ranges, covered byte count, total estimate)."""
    cov: list[tuple[int, int]] = []
    for seg in sorted(segments, key=lambda s: s.start):
        if cov and seg.start <= cov[-1][1]:
            cov[-1] = (cov[-1][0], max(cov[-1][1], seg.end))
        else:
            cov.append((seg.start, seg.end))
    have = sum(e - s for s, e in cov)
    est = sum(s.est_errors for s in segments)
    return cov, have, est


def _min_end_for(start: int, cov, have: int, need: int) -> int | None:
    """Smallest end > start making covered + new uncovered bytes >= need.

    New bytes are counted as error-free at planning time; held estimates are
    kept in full (resent ranges are not assumed to displace suspect bytes).
    """
    missing = need - have
    if missing <= 0:
        return start
    pos = start
    for cs, ce in cov:
        if ce <= pos:
            continue
        if cs > pos:
            gap = cs - pos
            if gap >= missing:
                return pos + missing
            missing -= gap
        pos = max(pos, ce)
        # bytes we newly cover inside an already-covered range add nothing
    if fec.RS_N - pos >= missing:
        return pos + missing
    return None


def select_segment(record_segments) -> tuple[int, int]:
    """Pick the (start, end) segment to transmit for every codeword of a packet.

    `record_segments` holds one Segment list per undecoded codeword as
    reported by the next hop. The same segment is sent for all codewords, so
    the end is chosen for the worst-case record at each candidate start;
    candidates are 0 plus every reported segment boundary. Shortest segment
    wins, ties to smaller start. Returns (0, 255) when no segment within the
    codeword can satisfy the estimate, and (0, 150) when nothing was reported.
    """
    lists = [list(segs) for segs in record_segments]
    if not lists or all(len(segs) == 0 for segs in lists):
        return (0, fec.RS_K)

    per_record = [_coverage_of(segs) for segs in lists]
    needs = [fec.RS_K + 2 * est for (_, _, est) in per_record]

    candidates = {0}
    for segs in lists:
        for seg in segs:
            candidates.add(seg.start)
            candidates.add(seg.end)
    candidates = sorted(c for c in candidates if c < fec.RS_N)

    best: tuple[int, int] | None = None
    for st in candidates:
        worst_end = st
        feasible = True
        for (cov, have, _), need in zip(per_record, needs):
            e = _min_end_for(st, cov, have, need)
            if e is None:
                feasible = False
                break
            worst_end = max(worst_end, e)
        if not feasible:
            continue
        if worst_end <= st:
            # estimates already satisfied yet the packet is still undecoded;
            # send a minimal nudge of one error's worth of parity
            if st + 2 > fec.RS_N:
                continue
            worst_end = st + 2
        if best is None or (worst_end - st, st) < (best[1] - best[0], best[0]):
            best = (st, worst_end)
    if best is None:
        return (0, fec.RS_N)
    return best
