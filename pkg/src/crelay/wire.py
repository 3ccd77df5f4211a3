"""Frame wire format: fixed header, FEC-protected announcements, data section.

Layout (little-endian multi-byte fields):

  header, 28 bytes total:
      announce_len u16 | data_len u16 | frame_seq u16 | sender_id u16 |
      samples 8B | crc16 over the first 16 bytes | 10B RS parity over 18
  announcements, announce_len bytes:
      counts (n_acks u8, n_statuses u8, n_data u8)
      acks: src u16, dst u16, seq u16                            (6B each)
      statuses: src u16, dst u16, seq u16, num_blocks u8,
                decoded_mask u32, n_segments u8,
                segments (start u16, end u16, est u8)            (12B + 5B/seg)
      data headers: src u16, dst u16, seq u16, pkt_bytes u16,
                start u8, end u8, num_blocks u8, block_mask u32  (15B each)
      crc16 over everything above | 32B RS parity over all of it
  data, data_len bytes, interleaved as one unit:
      per data header, in order: the segment bytes of every block
      selected by block_mask, ascending, then crc32 of those bytes

A header that fails FEC or checksum makes the whole frame an erasure. A
failed announcement section is a detected loss: the data section cannot be
attributed without its headers, but the frame still counts as received for
link statistics.
"""

from __future__ import annotations

import binascii
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _rng, amps, fec
from .packets import Segment

HEADER_LEN = 28
ANNOUNCE_OVERHEAD = 2 + fec.ANNOUNCE_NSYM  # crc16 + parity
MAX_ANNOUNCE_CONTENT = 255 - fec.ANNOUNCE_NSYM - 2

_ILV_TAG = 0x1337


@dataclass(frozen=True)
class Ack:
    src: int
    dst: int
    seq: int

    @property
    def key(self):
        return (self.src, self.dst, self.seq)


@dataclass
class ReceivingStatus:
    src: int
    dst: int
    seq: int
    num_blocks: int
    decoded_mask: int
    segments: list = field(default_factory=list)

    @property
    def key(self):
        return (self.src, self.dst, self.seq)


@dataclass
class DataHeader:
    """Describes one packet's contribution to the frame data section."""

    src: int
    dst: int
    seq: int
    pkt_bytes: int
    start: int
    end: int
    block_mask: int  # blocks whose segment bytes are present

    @property
    def key(self):
        return (self.src, self.dst, self.seq)

    @property
    def num_blocks(self) -> int:
        return (self.pkt_bytes + fec.RS_K - 1) // fec.RS_K

    @property
    def blocks(self) -> list[int]:
        return [i for i in range(32) if self.block_mask >> i & 1]

    @property
    def wire_bytes(self) -> int:
        return (self.end - self.start) * len(self.blocks) + 4


@dataclass
class Announcements:
    acks: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    data_headers: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.acks or self.statuses or self.data_headers)


@dataclass
class ParsedFrame:
    frame_seq: int
    sender_id: int
    samples: np.ndarray  # 64 sender-side sample bits
    announcements: Announcements | None  # None: section failed FEC/checksum
    data: np.ndarray | None  # deinterleaved section, None when absent/unusable


def _crc16(data: bytes) -> int:
    return binascii.crc_hqx(data, 0)


def encode_announcements(ann: Announcements) -> bytes:
    body = bytearray()
    body += struct.pack("<BBB", len(ann.acks), len(ann.statuses), len(ann.data_headers))
    for a in ann.acks:
        body += struct.pack("<HHH", a.src, a.dst, a.seq)
    for s in ann.statuses:
        body += struct.pack("<HHHBIB", s.src, s.dst, s.seq, s.num_blocks,
                            s.decoded_mask, len(s.segments))
        for seg in s.segments:
            body += struct.pack("<HHB", seg.start, seg.end, seg.est_errors)
    for d in ann.data_headers:
        body += struct.pack("<HHHHBBBI", d.src, d.dst, d.seq, d.pkt_bytes,
                            d.start, d.end, d.num_blocks, d.block_mask)
    if len(body) + 2 > MAX_ANNOUNCE_CONTENT + 2:
        raise ValueError(f"announcement section too large ({len(body)} bytes)")
    body += struct.pack("<H", _crc16(bytes(body)))
    return fec.rs_encode_shortened(bytes(body), fec.ANNOUNCE_NSYM)


def decode_announcements(section: bytes) -> Announcements | None:
    """Parse an announcement section; None on any detected failure."""
    corrected = fec.rs_decode_shortened(section, fec.ANNOUNCE_NSYM)
    if corrected is None or len(corrected) < 5:
        return None
    body, crc = corrected[:-2], struct.unpack("<H", corrected[-2:])[0]
    if _crc16(body) != crc:
        return None
    try:
        n_acks, n_statuses, n_data = struct.unpack_from("<BBB", body, 0)
        off = 3
        ann = Announcements()
        for _ in range(n_acks):
            ann.acks.append(Ack(*struct.unpack_from("<HHH", body, off)))
            off += 6
        for _ in range(n_statuses):
            src, dst, seq, nb, mask, nseg = struct.unpack_from("<HHHBIB", body, off)
            off += 12
            segs = []
            for _ in range(nseg):
                st, en, est = struct.unpack_from("<HHB", body, off)
                off += 5
                segs.append(Segment(st, en, est))
            ann.statuses.append(ReceivingStatus(src, dst, seq, nb, mask, segs))
        for _ in range(n_data):
            src, dst, seq, pb, st, en, nb, mask = struct.unpack_from("<HHHHBBBI", body, off)
            off += 15
            hdr = DataHeader(src, dst, seq, pb, st, en, mask)
            if hdr.num_blocks != nb or not (0 <= st < en <= fec.RS_N):
                return None
            ann.data_headers.append(hdr)
        if off != len(body):
            return None
    except (struct.error, ValueError):
        return None
    return ann


def interleave_seed(frame_seq: int) -> int:
    return _rng.derive(frame_seq, _ILV_TAG)


def build_frame(frame_seq: int, sender_id: int, ann: Announcements,
                data_section: bytes | np.ndarray) -> bytes:
    """Assemble the full frame; the data section arrives pre-assembled
    (slices + per-packet crc32 already concatenated, not yet interleaved)."""
    data = np.asarray(
        np.frombuffer(bytes(data_section), dtype=np.uint8)
        if not isinstance(data_section, np.ndarray) else data_section,
        dtype=np.uint8,
    )
    ann_bytes = encode_announcements(ann)
    samples = amps.pack_samples(amps.compute_samples(data, frame_seq))
    head = struct.pack("<HHHH", len(ann_bytes), data.size, frame_seq, sender_id) + samples
    head += struct.pack("<H", _crc16(head))
    header = fec.rs_encode_shortened(head, fec.HEADER_NSYM)
    assert len(header) == HEADER_LEN
    interleaved = fec.interleave(data, interleave_seed(frame_seq)) if data.size else data
    return header + ann_bytes + interleaved.tobytes()


def pack_data_section(entries) -> bytes:
    """Concatenate per-packet (slice bytes, crc32) for build_frame."""
    out = bytearray()
    for payload in entries:
        payload = bytes(payload)
        out += payload
        out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def parse_frame(raw: bytes) -> ParsedFrame | None:
    """Decode a (possibly corrupted) frame; None means erasure."""
    if len(raw) < HEADER_LEN:
        return None
    head = fec.rs_decode_shortened(raw[:HEADER_LEN], fec.HEADER_NSYM)
    if head is None:
        return None
    if _crc16(head[:16]) != struct.unpack("<H", head[16:18])[0]:
        return None
    ann_len, data_len, frame_seq, sender_id = struct.unpack("<HHHH", head[:8])
    samples = amps.unpack_samples(head[8:16])
    if HEADER_LEN + ann_len + data_len != len(raw):
        return None
    ann = decode_announcements(raw[HEADER_LEN : HEADER_LEN + ann_len]) if ann_len else Announcements()
    data = None
    if data_len:
        stream = np.frombuffer(raw, dtype=np.uint8, count=data_len,
                               offset=HEADER_LEN + ann_len)
        data = fec.deinterleave(stream, interleave_seed(frame_seq))
    return ParsedFrame(frame_seq, sender_id, samples, ann, data)


def split_data(parsed: ParsedFrame):
    """Attribute the data section to its packets.

    Yields (DataHeader, slice bytes as uint8 array, crc_ok). Slices whose
    extent runs past the section are dropped (mis-sized header after
    corruption is impossible past the announcement FEC+crc, but cheap to
    guard).
    """
    if parsed.announcements is None or parsed.data is None:
        return
    off = 0
    data = parsed.data
    for hdr in parsed.announcements.data_headers:
        ln = hdr.wire_bytes
        if off + ln > data.size:
            return
        payload = data[off : off + ln - 4]
        (crc,) = struct.unpack("<I", data[off + ln - 4 : off + ln].tobytes())
        off += ln
        yield hdr, payload, zlib.crc32(payload.tobytes()) == crc


def dump_frame(raw: bytes) -> str:
    """Hex + decoded structure, for trace debugging."""
    lines = [raw[:HEADER_LEN].hex()]
    parsed = parse_frame(raw)
    if parsed is None:
        lines.append("<header undecodable: erasure>")
        return "\n".join(lines)
    lines.append(
        f"frame_seq={parsed.frame_seq} sender={parsed.sender_id} "
        f"samples={amps.pack_samples(parsed.samples).hex()}"
    )
    ann = parsed.announcements
    if ann is None:
        lines.append("<announcements undecodable>")
    else:
        for a in ann.acks:
            lines.append(f"  ack {a.src}->{a.dst} seq={a.seq}")
        for s in ann.statuses:
            segs = ",".join(f"({g.start},{g.end},{g.est_errors})" for g in s.segments)
            lines.append(
                f"  status {s.src}->{s.dst} seq={s.seq} blocks={s.num_blocks} "
                f"mask={s.decoded_mask:#x} segs=[{segs}]"
            )
        for d in ann.data_headers:
            lines.append(
                f"  data {d.src}->{d.dst} seq={d.seq} bytes={d.pkt_bytes} "
                f"seg=({d.start},{d.end}) mask={d.block_mask:#x}"
            )
    if parsed.data is not None:
        lines.append(f"  data section {parsed.data.size}B")
        for hdr, payload, ok in split_data(parsed):
            lines.append(
                f"    {hdr.src}->{hdr.dst} seq={hdr.seq} {payload.size}B "
                f"crc {'ok' if ok else 'BAD'}"
            )
    return "\n".join(lines)
