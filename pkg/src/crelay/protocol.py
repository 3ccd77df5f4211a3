"""Per-node engines: the coded-relaying state machine and the ARQ baseline.

A packet at a node is in one of three states: S0 (bytes overheard, not
decodable), S1 (decoded, next-hop reception unknown), S2 (decoded and the
next hop's receiving status is known). Only S2 packets are transmitted;
after each transmission the packet drops back to S1 until a fresh status or
ACK arrives, with a timeout promoting it again.

ACK handling implements the three-case rule: ack on decode, ack on hearing
an upstream node re-send a packet deleted due to a downstream ACK
(tombstone hit), and ack propagation when overhearing downstream activity
for a packet this node has not decoded. Hearing any downstream ACK deletes
the local copy. Overhearing an ACK from upstream creates an empty record so
the sender can learn this node has nothing yet.
"""

from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _rng, amps, fec, wire
from .packets import PacketBuffer, Segment, pack_blocks, select_segment

HELLO_BYTES = 375
_HELLO_TAG = 0x48E7


class PacketState(Enum):
    S0 = 0
    S1 = 1
    S2 = 2


# Presence margin over RS_K past which a decode attempt is made even when
# the per-segment error estimates say the record is short. Estimates carry
# a floor of 3 per segment, so a record stitched from many small top-ups
# can look undecodable long after it stopped being so.
ATTEMPT_MARGIN = 8


@dataclass
class Config:
    mtu: int = 2700
    t_s1: int = 25
    tombstone_life: int = 100
    status_life: int = 50
    status_gap: int = 4     # min slots between channel grabs per status
    preemptive: bool = True
    srcr_rto: int = 10
    max_acks_per_frame: int = 8
    max_statuses_per_frame: int = 6


def preemptive_fraction(p: float) -> float:
    """Fraction of errors the first transmission should pre-correct."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"error ratio {p} outside [0, 1]")
    if p == 0.0:
        return 0.0
    return min(max(p, 0.02), 0.05)


class LinkMeter:
    """Per-neighbor erasure and error estimates from received frames.

    Erasure comes from gaps in the sender's frame sequence over a sliding
    window; error ratio is the running mean of per-frame AMPS estimates
    divided by the section length.
    """

    WINDOW = 100

    def __init__(self):
        self.seqs: deque[int] = deque(maxlen=self.WINDOW)
        self.ratio_sum = 0.0
        self.ratio_n = 0
        self.ratios: deque[float] = deque(maxlen=self.WINDOW)
        self._alpha = amps.DEFAULT_ALPHA
        self._alpha_stale = False

    def saw_frame(self, seq: int) -> None:
        self.seqs.append(seq)

    def saw_error_ratio(self, ratio: float) -> None:
        self.ratio_sum += ratio
        self.ratio_n += 1
        self.ratios.append(ratio)
        self._alpha_stale = True

    @property
    def erasure(self) -> float:
        if len(self.seqs) < 2:
            return 0.0
        span = self.seqs[-1] - self.seqs[0] + 1
        if span <= 0:  # u16 wraparound mid-window; skip the torn estimate
            return 0.0
        return max(0.0, 1.0 - len(self.seqs) / span)

    @property
    def error(self) -> float:
        return self.ratio_sum / self.ratio_n if self.ratio_n else 0.0

    @property
    def alpha(self) -> float:
        """Tail parameter fitted to the ratios seen so far.

        Refit lazily; with fewer than 8 observations the default is less
        misleading than a fit dominated by the estimator floor.
        """
        if self._alpha_stale:
            if len(self.ratios) >= 8:
                self._alpha = amps.fit_alpha(list(self.ratios))
            self._alpha_stale = False
        return self._alpha


@dataclass
class FlowPacket:
    key: tuple
    pkt_bytes: int = 0
    num_blocks: int = 0
    buffer: PacketBuffer | None = None
    codewords: dict = field(default_factory=dict)  # block -> full 255B array
    state: PacketState = PacketState.S0
    s1_since: int = 0
    next_hop_status: wire.ReceivingStatus | None = None
    status_expiry: int = 0
    last_status_tx: int = -(1 << 30)
    queued_for: int | None = None

    @property
    def decoded(self) -> bool:
        return self.num_blocks > 0 and len(self.codewords) == self.num_blocks

    @property
    def decoded_mask(self) -> int:
        mask = 0
        for i in self.codewords:
            mask |= 1 << i
        return mask


def _positions(path) -> dict:
    return {v: i for i, v in enumerate(path)}


class _NodeBase:
    """State shared by both engines: identity, paths, frame sequencing."""

    def __init__(self, node_id: int, config: Config | None = None, trace=None):
        self.id = node_id
        self.config = config or Config()
        self.trace = trace
        self.paths: dict[tuple, tuple] = {}
        self._path_pos: dict[tuple, dict] = {}
        self.link_table = None
        self.out_seq = 0
        self.meters: dict[int, LinkMeter] = {}
        self.pending_acks: OrderedDict[tuple, None] = OrderedDict()

    def set_paths(self, paths: dict) -> None:
        self.paths = {k: tuple(p) for k, p in paths.items()}
        self._path_pos = {k: _positions(p) for k, p in self.paths.items()}

    def set_link_table(self, table) -> None:
        self.link_table = table

    def path_for(self, key: tuple):
        return self.paths.get((key[0], key[1]))

    def position(self, key: tuple, node: int):
        pos = self._path_pos.get((key[0], key[1]))
        return pos.get(node) if pos is not None else None

    def next_hop(self, key: tuple):
        path = self.path_for(key)
        mine = self.position(key, self.id)
        if path is None or mine is None or mine + 1 >= len(path):
            return None
        return path[mine + 1]

    def meter(self, neighbor: int) -> LinkMeter:
        if neighbor not in self.meters:
            self.meters[neighbor] = LinkMeter()
        return self.meters[neighbor]

    def _next_seq(self) -> int:
        seq = self.out_seq
        self.out_seq = (self.out_seq + 1) & 0xFFFF
        return seq

    def queue_ack(self, key: tuple) -> None:
        self.pending_acks[key] = None

    def build_hello(self) -> bytes:
        """Measurement traffic: a headerless data section receivers can run
        the error estimator on, sized like the smallest common frame."""
        seq = self._next_seq()
        fill = _rng.indices(_rng.derive(self.id, seq, _HELLO_TAG),
                            HELLO_BYTES, 256).astype(np.uint8)
        return wire.build_frame(seq, self.id, wire.Announcements(), fill)

    def _drain_acks(self):
        acks = [wire.Ack(*k) for k in
                list(self.pending_acks)[: self.config.max_acks_per_frame]]
        for a in acks:
            del self.pending_acks[a.key]
        return acks


class CrelayNode(_NodeBase):
    def __init__(self, node_id: int, tables, config: Config | None = None,
                 trace=None):
        super().__init__(node_id, config, trace)
        self.tables = tables
        self.packets: dict[tuple, FlowPacket] = {}
        self.tombstones: dict[tuple, int] = {}
        self.delivered: dict[tuple, bytes] = {}
        self.queues: dict[int, deque] = {}
        self._rr: deque[int] = deque()  # round-robin order of neighbor queues
        self._seq_counters: dict[tuple, int] = {}

    # -- upper layer --------------------------------------------------

    def inject(self, dst: int, payload: bytes, now: int) -> tuple:
        """Source-side entry: encode, mark transmittable immediately."""
        flow = (self.id, dst)
        seq = self._seq_counters.get(flow, 0)
        self._seq_counters[flow] = (seq + 1) & 0xFFFF
        key = (self.id, dst, seq)
        blocks = pack_blocks(payload)
        pkt = FlowPacket(key, pkt_bytes=len(payload), num_blocks=len(blocks))
        pkt.codewords = {i: fec.rs_encode(b) for i, b in enumerate(blocks)}
        pkt.state = PacketState.S2  # a fresh packet assumes an empty status
        self.packets[key] = pkt
        self._enqueue(pkt)
        return key

    # -- queue machinery ----------------------------------------------

    def _enqueue(self, pkt: FlowPacket) -> None:
        nbr = self.next_hop(pkt.key)
        if nbr is None or pkt.queued_for is not None:
            return
        if nbr not in self.queues:
            self.queues[nbr] = deque()
            self._rr.append(nbr)
        self.queues[nbr].append(pkt.key)
        pkt.queued_for = nbr

    def _unqueue(self, pkt: FlowPacket) -> None:
        nbr = pkt.queued_for
        if nbr is not None and nbr in self.queues:
            try:
                self.queues[nbr].remove(pkt.key)
            except ValueError:
                pass
        pkt.queued_for = None

    def _delete(self, key: tuple, now: int) -> None:
        pkt = self.packets.pop(key, None)
        if pkt is not None:
            self._unqueue(pkt)
        self.tombstones[key] = now + self.config.tombstone_life
        if self.trace:
            self.trace.downstream_ack(now, self.id, key)

    def _tombstoned(self, key: tuple, now: int) -> bool:
        expiry = self.tombstones.get(key)
        if expiry is None:
            return False
        if now >= expiry:
            del self.tombstones[key]
            return False
        return True

    def _promote_due(self, now: int) -> None:
        stale = []
        for key, pkt in self.packets.items():
            if (pkt.state is PacketState.S1 and pkt.queued_for is not None
                    and now - pkt.s1_since >= self.config.t_s1):
                pkt.state = PacketState.S2
                pkt.next_hop_status = None
            elif pkt.state is PacketState.S0 and now >= pkt.status_expiry:
                stale.append(key)  # gave up waiting for more segments
        for key in stale:
            del self.packets[key]

    # -- reception ----------------------------------------------------

    def receive(self, raw: bytes, now: int) -> None:
        parsed = wire.parse_frame(raw)
        if parsed is None:
            return  # erasure: the node is unaware anything was sent
        self.meter(parsed.sender_id).saw_frame(parsed.frame_seq)
        ann = parsed.announcements
        if ann is None:
            return
        for ack in ann.acks:
            self.on_ack(ack.key, parsed.sender_id, now)
        for status in ann.statuses:
            self._on_status(status, parsed.sender_id, now)
        if parsed.data is not None:
            self._on_data(parsed, now)

    def on_ack(self, key: tuple, from_node: int, now: int) -> None:
        mine = self.position(key, self.id)
        theirs = self.position(key, from_node)
        if mine is None or theirs is None:
            return
        if theirs > mine:
            # downstream has it: delete, and propagate if not decoded here
            pkt = self.packets.get(key)
            had_undecoded = pkt is not None and not pkt.decoded
            if pkt is not None or key not in self.tombstones:
                self._delete(key, now)
            if had_undecoded:
                self.queue_ack(key)
        elif theirs < mine and key not in self.delivered:
            # upstream decoded it; make sure it can learn what we hold
            pkt = self.packets.get(key)
            if pkt is None and not self._tombstoned(key, now):
                pkt = FlowPacket(key)
                pkt.status_expiry = now + self.config.status_life
                self.packets[key] = pkt

    def _on_status(self, status: wire.ReceivingStatus, from_node: int,
                   now: int) -> None:
        key = status.key
        pkt = self.packets.get(key)
        if pkt is None:
            return
        if self.next_hop(key) != from_node:
            return  # statuses from further downstream are not plan inputs
        full = (status.num_blocks > 0
                and status.decoded_mask == (1 << status.num_blocks) - 1)
        if full:
            if not pkt.decoded:
                self.queue_ack(key)
            self._delete(key, now)
            return
        if pkt.state in (PacketState.S1, PacketState.S2):
            pkt.next_hop_status = status
            pkt.state = PacketState.S2

    def _on_data(self, parsed: wire.ParsedFrame, now: int) -> None:
        pieces = list(wire.split_data(parsed))
        if not pieces:
            if parsed.data is not None and parsed.data.size:
                # headerless section (hello traffic): only feed the meter
                recv = amps.compute_samples(parsed.data, parsed.frame_seq)
                mism = amps.mismatch_counts(parsed.samples, recv)
                meter = self.meter(parsed.sender_id)
                c_hat = self.tables.lookup_c(mism, meter.alpha,
                                             parsed.data.size)
                meter.saw_error_ratio(c_hat / parsed.data.size)
            return
        n_slices = sum(len(h.blocks) for h, _, _ in pieces)
        recv = amps.compute_samples(parsed.data, parsed.frame_seq)
        mism = amps.mismatch_counts(parsed.samples, recv)
        meter = self.meter(parsed.sender_id)
        c_hat = self.tables.lookup_c(mism, meter.alpha, parsed.data.size)
        meter.saw_error_ratio(c_hat / parsed.data.size)

        for hdr, payload, crc_ok in pieces:
            seg_len = hdr.end - hdr.start
            est = self.tables.lookup_e(c_hat, n_slices, seg_len)
            if self.trace:
                self.trace.amps_est(now, parsed.sender_id, self.id,
                                    hdr.key, seg_len, est)
            self._merge_packet(hdr, payload, crc_ok, est, parsed.sender_id, now)

    def _merge_packet(self, hdr: wire.DataHeader, payload, crc_ok: bool,
                      est: int, sender: int, now: int) -> None:
        key = hdr.key
        mine = self.position(key, self.id)
        theirs = self.position(key, sender)
        if mine is None or theirs is None:
            return
        if theirs > mine:
            # downstream transmitting the packet is as good as its ACK
            pkt = self.packets.get(key)
            if pkt is not None and not pkt.decoded:
                self.queue_ack(key)
            if pkt is not None:
                self._delete(key, now)
            return
        if theirs == mine:
            return
        # sender is upstream: this data is for us to merge
        if key in self.delivered:
            self.queue_ack(key)  # our earlier ACK was missed
            return
        if self._tombstoned(key, now):
            self.queue_ack(key)  # tombstone hit: re-ack, nothing else
            return
        pkt = self.packets.get(key)
        if pkt is None:
            pkt = FlowPacket(key)
            self.packets[key] = pkt
        if pkt.decoded:
            self.queue_ack(key)
            return
        if pkt.buffer is None:
            pkt.pkt_bytes = hdr.pkt_bytes
            pkt.num_blocks = hdr.num_blocks
            pkt.buffer = PacketBuffer(hdr.num_blocks)
        pkt.status_expiry = now + self.config.status_life

        seg_len = hdr.end - hdr.start
        use_est = 0 if crc_ok else min(est, seg_len)
        for slot, block in enumerate(hdr.blocks):
            if block in pkt.codewords or block >= pkt.num_blocks:
                continue
            chunk = payload[slot * seg_len:(slot + 1) * seg_len]
            if chunk.size != seg_len:
                break
            rec = pkt.buffer.records[block]
            before = (rec.present_count, rec.est_total)
            rec.merge_segment(Segment(hdr.start, hdr.end, use_est), chunk)
            if (rec.present_count, rec.est_total) == before:
                continue  # nothing new landed; an attempt can't do better
            # Decode when the estimate says so, but also once presence
            # clears a hard margin: error estimates only ever overshoot,
            # and past the margin a consistent-but-wrong codeword is a
            # 256**-ATTEMPT_MARGIN event.
            ready = (rec.decodable_estimate()
                     or rec.present_count >= fec.RS_K + ATTEMPT_MARGIN)
            if ready and rec.try_decode():
                pkt.codewords[block] = fec.rs_encode(rec.decoded_block)
        if pkt.decoded:
            self._decoded_now(pkt, now)

    def _decoded_now(self, pkt: FlowPacket, now: int) -> None:
        key = pkt.key
        self.queue_ack(key)
        if key[1] == self.id:
            if key not in self.delivered:
                payload = pkt.buffer.assemble_payload(pkt.pkt_bytes)
                self.delivered[key] = payload
                if self.trace:
                    self.trace.delivered(now, self.id, key, payload)
            del self.packets[key]
            return
        pkt.state = PacketState.S1
        pkt.s1_since = now
        pkt.buffer = None
        self._enqueue(pkt)

    # -- transmission -------------------------------------------------

    def _status_packets(self, now: int):
        return [pkt for pkt in self.packets.values()
                if not pkt.decoded and now < pkt.status_expiry]

    def _status_urgent(self, now: int) -> bool:
        """Whether a receiving status is worth grabbing the channel for.

        Statuses piggyback on every frame anyway; contending for a slot
        just to announce them is rate-limited so undecoded bystanders do
        not crowd out data traffic.
        """
        return any(now - pkt.last_status_tx >= self.config.status_gap
                   for pkt in self._status_packets(now))

    def _status_duties(self, now: int):
        out = []
        for pkt in self._status_packets(now):
            if pkt.buffer is None:
                out.append(wire.ReceivingStatus(*pkt.key, 0, 0, []))
                continue
            segs, worst = [], -1
            for i in pkt.buffer.undecoded_indices():
                rec = pkt.buffer.records[i]
                if rec.est_total > worst:
                    segs, worst = list(rec.segments), rec.est_total
            out.append(wire.ReceivingStatus(
                *pkt.key, pkt.num_blocks, pkt.buffer.decoded_mask, segs))
        return out[: self.config.max_statuses_per_frame]

    def _plan_packet(self, pkt: FlowPacket):
        """Segment choice plus preemptive extension for one S2 packet."""
        status = pkt.next_hop_status
        remote_mask = status.decoded_mask if status else 0
        remote_segs = [status.segments] if status and status.segments else []
        blocks = [i for i in range(pkt.num_blocks) if not remote_mask >> i & 1]
        if not blocks:
            return None
        start, end = select_segment(remote_segs)
        if self.config.preemptive and self.link_table is not None:
            nbr = self.next_hop(pkt.key)
            ls = self.link_table.link(self.id, nbr) if nbr is not None else None
            frac = preemptive_fraction(ls.error) if ls is not None else 0.0
            end = min(fec.RS_N, end + math.ceil(2 * frac * (end - start)))
        mask = 0
        for b in blocks:
            mask |= 1 << b
        hdr = wire.DataHeader(*pkt.key, pkt.pkt_bytes, start, end, mask)
        payload = np.concatenate([pkt.codewords[b][start:end] for b in blocks])
        return hdr, payload.tobytes()

    def backlogged(self, now: int) -> bool:
        self._promote_due(now)
        if self.pending_acks or self._status_urgent(now):
            return True
        return any(
            self.packets[k].state is PacketState.S2
            for q in self.queues.values() for k in q
        )

    def build_frame(self, now: int) -> bytes | None:
        self._promote_due(now)
        acks = self._drain_acks()
        ann_room = wire.MAX_ANNOUNCE_CONTENT - 3 - 6 * len(acks)
        statuses = []
        for status in self._status_duties(now):
            cost = 12 + 5 * len(status.segments)
            if ann_room - cost < 15:  # always leave room for one data header
                break
            ann_room -= cost
            statuses.append(status)
            self.packets[status.key].last_status_tx = now
        headers, payloads, sent_pkts = [], [], []
        mtu_room = self.config.mtu - wire.HEADER_LEN - 3 - wire.ANNOUNCE_OVERHEAD \
            - 6 * len(acks) - sum(12 + 5 * len(s.segments) for s in statuses)
        visited: set[tuple] = set()
        progress = True
        while progress:
            progress = False
            for _ in range(len(self._rr)):
                nbr = self._rr[0]
                self._rr.rotate(-1)
                plan, pkt = None, None
                for key in self.queues.get(nbr, ()):
                    cand = self.packets[key]
                    if key in visited or cand.state is not PacketState.S2:
                        continue
                    plan = self._plan_packet(cand)
                    if plan is None:
                        # next hop reports everything decoded; its ACK is
                        # in flight, so there is nothing left to send
                        visited.add(key)
                        continue
                    pkt = cand
                    break
                if pkt is None:
                    continue
                hdr, payload = plan
                cost = 15 + len(payload) + 4
                if cost > mtu_room or ann_room < 15:
                    visited.add(pkt.key)
                    continue
                visited.add(pkt.key)
                mtu_room -= cost
                ann_room -= 15
                headers.append(hdr)
                payloads.append(payload)
                sent_pkts.append(pkt)
                progress = True
        if not (acks or statuses or headers):
            return None
        ann = wire.Announcements(acks, statuses, headers)
        frame = wire.build_frame(self._next_seq(), self.id, ann,
                                 wire.pack_data_section(payloads))
        for pkt in sent_pkts:
            if self.trace:
                self.trace.tx(now, self.id, pkt.key, pkt.state.name)
            pkt.state = PacketState.S1
            pkt.s1_since = now
            pkt.next_hop_status = None
        return frame


@dataclass
class _ArqPacket:
    key: tuple
    pkt_bytes: int
    codewords: list
    next_due: int


class SrcrNode(_NodeBase):
    """Hop-by-hop ARQ baseline on the ETX path.

    Whole codewords travel in every attempt; a frame is kept only if every
    block decodes, otherwise it is discarded with no state carried over.
    ACKs are real frames through the same MAC and can be lost, in which case
    the retransmit timer fires and the receiver re-acks the duplicate.
    """

    def __init__(self, node_id: int, config: Config | None = None, trace=None):
        super().__init__(node_id, config, trace)
        self.holding: dict[tuple, _ArqPacket] = {}
        self.seen: set[tuple] = set()
        self.delivered: dict[tuple, bytes] = {}
        self._seq_counters: dict[tuple, int] = {}

    def inject(self, dst: int, payload: bytes, now: int) -> tuple:
        flow = (self.id, dst)
        seq = self._seq_counters.get(flow, 0)
        self._seq_counters[flow] = (seq + 1) & 0xFFFF
        key = (self.id, dst, seq)
        blocks = pack_blocks(payload)
        coded = 255 * len(blocks) + 4 + wire.HEADER_LEN + 3 + 15 + wire.ANNOUNCE_OVERHEAD
        if coded > self.config.mtu:
            raise ValueError(f"packet needs {coded}B frames, mtu is {self.config.mtu}")
        codewords = [fec.rs_encode(b) for b in blocks]
        self.holding[key] = _ArqPacket(key, len(payload), codewords, now)
        self.seen.add(key)
        return key

    def receive(self, raw: bytes, now: int) -> None:
        parsed = wire.parse_frame(raw)
        if parsed is None:
            return
        self.meter(parsed.sender_id).saw_frame(parsed.frame_seq)
        ann = parsed.announcements
        if ann is None:
            return
        for ack in ann.acks:
            if ack.key in self.holding and parsed.sender_id == self.next_hop(ack.key):
                del self.holding[ack.key]
                if self.trace:
                    self.trace.downstream_ack(now, self.id, ack.key)
        if parsed.data is None:
            return
        for hdr, payload, _crc_ok in wire.split_data(parsed):
            self._on_data_packet(hdr, payload, parsed.sender_id, now)

    def _on_data_packet(self, hdr, payload, sender: int, now: int) -> None:
        key = hdr.key
        mine = self.position(key, self.id)
        theirs = self.position(key, sender)
        if mine is None or theirs is None or mine != theirs + 1:
            return  # strictly hop-by-hop: no overhearing exploitation
        if key in self.seen:
            self.queue_ack(key)  # duplicate: the earlier ack was lost
            return
        blocks = []
        for i in range(hdr.num_blocks):
            vals = payload[i * fec.RS_N:(i + 1) * fec.RS_N]
            if vals.size != fec.RS_N:
                return
            block = fec.rs_decode(vals, np.ones(fec.RS_N, dtype=bool))
            if block is None:
                return  # residual corruption: discard the whole attempt
            blocks.append(block)
        self.seen.add(key)
        self.queue_ack(key)
        data = b"".join(b.tobytes() for b in blocks)[: hdr.pkt_bytes]
        if key[1] == self.id:
            self.delivered[key] = data
            if self.trace:
                self.trace.delivered(now, self.id, key, data)
            return
        self.holding[key] = _ArqPacket(
            key, hdr.pkt_bytes, [fec.rs_encode(b) for b in blocks], now)

    def backlogged(self, now: int) -> bool:
        return bool(self.pending_acks) or any(
            p.next_due <= now for p in self.holding.values())

    def build_frame(self, now: int) -> bytes | None:
        acks = self._drain_acks()
        due = [p for p in self.holding.values() if p.next_due <= now]
        headers, payloads = [], []
        if due:
            pkt = min(due, key=lambda p: (p.next_due, p.key))
            mask = (1 << len(pkt.codewords)) - 1
            headers.append(wire.DataHeader(*pkt.key, pkt.pkt_bytes, 0,
                                           fec.RS_N, mask))
            payloads.append(np.concatenate(pkt.codewords).tobytes())
            pkt.next_due = now + self.config.srcr_rto
            if self.trace:
                self.trace.tx(now, self.id, pkt.key, "ARQ")
        if not (acks or headers):
            return None
        ann = wire.Announcements(acks, [], headers)
        return wire.build_frame(self._next_seq(), self.id, ann,
                                wire.pack_data_section(payloads))
