"""Node state machine, link metering, and the ARQ baseline."""

import numpy as np
import pytest

from crelay import amps, fec, protocol, routing, wire
from crelay.protocol import CrelayNode, PacketState, SrcrNode
from helpers import corrupt


class Recorder:
    """Trace hook that keeps every event for later assertions."""

    def __init__(self):
        self.tx = []
        self.delivered = []
        self.downstream_ack = []
        self.amps_est = []

    def __getattr__(self, name):
        raise AttributeError(name)


def _hook(rec, name):
    def log(*args):
        getattr(rec, name).append(args)
    return log


def make_trace():
    rec = Recorder()
    class T:
        tx = staticmethod(_hook(rec, "tx"))
        delivered = staticmethod(_hook(rec, "delivered"))
        downstream_ack = staticmethod(_hook(rec, "downstream_ack"))
        amps_est = staticmethod(_hook(rec, "amps_est"))
    return T(), rec


def chain_table(n, erasure=0.0, error=0.0):
    t = routing.LinkTable(range(n))
    for i in range(n - 1):
        t.set_link(i, i + 1, erasure, error)
        t.set_link(i + 1, i, erasure, error)
    return t


def make_chain(n, tbl, trace=None, error=0.0):
    table = chain_table(n, error=error)
    paths = {(0, n - 1): tuple(range(n))}
    nodes = {}
    for i in range(n):
        node = CrelayNode(i, tbl, trace=trace)
        node.set_paths(paths)
        node.set_link_table(table)
        nodes[i] = node
    return nodes


def run_chain(nodes, slots, deliver, payload_rng=None, drop=()):
    """Drive a toy MAC: lowest slot-rotating pick among backlogged nodes.

    deliver(sender, receiver, frame, slot) performs the per-link channel;
    pairs listed in drop never hear each other.
    """
    n = len(nodes)
    for slot in range(1, slots + 1):
        backlogged = [i for i in range(n) if nodes[i].backlogged(slot)]
        if not backlogged:
            continue
        sender = backlogged[slot % len(backlogged)]
        frame = nodes[sender].build_frame(slot)
        if frame is None:
            continue
        for r in range(n):
            if r == sender or {sender, r} in drop:
                continue
            deliver(sender, r, frame, slot)


class TestPreemptiveFraction:
    def test_zero_error_sends_nothing_extra(self):
        assert protocol.preemptive_fraction(0.0) == 0.0

    def test_clamped_between_two_and_five_percent(self):
        assert protocol.preemptive_fraction(0.005) == 0.02
        assert protocol.preemptive_fraction(0.03) == 0.03
        assert protocol.preemptive_fraction(0.5) == 0.05

    def test_rejects_nonsense_ratios(self):
        with pytest.raises(ValueError):
            protocol.preemptive_fraction(-0.1)
        with pytest.raises(ValueError):
            protocol.preemptive_fraction(1.5)


class TestLinkMeter:
    def test_no_frames_means_no_claims(self):
        m = protocol.LinkMeter()
        assert m.erasure == 0.0
        assert m.error == 0.0

    def test_contiguous_sequence_is_lossless(self):
        m = protocol.LinkMeter()
        for s in range(40):
            m.saw_frame(s)
        assert m.erasure == 0.0

    def test_gaps_show_up_as_erasure(self):
        m = protocol.LinkMeter()
        for s in range(0, 80, 2):
            m.saw_frame(s)
        assert m.erasure == pytest.approx(0.5, abs=0.02)

    def test_sequence_wrap_does_not_blow_up(self):
        m = protocol.LinkMeter()
        for s in (0xFFFE, 0xFFFF, 0, 1):
            m.saw_frame(s)
        assert 0.0 <= m.erasure <= 1.0

    def test_error_is_running_mean(self):
        m = protocol.LinkMeter()
        for r in (0.01, 0.03):
            m.saw_error_ratio(r)
        assert m.error == pytest.approx(0.02)

    def test_alpha_defaults_until_enough_evidence(self):
        m = protocol.LinkMeter()
        for _ in range(7):
            m.saw_error_ratio(0.05)
        assert m.alpha == amps.DEFAULT_ALPHA

    def test_alpha_matches_direct_fit(self):
        m = protocol.LinkMeter()
        ratios = [0.01, 0.02, 0.05, 0.01, 0.003, 0.08, 0.02, 0.04, 0.015]
        for r in ratios:
            m.saw_error_ratio(r)
        assert m.alpha == amps.fit_alpha(ratios)


class TestChainDelivery:
    def test_perfect_links_single_data_frame(self, amps_tables):
        trace, rec = make_trace()
        nodes = make_chain(3, amps_tables, trace=trace)
        payload = np.random.default_rng(7).integers(
            0, 256, 1500, dtype=np.uint8).tobytes()
        key = nodes[0].inject(2, payload, now=0)

        run_chain(nodes, 10, lambda s, r, f, t: nodes[r].receive(f, t))

        assert nodes[2].delivered[key] == payload
        # relay 1 and destination 2 both heard the source directly, so the
        # single source transmission suffices
        data_tx = [e for e in rec.tx if e[3] != "ARQ"]
        assert len(data_tx) == 1 and data_tx[0][1] == 0
        assert key in nodes[0].tombstones and key not in nodes[0].packets
        assert key in nodes[1].tombstones and key not in nodes[1].packets

    def test_lossy_relay_with_status_topups(self, amps_tables):
        trace, rec = make_trace()
        nodes = make_chain(3, amps_tables, trace=trace, error=0.02)
        payload = np.random.default_rng(7).integers(
            0, 256, 1500, dtype=np.uint8).tobytes()
        key = nodes[0].inject(2, payload, now=0)

        chan = np.random.default_rng(99)
        run_chain(
            nodes, 60,
            lambda s, r, f, t: nodes[r].receive(corrupt(chan, f, 0.02), t),
            drop=[{0, 2}],
        )

        assert nodes[2].delivered[key] == payload
        source_tx = [e for e in rec.tx if e[1] == 0]
        relay_tx = [e for e in rec.tx if e[1] == 1]
        assert len(source_tx) >= 2, "corruption must force at least one top-up"
        assert relay_tx, "node 1 must relay when 0 and 2 are out of range"
        assert len(rec.delivered) == 1

    def test_only_s2_transmits(self, amps_tables):
        trace, rec = make_trace()
        nodes = make_chain(3, amps_tables, trace=trace, error=0.02)
        payload = bytes(range(256)) * 4
        nodes[0].inject(2, payload, now=0)
        chan = np.random.default_rng(3)
        run_chain(
            nodes, 60,
            lambda s, r, f, t: nodes[r].receive(corrupt(chan, f, 0.02), t),
            drop=[{0, 2}],
        )
        assert rec.tx and all(e[3] == "S2" for e in rec.tx)

    def test_exactly_once_despite_duplicates(self, amps_tables):
        trace, rec = make_trace()
        nodes = make_chain(2, amps_tables, trace=trace)
        payload = b"q" * 300
        key = nodes[0].inject(1, payload, now=0)
        frame = nodes[0].build_frame(1)
        for t in (1, 2, 3):
            nodes[1].receive(frame, t)
        assert nodes[1].delivered == {key: payload}
        assert len(rec.delivered) == 1
        # duplicates still provoke a fresh ack so the sender can let go
        assert key in nodes[1].pending_acks


class TestStateMachine:
    def payload(self):
        return b"\x55" * 450

    def test_inject_enters_s2_and_tx_demotes(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        pkt = nodes[0].packets[key]
        assert pkt.state is PacketState.S2
        assert nodes[0].build_frame(1) is not None
        assert pkt.state is PacketState.S1
        assert pkt.next_hop_status is None

    def test_status_from_next_hop_repromotes(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        nodes[0].build_frame(1)
        pkt = nodes[0].packets[key]
        status = wire.ReceivingStatus(*key, 0, 0, [])
        nodes[0]._on_status(status, from_node=1, now=2)
        assert pkt.state is PacketState.S2

    def test_status_from_elsewhere_is_ignored(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        nodes[0].build_frame(1)
        status = wire.ReceivingStatus(*key, 0, 0, [])
        nodes[0]._on_status(status, from_node=2, now=2)
        assert nodes[0].packets[key].state is PacketState.S1

    def test_s1_timeout_repromotes(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        nodes[0].build_frame(1)
        t_s1 = nodes[0].config.t_s1
        assert not nodes[0].backlogged(t_s1)
        assert nodes[0].backlogged(1 + t_s1)
        assert nodes[0].packets[key].state is PacketState.S2

    def test_full_mask_status_acts_as_ack(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        nodes[0].build_frame(1)
        num = nodes[0].packets[key].num_blocks
        status = wire.ReceivingStatus(*key, num, (1 << num) - 1, [])
        nodes[0]._on_status(status, from_node=1, now=2)
        assert key not in nodes[0].packets
        assert key in nodes[0].tombstones

    def test_downstream_ack_deletes_and_propagates(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = nodes[0].inject(2, self.payload(), now=0)
        nodes[0].build_frame(1)
        nodes[0].on_ack(key, from_node=1, now=2)
        assert key not in nodes[0].packets
        assert key in nodes[0].tombstones
        # the source had decoded blocks, so it does not re-ack upstream
        assert key not in nodes[0].pending_acks

    def test_upstream_ack_spawns_status_record(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = (0, 2, 0)
        nodes[2].on_ack(key, from_node=1, now=5)
        pkt = nodes[2].packets[key]
        assert pkt.buffer is None and not pkt.decoded
        frame = nodes[2].build_frame(6)
        parsed = wire.parse_frame(frame)
        statuses = parsed.announcements.statuses
        assert len(statuses) == 1 and statuses[0].key == key
        assert statuses[0].num_blocks == 0 and not statuses[0].segments

    def test_overheard_downstream_data_is_implicit_ack(self, amps_tables):
        trace, rec = make_trace()
        nodes = make_chain(3, amps_tables, trace=trace)
        payload = np.random.default_rng(11).integers(
            0, 256, 900, dtype=np.uint8).tobytes()
        key = nodes[0].inject(2, payload, now=0)
        frame = nodes[0].build_frame(1)
        nodes[1].receive(frame, 1)          # relay decodes, queues ack
        assert key in nodes[1].packets
        # destination missed it; relay gets promoted by an empty status
        status = wire.ReceivingStatus(*key, 0, 0, [])
        nodes[1]._on_status(status, from_node=2, now=2)
        relay_frame = nodes[1].build_frame(3)
        nodes[0].receive(relay_frame, 3)    # source overhears the relay's data
        assert key not in nodes[0].packets
        assert key in nodes[0].tombstones

    def test_tombstone_triggers_reack_on_upstream_data(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        payload = self.payload()
        key = nodes[0].inject(2, payload, now=0)
        frame = nodes[0].build_frame(1)
        nodes[1].receive(frame, 1)
        nodes[1].on_ack(key, from_node=2, now=2)   # downstream took over
        assert key in nodes[1].tombstones and key not in nodes[1].packets
        nodes[1].pending_acks.clear()
        nodes[1].receive(frame, 3)                 # stale upstream duplicate
        assert key in nodes[1].pending_acks
        assert key not in nodes[1].packets

    def test_tombstone_expires(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = (0, 2, 4)
        nodes[1].tombstones[key] = 50
        assert nodes[1]._tombstoned(key, 49)
        assert not nodes[1]._tombstoned(key, 50)
        assert key not in nodes[1].tombstones

    def test_s0_record_pruned_after_status_timeout(self, amps_tables):
        nodes = make_chain(3, amps_tables)
        key = (0, 2, 0)
        nodes[2].on_ack(key, from_node=1, now=0)
        life = nodes[2].config.status_life
        nodes[2].backlogged(life - 1)
        assert key in nodes[2].packets
        nodes[2].backlogged(life)
        assert key not in nodes[2].packets


class TestHello:
    def test_hello_feeds_meter_without_packet_state(self, amps_tables):
        a = CrelayNode(0, amps_tables)
        b = CrelayNode(1, amps_tables)
        chan = np.random.default_rng(5)
        for t in range(30):
            b.receive(corrupt(chan, a.build_hello(), 0.03), t)
        m = b.meter(0)
        assert m.ratio_n == 30
        assert 0.0 < m.error < 0.1
        assert not b.packets

    def test_hello_erasure_estimate(self, amps_tables):
        a = CrelayNode(0, amps_tables)
        b = SrcrNode(1)
        for t in range(60):
            h = a.build_hello()
            if t % 3 == 0:
                continue
            b.receive(h, t)
        assert b.meter(0).erasure == pytest.approx(1 / 3, abs=0.05)


class TestSrcr:
    def make_pair(self, n=3, trace=None):
        table = chain_table(n)
        paths = {(0, n - 1): tuple(range(n))}
        nodes = {}
        for i in range(n):
            node = SrcrNode(i, trace=trace)
            node.set_paths(paths)
            node.set_link_table(table)
            nodes[i] = node
        return nodes

    def test_hop_by_hop_delivery(self):
        trace, rec = make_trace()
        nodes = self.make_pair(trace=trace)
        payload = np.random.default_rng(1).integers(
            0, 256, 900, dtype=np.uint8).tobytes()
        key = nodes[0].inject(2, payload, now=0)
        run_chain(nodes, 20, lambda s, r, f, t: nodes[r].receive(f, t))
        assert nodes[2].delivered[key] == payload
        assert not nodes[0].holding and not nodes[1].holding
        # every hop carries whole codewords, so both hops transmit
        senders = {e[1] for e in rec.tx}
        assert senders == {0, 1}

    def test_no_overhearing_shortcut(self):
        nodes = self.make_pair()
        payload = b"z" * 600
        key = nodes[0].inject(2, payload, now=0)
        frame = nodes[0].build_frame(1)
        nodes[2].receive(frame, 1)   # destination hears the source directly
        assert key not in nodes[2].delivered

    def test_rto_retransmits_until_acked(self):
        trace, rec = make_trace()
        nodes = self.make_pair(n=2, trace=trace)
        key = nodes[0].inject(1, b"r" * 300, now=0)
        f1 = nodes[0].build_frame(0)
        assert f1 is not None            # attempt 1, lost
        rto = nodes[0].config.srcr_rto
        assert not nodes[0].backlogged(rto - 1)
        assert nodes[0].backlogged(rto)
        f2 = nodes[0].build_frame(rto)
        nodes[1].receive(f2, rto)
        assert nodes[1].delivered[key] == b"r" * 300
        ack = nodes[1].build_frame(rto + 1)
        nodes[0].receive(ack, rto + 1)
        assert not nodes[0].holding
        assert len(rec.tx) == 2

    def test_discards_frame_when_any_block_fails(self):
        nodes = self.make_pair(n=2)
        key = nodes[0].inject(1, b"d" * 900, now=0)   # 6 blocks
        frame = nodes[0].build_frame(0)
        bad = bytearray(frame)
        # concentrate damage well past one block's correction budget
        for i in range(60, 180):
            bad[i] ^= 0x5A
        nodes[1].receive(bytes(bad), 0)
        assert key not in nodes[1].delivered
        assert key not in nodes[1].seen
        assert not nodes[1].pending_acks

    def test_duplicate_data_reacked(self):
        nodes = self.make_pair(n=2)
        key = nodes[0].inject(1, b"u" * 150, now=0)
        frame = nodes[0].build_frame(0)
        nodes[1].receive(frame, 0)
        nodes[1].pending_acks.clear()
        nodes[1].receive(frame, 1)
        assert key in nodes[1].pending_acks
        assert nodes[1].delivered[key] == b"u" * 150

    def test_oversized_packet_rejected(self):
        nodes = self.make_pair(n=2)
        with pytest.raises(ValueError):
            nodes[0].inject(1, bytes(1600), now=0)   # 11 blocks over 2700 mtu


class TestFrameBudget:
    def test_round_robin_over_flows(self, amps_tables):
        """Two coexisting flows must both make progress."""
        table = chain_table(3)
        paths = {(0, 2): (0, 1, 2), (2, 0): (2, 1, 0)}
        nodes = {}
        for i in range(3):
            node = CrelayNode(i, amps_tables)
            node.set_paths(paths)
            node.set_link_table(table)
            nodes[i] = node
        pay_a = b"a" * 1500
        pay_b = b"b" * 1500
        ka = nodes[0].inject(2, pay_a, now=0)
        kb = nodes[2].inject(0, pay_b, now=0)
        run_chain(nodes, 30, lambda s, r, f, t: nodes[r].receive(f, t))
        assert nodes[2].delivered[ka] == pay_a
        assert nodes[0].delivered[kb] == pay_b

    def test_mtu_spills_second_packet_to_next_frame(self, amps_tables):
        nodes = make_chain(2, amps_tables)
        k1 = nodes[0].inject(1, bytes(1400), now=0)
        k2 = nodes[0].inject(1, bytes(1400), now=0)
        f1 = nodes[0].build_frame(1)
        assert len(f1) <= nodes[0].config.mtu
        parsed = wire.parse_frame(f1)
        assert [h.key for h in parsed.announcements.data_headers] == [k1]
        # k2 is still S2 and must go out in the following frame
        f2 = nodes[0].build_frame(2)
        parsed2 = wire.parse_frame(f2)
        assert [h.key for h in parsed2.announcements.data_headers] == [k2]
