"""Slotted discrete-event simulation of the two protocols.

One frame crosses the medium per slot (single collision domain, idealized
fair MAC): among the nodes with something to send, a seeded uniform draw
picks the transmitter, and the channel delivers an independently corrupted
copy to every other node in range.

A run walks three phases: hello traffic from which nodes measure per-link
erasure and error ratios (skipped when the scenario says so), a link-state
snapshot moment where every node learns the same table and routes are
fixed, then scheduled packet injection until the data phase plus drain
window ends. Everything downstream of the scenario seed is deterministic.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import _rng, fec, routing, tables, wire
from .channel import Channel
from .protocol import Config, CrelayNode, SrcrNode

_PAYLOAD_TAG = 0xDA7A
_MAC_TAG = 0x03AC


class SafetyViolation(AssertionError):
    pass


class Trace:
    """Event recorder the nodes report into.

    With strict=True the protocol correctness properties are enforced as
    the events arrive: delivery happens at most once per packet and must
    reproduce the injected payload, only transmittable packets are sent,
    and a node that learned its downstream has a packet never sends it
    again.
    """

    def __init__(self, strict: bool = False, keep_amps: bool = False):
        self.strict = strict
        self.keep_amps = keep_amps
        self.deliveries = []          # (slot, node, key)
        self.delivered_keys = {}      # key -> slot at destination
        self.acked = set()            # (node, key)
        self.amps = {}                # (slot, receiver, key) -> (len, est)
        self.payloads = {}            # key -> injected payload
        self.tx_count = 0

    def tx(self, slot, node, key, state):
        self.tx_count += 1
        if self.strict:
            if state not in ("S2", "ARQ"):
                raise SafetyViolation(f"node {node} sent {key} from {state}")
            if (node, key) in self.acked:
                raise SafetyViolation(
                    f"node {node} sent {key} after downstream ack")

    def delivered(self, slot, node, key, payload):
        if self.strict and key in self.delivered_keys:
            raise SafetyViolation(f"{key} delivered twice")
        if self.strict and key in self.payloads \
                and self.payloads[key] != bytes(payload):
            raise SafetyViolation(f"{key} delivered with wrong bytes")
        self.deliveries.append((slot, node, key))
        self.delivered_keys.setdefault(key, slot)

    def downstream_ack(self, slot, node, key):
        self.acked.add((node, key))

    def amps_est(self, slot, sender, receiver, key, seg_len, est):
        if self.keep_amps:
            self.amps[(slot, receiver, key)] = (seg_len, est)


@dataclass
class FlowMetrics:
    src: int
    dst: int
    injected: int = 0
    delivered: int = 0
    mu: float = 0.0            # delivered packets per second
    delay_mean: float = -1.0   # slots; -1 when nothing arrived
    delay_max: float = -1.0


@dataclass
class Metrics:
    protocol: str
    flows: list = field(default_factory=list)
    bytes_tx: int = 0          # network-wide, all phases
    frames_tx: int = 0
    data_deliveries: int = 0   # receptions of data-bearing frames
    partial_deliveries: int = 0
    amps_samples: list = field(default_factory=list)  # (est, true, seg_len)

    @property
    def partial_ratio(self) -> float:
        if not self.data_deliveries:
            return 0.0
        return self.partial_deliveries / self.data_deliveries

    def csv(self) -> str:
        out = io.StringIO()
        out.write("protocol,src,dst,injected,delivered,throughput_pps,"
                  "delay_mean_slots,delay_max_slots,bytes_tx,partial_ratio\n")
        for f in self.flows:
            out.write(
                f"{self.protocol},{f.src},{f.dst},{f.injected},{f.delivered},"
                f"{f.mu:.6f},{f.delay_mean:.6f},{f.delay_max:.6f},"
                f"{self.bytes_tx},{self.partial_ratio:.6f}\n")
        return out.getvalue()


def throughput_gain(a: Metrics, b: Metrics):
    """Per-flow (mu_a - mu_b) / mu_b, aligned by (src, dst)."""
    mus = {(f.src, f.dst): f.mu for f in b.flows}
    out = []
    for f in a.flows:
        base = mus.get((f.src, f.dst))
        if base is None or base == 0.0:
            out.append(float("inf") if f.mu > 0 else 0.0)
        else:
            out.append((f.mu - base) / base)
    return out


def measured_link_table(scn, nodes) -> routing.LinkTable:
    """Global snapshot assembled from every receiver's own meter."""
    table = routing.LinkTable(scn.nodes)
    for (i, j) in scn.links:
        meter = nodes[j].meters.get(i)
        if meter is None or len(meter.seqs) == 0:
            continue   # never heard: the snapshot has no such link
        err = min(meter.error, 0.49)
        table.set_link(i, j, meter.erasure, err)
    return table


def oracle_link_table(scn) -> routing.LinkTable:
    table = routing.LinkTable(scn.nodes)
    for (i, j), params in scn.links.items():
        table.set_link(i, j, params.erasure,
                       min(params.mean_error, 0.49))
    return table


def _payload(seed: int, flow, k: int) -> bytes:
    fill = _rng.indices(
        _rng.derive(seed, flow.src, flow.dst, k, _PAYLOAD_TAG),
        flow.pkt_bytes, 256)
    return fill.astype(np.uint8).tobytes()


class Simulation:
    """One protocol, one scenario, one seed; run() yields the Metrics."""

    def __init__(self, scn, protocol: str = "crelay", amps_tables=None,
                 strict: bool = False, instrument: bool = False):
        if protocol not in ("crelay", "srcr"):
            raise ValueError(f"unknown protocol {protocol!r}")
        self.scn = scn
        self.protocol = protocol
        self.trace = Trace(strict=strict, keep_amps=instrument)
        self.instrument = instrument
        self.channel = Channel(scn.links, scn.seed, burst=scn.burst)
        self.mac_rng = np.random.default_rng(_rng.derive(scn.seed, _MAC_TAG))
        config = Config(mtu=scn.mtu, preemptive=scn.preemptive)
        if protocol == "crelay":
            if amps_tables is None:
                amps_tables = tables.default_tables()
            self.nodes = {i: CrelayNode(i, amps_tables, config, self.trace)
                          for i in scn.nodes}
        else:
            self.nodes = {i: SrcrNode(i, config, self.trace)
                          for i in scn.nodes}
        self.metrics = Metrics(protocol=protocol)
        self.metrics.flows = [FlowMetrics(f.src, f.dst) for f in scn.flows]
        self.paths = {}
        self._frames = []        # (slot, clean frame, {rcv: corrupt pos})
        self._inject_slots = {}

    # -- phase helpers -------------------------------------------------

    def _broadcast(self, frame: bytes, sender: int, slot: int,
                   data_phase: bool) -> None:
        self.metrics.bytes_tx += len(frame)
        self.metrics.frames_tx += 1
        has_packets = False
        if data_phase:
            parsed = wire.parse_frame(frame)
            has_packets = bool(parsed.announcements.data_headers)
        outcomes = self.channel.transmit(frame, sender)
        for dst in sorted(outcomes):
            dl = outcomes[dst]
            self.nodes[dst].receive(dl.data, slot)
            if has_packets:
                self.metrics.data_deliveries += 1
                if dl.corrupted.size:
                    self.metrics.partial_deliveries += 1
        if has_packets and self.instrument:
            self._frames.append(
                (slot, frame, {d: o.corrupted for d, o in outcomes.items()}))

    def _hello_phase(self) -> None:
        budget = {i: self.scn.hello_count for i in self.scn.nodes}
        for slot in range(self.scn.hello_slots):
            ready = [i for i in self.scn.nodes if budget[i] > 0]
            if not ready:
                break
            sender = ready[int(self.mac_rng.integers(len(ready)))]
            budget[sender] -= 1
            self._broadcast(self.nodes[sender].build_hello(), sender,
                            slot, data_phase=False)

    def _snapshot(self) -> None:
        if self.scn.hello_slots > 0:
            table = measured_link_table(self.scn, self.nodes)
        else:
            table = oracle_link_table(self.scn)
        paths = {}
        for flow in self.scn.flows:
            if self.protocol == "crelay":
                cand = routing.greedy_route(
                    flow.src, table, self.scn.w).get(flow.dst)
                path = cand.nodes if cand is not None and cand.valid else ()
            else:
                path, _cost = routing.etx_route(
                    flow.src, table).get(flow.dst, ((), float("inf")))
            paths[(flow.src, flow.dst)] = tuple(path)
        for node in self.nodes.values():
            node.set_paths(paths)
            node.set_link_table(table)
        self.paths = paths

    def _data_phase(self) -> None:
        scn = self.scn
        start = scn.hello_slots
        counters = {(f.src, f.dst): 0 for f in scn.flows}
        due = {}
        for flow in scn.flows:
            for off in flow.injection_offsets():
                due.setdefault(start + off, []).append(flow)
        for slot in range(start, start + scn.data_slots + scn.drain_slots):
            for flow in due.get(slot, ()):
                fm = self._flow_metrics(flow)
                fm.injected += 1
                k = counters[(flow.src, flow.dst)]
                counters[(flow.src, flow.dst)] += 1
                if not self.paths[(flow.src, flow.dst)]:
                    continue    # disconnected: zero throughput, not a fault
                payload = _payload(scn.seed, flow, k)
                key = self.nodes[flow.src].inject(flow.dst, payload, slot)
                self.trace.payloads[key] = payload
                self._inject_slots[key] = slot
            ready = [i for i in scn.nodes if self.nodes[i].backlogged(slot)]
            if not ready:
                continue
            sender = ready[int(self.mac_rng.integers(len(ready)))]
            frame = self.nodes[sender].build_frame(slot)
            if frame is None:
                continue
            self._broadcast(frame, sender, slot, data_phase=True)

    def _flow_metrics(self, flow) -> FlowMetrics:
        for fm in self.metrics.flows:
            if (fm.src, fm.dst) == (flow.src, flow.dst):
                return fm
        raise KeyError(f"flow {flow.src}->{flow.dst} not registered")

    # -- results -------------------------------------------------------

    def _finalize(self) -> None:
        scn = self.scn
        delays = {}
        for key, slot in self.trace.delivered_keys.items():
            delays.setdefault((key[0], key[1]), []).append(
                slot - self._inject_slots[key])
        for fm in self.metrics.flows:
            d = delays.get((fm.src, fm.dst), [])
            fm.delivered = len(d)
            fm.mu = len(d) * scn.slots_per_second / scn.data_slots
            if d:
                fm.delay_mean = float(np.mean(d))
                fm.delay_max = float(max(d))
        if self.instrument:
            self.metrics.amps_samples = self._true_vs_estimated()

    def _true_vs_estimated(self):
        """Pair every logged estimate with the channel's ground truth."""
        samples = []
        for slot, frame, corrupted in self._frames:
            parsed = wire.parse_frame(frame)
            hdrs = parsed.announcements.data_headers
            if not hdrs:
                continue
            data_off = len(frame) - parsed.data.size
            seed = wire.interleave_seed(parsed.frame_seq)
            extents = []
            off = 0
            for hdr in hdrs:
                extents.append((hdr, off))
                off += hdr.wire_bytes
            for rcv, pos in corrupted.items():
                mask = np.zeros(parsed.data.size, dtype=np.uint8)
                inside = pos[pos >= data_off] - data_off
                mask[inside] = 1
                mask = fec.deinterleave(mask, seed)
                for hdr, off in extents:
                    logged = self.trace.amps.get((slot, rcv, hdr.key))
                    if logged is None:
                        continue
                    seg_len, est = logged
                    for j in range(len(hdr.blocks)):
                        lo = off + j * seg_len
                        true = int(mask[lo:lo + seg_len].sum())
                        samples.append((est, true, seg_len))
        return samples

    def run(self) -> Metrics:
        self._hello_phase()
        self._snapshot()
        self._data_phase()
        self._finalize()
        return self.metrics


def run(scn, protocol: str = "crelay", **kw) -> Metrics:
    return Simulation(scn, protocol, **kw).run()


def collect_amps_accuracy(samples):
    """Histogram and headline rates for (estimated, true) segment pairs."""
    if not samples:
        return {"count": 0}
    diff = np.array([e - t for e, t, _ in samples], dtype=np.int64)
    over = diff[diff > 0]
    return {
        "count": int(diff.size),
        "within3": float(np.mean(np.abs(diff) <= 3)),
        "underestimate_rate": float(np.mean(diff < 0)),
        "overestimate_within3": float(np.mean(over <= 3)) if over.size else 1.0,
        "histogram": {int(v): int(c) for v, c in
                      zip(*np.unique(diff, return_counts=True))},
    }
