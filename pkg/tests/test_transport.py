import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrel.channel import LinkProfile, RandomLoss, burst_preset
from dynrel.metrics import AoiTracker, KpiCounters
from dynrel.policy import RELIABLE, UNRELIABLE, AlwaysReliable, Policy, StaticSplit
from dynrel.scenario import ScenarioConfig, run_scenario
from dynrel.sim import Simulator
from dynrel.transport import (HEADER_BYTES, MAX_PACKET, CongestionState, FrameKind, Packet, ProtocolViolation,
                              Receiver, RttEstimator, Sender)
from dynrel.workload import Fragment, UpdateSpec


class Scripted(Policy):
    name = "scripted"

    def __init__(self, verdicts):
        self.verdicts = list(verdicts)

    def decide(self, ctx):
        return RELIABLE if self.verdicts.pop(0) else UNRELIABLE


def make_sender(policy, first_pn=0, mtu_payload=1):
    sim = Simulator()
    wire = []
    kpi = KpiCounters()
    sender = Sender(sim, wire.append, policy, kpi, mtu_payload=mtu_payload, audit=True)
    sender.next_pn = first_pn
    return sim, sender, wire, kpi


def make_receiver(n=64):
    sim = Simulator()
    acks = []
    kpi = KpiCounters()
    rx = Receiver(sim, acks.append, kpi, AoiTracker(), buffer_threshold=n)
    rx.delivery_log = []
    sim.run_until(10**6)  # receptions must not precede the synthetic generation times
    return sim, rx, acks, kpi


def rel(pn, seq, uid=None, count=1):
    uid = seq if uid is None else uid
    return Packet(pn, FrameKind.RELIABLE_STREAM, True, 100, 0, Fragment(uid, uid, 0, count, 70), seq)


def unrel(pn, uid):
    return Packet(pn, FrameKind.UNRELIABLE_STREAM, False, 100, 0, Fragment(uid, 0, 0, 1, 70))


# -- sender ---------------------------------------------------------------

def test_update_is_split_into_mtu_packets():
    sim, sender, wire, kpi = make_sender(AlwaysReliable(), mtu_payload=1200)
    sender.send_update(UpdateSpec(0, 0, 17_000))
    sizes = [p.size_bytes - HEADER_BYTES for p in wire]
    assert len(wire) == 10  # the initial window holds 10 full packets
    assert sizes == [1200] * 10
    assert all(p.reliable and p.kind is FrameKind.RELIABLE_STREAM for p in wire)
    assert sender.cc.bytes_in_flight == 10 * MAX_PACKET
    assert len(sender._pending) == 5


def test_zero_split_sends_nothing_ack_eliciting_once_probed():
    sim, sender, wire, kpi = make_sender(StaticSplit(0.0), mtu_payload=100)
    sender.send_ping(0)
    sender.send_update(UpdateSpec(0, 0, 1000))
    data = [p for p in wire if p.kind is not FrameKind.PING]
    assert len(data) == 10
    assert not any(p.reliable for p in data)
    assert kpi.reliable_data_sent == 0 and kpi.data_packets_sent == 10


def test_packet_threshold_declares_old_reliable_lost():
    sim, sender, wire, kpi = make_sender(Scripted([1, 1, 1, 1]), first_pn=5)
    sender.send_update(UpdateSpec(0, 0, 4))
    assert [p.pn for p in wire] == [5, 6, 7, 8]
    lost = sender.on_ack(((8, 8),))
    assert lost == [5]
    assert kpi.sender_detected_losses == 1


def test_unreliable_packets_do_not_count_toward_reordering():
    sim, sender, wire, kpi = make_sender(Scripted([1, 0, 0, 1, 1]), first_pn=5)
    sender.send_update(UpdateSpec(0, 0, 5))
    assert [(p.pn, p.reliable) for p in wire] == [(5, True), (6, False), (7, False), (8, True), (9, True)]
    assert sender.on_ack(((9, 9),)) == []
    assert 5 in sender._outstanding
    # one more reliable acknowledgement pushes 5 over the threshold
    sender.send_ping(0)
    assert sender.on_ack(((9, 10),)) == [5]


def test_retransmission_keeps_stream_position_and_takes_new_pn():
    sim, sender, wire, kpi = make_sender(Scripted([1, 1, 1, 1]), first_pn=5)
    sender.send_update(UpdateSpec(0, 0, 4))
    sender.on_ack(((6, 8),))
    retx = [p for p in wire if p.retx_of is not None]
    assert len(retx) == 1
    assert retx[0].retx_of == 5 and retx[0].pn == 9 and retx[0].stream_seq == wire[0].stream_seq
    assert kpi.retransmissions == 1


def test_ack_naming_unreliable_pn_is_a_violation():
    sim, sender, wire, kpi = make_sender(Scripted([1, 0, 1]))
    sender.send_update(UpdateSpec(0, 0, 3))
    assert not wire[1].reliable
    with pytest.raises(ProtocolViolation, match="unreliable pn 1"):
        sender.on_ack(((0, 2),))


def test_dropped_unreliable_packet_is_invisible_to_sender():
    sim, sender, wire, kpi = make_sender(Scripted([1, 0, 1, 1, 1]))
    sender.send_update(UpdateSpec(0, 0, 5))
    before = (sender.stats.packets_sent_total, sender.stats.packets_sent_unreliable)
    # pn 1 was unreliable and "dropped"; the receiver acknowledges the rest
    assert sender.on_ack(((0, 0), (2, 4))) == []
    assert kpi.retransmissions == 0 and kpi.sender_detected_losses == 0
    assert (sender.stats.packets_sent_total, sender.stats.packets_sent_unreliable) == before


def test_rtt_estimator():
    est = RttEstimator()
    est.update(20_000)
    assert (est.srtt, est.rttvar) == (20_000, 10_000)
    est.srtt = 100_000
    est.update(60_000)
    assert est.srtt == pytest.approx(95_000)


def test_congestion_avoidance_increase():
    cc = CongestionState()
    mss = cc.mss
    cc.cwnd = 40 * mss
    cc.ssthresh = 20 * mss
    cc.on_packet_acked(mss, sent_at=10)
    assert cc.cwnd == pytest.approx(40 * mss + mss / 40)


def test_slow_start_and_single_reduction_per_recovery():
    cc = CongestionState()
    start = cc.cwnd
    cc.on_packet_acked(1000, sent_at=1)
    assert cc.cwnd == start + 1000
    assert cc.on_congestion_event(newest_lost_sent_at=5, now=100)
    assert cc.cwnd == pytest.approx((start + 1000) / 2)
    assert not cc.on_congestion_event(newest_lost_sent_at=50, now=120)
    cc.on_packet_acked(1000, sent_at=90)  # sent before recovery began: no growth
    assert cc.cwnd == pytest.approx((start + 1000) / 2)


def test_idle_sender_pings_once_then_rearms_on_new_data():
    sim, sender, wire, kpi = make_sender(StaticSplit(0.0), mtu_payload=100)
    sender.send_ping(0)
    sim.run_until(20_000)
    sender.on_ack(((0, 0),))
    assert sender.probe_interval() == 40_000
    sender.send_update(UpdateSpec(0, 20_000, 200))
    assert [p.reliable for p in wire[1:]] == [False, False]
    sim.run_until(40_000)
    assert kpi.pings_sent == 2 and wire[-1].kind is FrameKind.PING and wire[-1].sent_at == 40_000
    sim.run_until(50_000)
    sender.send_update(UpdateSpec(1, 50_000, 100))
    assert kpi.pings_sent == 2  # the ping at 40 ms reset the clock
    sim.run_until(79_999)
    assert kpi.pings_sent == 2
    sim.run_until(80_000)
    assert kpi.pings_sent == 3


def test_pending_data_is_overridden_instead_of_pinging():
    sim, sender, wire, kpi = make_sender(StaticSplit(0.0), mtu_payload=100)
    sender.send_ping(0)
    sim.run_until(20_000)
    sender.on_ack(((0, 0),))
    # queued ahead of the probe timer, so the data is there when the probe falls due
    sim.schedule(40_000, sender.send_update, UpdateSpec(1, 40_000, 100))
    sender.send_update(UpdateSpec(0, 20_000, 100))
    sim.run_until(60_000)
    assert [(p.kind, p.reliable) for p in wire[1:]] == [
        (FrameKind.UNRELIABLE_STREAM, False), (FrameKind.RELIABLE_STREAM, True)]
    assert kpi.probe_overrides == 1 and kpi.pings_sent == 1


# -- receiver -------------------------------------------------------------

def test_in_order_delivery():
    sim, rx, acks, kpi = make_receiver()
    for pn in range(3):
        rx.on_packet(rel(pn, pn))
    assert [u for u, _, _ in rx.delivery_log] == [0, 1, 2]
    assert kpi.backlogged_events == 0 and len(acks) == 3
    assert acks[-1].ack_ranges == ((0, 2),)


def test_gap_is_held():
    sim, rx, acks, kpi = make_receiver()
    rx.on_packet(rel(1, 0))
    rx.on_packet(rel(3, 2))
    assert [u for u, _, _ in rx.delivery_log] == [0]
    assert rx.occupancy() == 1 and kpi.backlogged_events == 1
    rx.on_packet(rel(4, 1))
    assert [u for u, _, _ in rx.delivery_log] == [0, 1, 2]


def test_unreliable_gap_does_not_block():
    sim, rx, acks, kpi = make_receiver()
    rx.on_packet(rel(1, 0, uid=0))
    rx.on_packet(unrel(2, uid=1))
    rx.on_packet(rel(3, 1, uid=2))
    assert [u for u, _, _ in rx.delivery_log] == [0, 1, 2]
    assert kpi.backlogged_events == 0
    assert len(acks) == 2
    assert acks[-1].ack_ranges == ((1, 1), (3, 3))


def test_duplicate_is_reacked_not_redelivered():
    sim, rx, acks, kpi = make_receiver()
    rx.on_packet(rel(0, 0))
    rx.on_packet(rel(0, 0))
    assert len(rx.delivery_log) == 1 and kpi.duplicates == 1 and len(acks) == 2


def test_threshold_flush():
    sim, rx, acks, kpi = make_receiver(n=4)
    rx.on_packet(rel(0, 0))
    rx.on_packet(rel(1, 1))
    for seq in (3, 4, 5):
        rx.on_packet(rel(seq, seq))
    assert rx.occupancy() == 3
    rx.on_packet(rel(7, 7))
    assert rx.occupancy() == 0
    assert rx.next_expected == 8
    assert kpi.buffer_discards == 4
    assert [u for u, _, _ in rx.delivery_log] == [0, 1]
    assert rx.incomplete_updates == {3, 4, 5, 7}
    assert len(rx.aoi) == 2


def test_in_order_traffic_never_flushes():
    sim, rx, acks, kpi = make_receiver(n=64)
    for pn in range(500):
        rx.on_packet(rel(pn, pn))
    assert kpi.buffer_discards == 0 and kpi.backlogged_events == 0


def test_update_completes_only_when_all_fragments_arrive():
    sim, rx, acks, kpi = make_receiver()
    for i in range(3):
        p = rel(i, i, uid=9, count=3)
        p.frag = Fragment(9, 0, i, 3, 70)
        sim.run_until(sim.now + 1)
        rx.on_packet(p)
    assert rx.completed == [9] and rx.aoi.receptions == [(0, 10**6 + 3)]


def test_ack_ranges_are_capped():
    sim, rx, acks, kpi = make_receiver(n=1000)
    for k in range(40):
        rx.on_packet(rel(2 * k, k))
    ranges = acks[-1].ack_ranges
    assert len(ranges) == 32 and ranges[-1] == (78, 78)


@settings(max_examples=150)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=120), st.randoms(use_true_random=False))
def test_ack_ranges_never_name_unreliable_pns(plan, rnd):
    sim, rx, acks, kpi = make_receiver(n=8)
    packets, seq = [], 0
    for pn, (reliable, dropped) in enumerate(plan):
        if reliable:
            pkt, seq = rel(pn, seq), seq + 1
        else:
            pkt = unrel(pn, uid=1000 + pn)
        if not dropped:
            packets.append(pkt)
    rnd.shuffle(packets)
    unreliable = {p.pn for p in packets if not p.reliable} | {pn for pn, (r, _) in enumerate(plan) if not r}
    for p in packets:
        rx.on_packet(p)
    for ack in acks:
        for lo, hi in ack.ack_ranges:
            assert not any(lo <= pn <= hi for pn in unreliable)


@settings(max_examples=100)
@given(st.permutations(list(range(40))))
def test_reliable_stream_delivered_in_order(order):
    sim, rx, acks, kpi = make_receiver(n=64)
    for seq in order:
        rx.on_packet(rel(seq, seq))
    assert [u for u, _, _ in rx.delivery_log] == list(range(40))


# -- end to end -----------------------------------------------------------

LOSSLESS = LinkProfile(1e9, 10_000, 0, RandomLoss(0.0))


class Probe:
    """Taps the forward path and the receiver of a wired connection."""

    def __init__(self):
        self.wire = []
        self.reliable_payloads = set()
        self.unreliable_payloads = []
        self.deliveries = []
        self.conn = None

    def __call__(self, conn):
        self.conn = conn
        conn.receiver.delivery_log = self.deliveries
        forward = conn._forward

        def tap(pkt):
            self.wire.append((conn.sim.now, pkt.pn, pkt.reliable, pkt.kind))
            if pkt.frag is not None:
                key = (pkt.frag.update_id, pkt.frag.index)
                if pkt.reliable:
                    self.reliable_payloads.add(key)
                else:
                    self.unreliable_payloads.append(key)
            forward(pkt)

        conn.sender._emit = tap


def test_all_unreliable_policy_probes_every_two_rtts():
    probe = Probe()
    run_scenario(ScenarioConfig(link=LOSSLESS, policy="static", policy_params={"p_reliable": 0.0},
                                duration_s=3, seed=4), instrument=probe)
    srtt = probe.conn.sender.rtt.srtt
    assert 20_000 <= srtt < 20_500
    eliciting = [t for t, _, reliable, _ in probe.wire if reliable and t < 3_000_000]
    gaps = [b - a for a, b in zip(eliciting, eliciting[1:])]
    assert max(gaps) <= 2 * 20_500
    assert len(probe.unreliable_payloads) > 10 * len(eliciting)


def test_vanilla_never_probes_on_clean_link():
    res = run_scenario(ScenarioConfig(link=LOSSLESS, policy="vanilla", duration_s=3))
    assert res.kpi.probe_overrides == 0 and res.kpi.pings_sent == 0
    assert res.kpi.updates_delivered == res.kpi.updates_generated == 180


def test_lossless_reliable_delivery_is_exact_and_ordered():
    probe = Probe()
    res = run_scenario(ScenarioConfig(link=LOSSLESS, policy="vanilla", duration_s=2), instrument=probe)
    assert probe.conn.receiver.completed == list(range(120))
    assert res.kpi.duplicates == 0 and res.kpi.retransmissions == 0


@pytest.mark.parametrize("policy", ["naive", "split20", "srtt", "loss_aware"])
def test_protocol_invariants_under_loss(policy):
    probe = Probe()
    cfg = ScenarioConfig(link="wifi", loss=burst_preset(0.05), policy=policy, duration_s=3, seed=2, audit=True)
    res = run_scenario(cfg, instrument=probe)
    pns = [pn for _, pn, _, _ in probe.wire]
    assert pns == sorted(set(pns))  # strictly increasing on the wire
    assert len(probe.unreliable_payloads) == len(set(probe.unreliable_payloads))
    assert not probe.reliable_payloads & set(probe.unreliable_payloads)
    reliable_order = [(u, i) for u, i, _ in probe.deliveries if (u, i) in probe.reliable_payloads]
    assert reliable_order == sorted(reliable_order)
    k = res.kpi
    assert k.session_volume == probe.conn.fwd.accepted + probe.conn.rev.accepted
    assert k.drops_reliable >= k.sender_detected_losses - k.spurious_losses


def test_lossless_loss_aware_converges_to_unreliable():
    res = run_scenario(ScenarioConfig(link=LOSSLESS, policy="loss_aware", duration_s=5))
    assert res.reliable_fraction < 0.1
    assert res.kpi.updates_delivered == res.kpi.updates_generated


def test_runs_are_bit_identical_per_seed():
    cfg = ScenarioConfig(link="sub6", policy="naive", duration_s=2, seed=9)
    a, b = run_scenario(cfg, keep_receptions=True), run_scenario(cfg, keep_receptions=True)
    assert a.kpi == b.kpi and a.aoi_receptions == b.aoi_receptions and a.peak_aoi_us == b.peak_aoi_us
