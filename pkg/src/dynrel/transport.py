"""Sender and receiver endpoints of the partially reliable transport.

Reliable and unreliable packets share one packet-number space. Unreliable
packets are never acknowledged and never retransmitted; they are paced from
the congestion window instead of occupying it. Reliable packets carry a
dense reliable-stream sequence number so the receiver can tell a gap left by
an unreliable packet from a gap left by a lost reliable one.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .metrics import AoiTracker, KpiCounters
from .policy import RELIABLE, LossStats, Policy, PolicyContext, RttSnapshot
from .sim import SimulationError, Simulator
from .workload import Fragment, UpdateSpec, fragment

MTU_PAYLOAD = 1200
HEADER_BYTES = 30
MAX_PACKET = MTU_PAYLOAD + HEADER_BYTES
CONTROL_PACKET = 40
INITIAL_RTT_US = 333_000
INITIAL_CWND = 10 * MAX_PACKET
PACKET_THRESHOLD = 3
TIME_THRESHOLD = 9 / 8
GRANULARITY_US = 1_000
MIN_PROBE_INTERVAL_US = 10_000
MAX_ACK_RANGES = 32
DEFAULT_BUFFER_THRESHOLD = 64


class ProtocolViolation(SimulationError):
    pass


class FrameKind(enum.Enum):
    RELIABLE_STREAM = "reliable_stream"
    UNRELIABLE_STREAM = "unreliable_stream"
    ACK = "ack"
    PING = "ping"


@dataclass(slots=True)
class Packet:
    pn: int
    kind: FrameKind
    reliable: bool
    size_bytes: int
    sent_at: int = 0
    frag: Fragment | None = None
    stream_seq: int = -1
    retx_of: int | None = None
    ack_ranges: tuple = ()

    @property
    def update_id(self) -> int | None:
        return self.frag.update_id if self.frag else None


@dataclass(slots=True)
class SentRecord:
    pn: int
    kind: FrameKind
    size: int
    sent_at: int
    order: int  # position among reliable sends; drives the packet-threshold rule
    frag: Fragment | None = None
    stream_seq: int = -1
    retx_of: int | None = None
    acked: bool = False
    declared_lost: bool = False
    reliable: bool = True
    # unreliable bytes sent between the previous reliable packet and this one
    unreliable_credit: int = 0


class RttEstimator:
    def __init__(self, initial_rtt: int = INITIAL_RTT_US):
        self.latest_rtt = 0
        self.srtt = initial_rtt
        self.rttvar = initial_rtt // 2
        self.min_rtt = 0
        self.has_sample = False

    def update(self, sample: int) -> None:
        sample = max(int(sample), 1)
        self.latest_rtt = sample
        if not self.has_sample:
            self.has_sample = True
            self.min_rtt = sample
            self.srtt = sample
            self.rttvar = sample / 2
            return
        self.min_rtt = min(self.min_rtt, sample)
        self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
        self.srtt = 0.875 * self.srtt + 0.125 * sample

    def snapshot(self) -> RttSnapshot:
        return RttSnapshot(self.latest_rtt, self.srtt, self.rttvar, self.min_rtt, self.has_sample)


SLOW_START = "slow_start"
AVOIDANCE = "avoidance"


class CongestionState:
    """NewReno window plus a token bucket that paces unreliable bytes."""

    def __init__(self, mss: int = MAX_PACKET, initial_cwnd: int = INITIAL_CWND):
        self.mss = mss
        self.cwnd = float(initial_cwnd)
        self.ssthresh = math.inf
        self.bytes_in_flight = 0
        self.phase = SLOW_START
        self.recovery_start = -1
        self.pacing_debt = self.cwnd / 4  # tokens available to unreliable sends
        self._last_refill = 0

    def can_send_reliable(self) -> bool:
        return self.bytes_in_flight < self.cwnd

    def on_packet_acked(self, size: int, sent_at: int) -> None:
        if sent_at <= self.recovery_start:
            return
        if self.cwnd < self.ssthresh:
            self.phase = SLOW_START
            self.cwnd += size
        else:
            self.phase = AVOIDANCE
            self.cwnd += self.mss * size / self.cwnd

    def on_congestion_event(self, newest_lost_sent_at: int, now: int) -> bool:
        """Halve the window at most once per recovery period; True if it reacted."""
        if newest_lost_sent_at <= self.recovery_start:
            return False
        self.recovery_start = now
        self.ssthresh = max(self.cwnd / 2, self.mss)
        self.cwnd = self.ssthresh
        self.phase = AVOIDANCE
        return True

    def pacing_rate(self, srtt: float) -> float:
        """Bytes per microsecond."""
        return self.cwnd / max(srtt, 1.0)

    def refill(self, now: int, srtt: float) -> None:
        if now > self._last_refill:
            cap = self.cwnd / 4
            self.pacing_debt = min(cap, self.pacing_debt + (now - self._last_refill) * self.pacing_rate(srtt))
            self._last_refill = now


class _Pending:
    __slots__ = ("frag", "reliable")

    def __init__(self, frag: Fragment):
        self.frag = frag
        self.reliable: bool | None = None


class Sender:
    """Client endpoint: fragments updates, applies the policy, recovers reliable losses."""

    def __init__(self, sim: Simulator, emit: Callable[[Packet], None], policy: Policy,
                 kpi: KpiCounters, *, mtu_payload: int = MTU_PAYLOAD, audit: bool = False):
        self.sim = sim
        self._emit = emit
        self.policy = policy
        self.kpi = kpi
        self.mtu_payload = mtu_payload
        self.audit = audit
        self.rtt = RttEstimator()
        self.cc = CongestionState()
        self.stats = LossStats()
        if hasattr(policy, "alpha"):
            self.stats.alpha = policy.alpha
        if hasattr(policy, "rt"):
            self.stats.rt_threshold = policy.rt
        if hasattr(policy, "initial_omega"):
            self.stats.omega = policy.initial_omega
        self._policy_rng = sim.stream("policy")

        self.next_pn = 0
        self._next_stream_seq = 0
        self._rel_order = 0
        self._pending: deque[_Pending] = deque()
        self._retx: deque[SentRecord] = deque()
        self._outstanding: dict[int, SentRecord] = {}
        self._lost: dict[int, SentRecord] = {}
        self._unreliable_bytes_pending = 0
        self._unreliable_pns: list[int] = []
        self._unreliable_payloads: set[tuple[int, int]] = set()
        self.largest_acked = -1
        self._largest_acked_order = -1
        self.pto_count = 0

        self.last_ack_eliciting_at: int | None = None
        self._unreliable_since_probe = False
        self._send_timer = None
        self._loss_timer = None
        self._probe_timer = None
        self.wire_log: list[int] | None = None

    # ------------------------------------------------------------------ sending

    def send_update(self, update: UpdateSpec) -> None:
        for frag in fragment(update, self.mtu_payload):
            self._pending.append(_Pending(frag))
        self._try_send()

    def has_pending(self) -> bool:
        return bool(self._pending or self._retx)

    def probe_interval(self) -> int:
        return max(int(2 * self.rtt.srtt), MIN_PROBE_INTERVAL_US)

    def probe_due(self, now: int) -> bool:
        """Path feedback counts as stale once unreliable data has gone out and no
        ACK-eliciting packet followed within the probe interval."""
        if self.last_ack_eliciting_at is None:
            return True
        return self._unreliable_since_probe and now - self.last_ack_eliciting_at >= self.probe_interval()

    def _verdict(self, now: int) -> bool:
        ctx = PolicyContext(self.rtt.snapshot(), self.stats, self._policy_rng.uniform(), now)
        reliable = self.policy.decide(ctx) is RELIABLE
        if not reliable and self.probe_due(now):
            self.kpi.probe_overrides += 1
            reliable = True
        return reliable

    def _try_send(self) -> None:
        sim = self.sim
        now = sim.now
        cc = self.cc
        while True:
            if self._retx:
                if not cc.can_send_reliable():
                    break
                self._send_retransmission(self._retx.popleft(), now)
                continue
            if not self._pending:
                break
            item = self._pending[0]
            if item.reliable is None:
                item.reliable = self._verdict(now)
            if item.reliable:
                if not cc.can_send_reliable():
                    break
                self._pending.popleft()
                self._send_reliable_data(item.frag, now)
            else:
                size = item.frag.size_bytes + HEADER_BYTES
                cc.refill(now, self.rtt.srtt)
                if cc.pacing_debt < size:
                    wait = math.ceil((size - cc.pacing_debt) / cc.pacing_rate(self.rtt.srtt))
                    self._arm_send_timer(now + max(wait, 1))
                    break
                cc.pacing_debt -= size
                self._pending.popleft()
                self._send_unreliable(item.frag, now)
        self._arm_loss_timer()
        self._arm_probe_timer()
        if self.audit:
            self.check_invariants()

    def _arm_send_timer(self, t: int) -> None:
        ev = self._send_timer
        if ev is not None and not ev.cancelled and ev.fire_at <= t:
            return
        if ev is not None:
            ev.cancel()
        self._send_timer = self.sim.schedule(t, self._on_send_timer)

    def _on_send_timer(self) -> None:
        self._send_timer = None
        self._try_send()

    def _new_pn(self) -> int:
        pn = self.next_pn
        self.next_pn += 1
        return pn

    def _record_reliable(self, pkt: Packet, now: int) -> None:
        rec = SentRecord(pkt.pn, pkt.kind, pkt.size_bytes, now, self._rel_order, pkt.frag,
                         pkt.stream_seq, pkt.retx_of)
        rec.unreliable_credit = self._unreliable_bytes_pending
        self._unreliable_bytes_pending = 0
        self._rel_order += 1
        self._outstanding[pkt.pn] = rec
        self.cc.bytes_in_flight += pkt.size_bytes
        self.stats.packets_sent_total += 1
        self.last_ack_eliciting_at = now
        self._unreliable_since_probe = False

    def _transmit(self, pkt: Packet) -> None:
        if self.wire_log is not None:
            self.wire_log.append(pkt.pn)
        self._emit(pkt)

    def _send_reliable_data(self, frag: Fragment, now: int) -> None:
        seq = self._next_stream_seq
        self._next_stream_seq += 1
        pkt = Packet(self._new_pn(), FrameKind.RELIABLE_STREAM, True, frag.size_bytes + HEADER_BYTES,
                     now, frag, seq)
        self._record_reliable(pkt, now)
        self.kpi.data_packets_sent += 1
        self.kpi.reliable_data_sent += 1
        self._transmit(pkt)

    def _send_unreliable(self, frag: Fragment, now: int) -> None:
        key = (frag.update_id, frag.index)
        if key in self._unreliable_payloads:
            raise ProtocolViolation(f"unreliable payload {key} sent twice")
        self._unreliable_payloads.add(key)
        pkt = Packet(self._new_pn(), FrameKind.UNRELIABLE_STREAM, False,
                     frag.size_bytes + HEADER_BYTES, now, frag)
        self._unreliable_pns.append(pkt.pn)
        self._unreliable_bytes_pending += pkt.size_bytes
        self.stats.packets_sent_total += 1
        self.stats.packets_sent_unreliable += 1
        self.kpi.data_packets_sent += 1
        self._unreliable_since_probe = True
        self._transmit(pkt)

    def _send_retransmission(self, rec: SentRecord, now: int) -> None:
        if not rec.reliable or rec.kind is not FrameKind.RELIABLE_STREAM:
            raise ProtocolViolation(f"retransmission of non-retransmittable pn {rec.pn}")
        pkt = Packet(self._new_pn(), FrameKind.RELIABLE_STREAM, True, rec.size, now, rec.frag,
                     rec.stream_seq, rec.retx_of if rec.retx_of is not None else rec.pn)
        self._record_reliable(pkt, now)
        self.kpi.retransmissions += 1
        self._transmit(pkt)

    def send_ping(self, now: int) -> None:
        pkt = Packet(self._new_pn(), FrameKind.PING, True, CONTROL_PACKET, now)
        self._record_reliable(pkt, now)
        self.kpi.pings_sent += 1
        self._transmit(pkt)

    # ---------------------------------------------------------------- probing

    def _arm_probe_timer(self) -> None:
        # nothing can go stale until unreliable data has been sent
        if self.last_ack_eliciting_at is None or not self._unreliable_since_probe:
            return
        now = self.sim.now
        t = self.last_ack_eliciting_at + self.probe_interval()
        if t <= now:
            # already due but blocked (e.g. head packet waiting on pacing): check again later
            t = now + self.probe_interval()
        ev = self._probe_timer
        if ev is not None and not ev.cancelled:
            if ev.fire_at <= t:
                return
            ev.cancel()
        self._probe_timer = self.sim.schedule(t, self._on_probe_timer)

    def _on_probe_timer(self) -> None:
        self._probe_timer = None
        self.maybe_probe(self.sim.now)
        self._arm_probe_timer()

    def maybe_probe(self, now: int) -> str | None:
        """Returns "override" when pending data will be forced reliable, "ping" when a Ping went out."""
        if not self.probe_due(now):
            return None
        if self.has_pending():
            # the next verdict is taken at send time and will see probe_due()
            self._try_send()
            return "override"
        self.send_ping(now)
        self._arm_loss_timer()
        return "ping"

    # ------------------------------------------------------------ ack handling

    def on_ack(self, ranges: tuple, now: int | None = None) -> list[int]:
        """Process an ACK frame; returns the reliable pns newly declared lost."""
        if now is None:
            now = self.sim.now
        ur = self._unreliable_pns
        for lo, hi in ranges:
            i = bisect_left(ur, lo)
            if i < len(ur) and ur[i] <= hi:
                raise ProtocolViolation(f"ACK range [{lo}, {hi}] names unreliable pn {ur[i]}")
        los = [r[0] for r in ranges]
        newly: list[SentRecord] = []
        for pn, rec in self._outstanding.items():
            j = bisect_right(los, pn) - 1
            if j >= 0 and pn <= ranges[j][1]:
                newly.append(rec)
        if self._lost:
            for pn in list(self._lost):
                j = bisect_right(los, pn) - 1
                if j >= 0 and pn <= ranges[j][1]:
                    self._lost.pop(pn)
                    self.kpi.spurious_losses += 1
        if newly:
            largest = newly[-1]
            if largest.pn > self.largest_acked:
                self.largest_acked = largest.pn
                self._largest_acked_order = largest.order
                self.rtt.update(now - largest.sent_at)
            self.pto_count = 0
            cc = self.cc
            for rec in newly:
                del self._outstanding[rec.pn]
                rec.acked = True
                cc.bytes_in_flight -= rec.size
                # the ACK also vouches for the unreliable packets sent just before it
                cc.on_packet_acked(rec.size + rec.unreliable_credit, rec.sent_at)
            self.stats.reliable_acked += len(newly)
        self.stats.on_ack()
        lost = self.detect_losses(now)
        self._try_send()
        return lost

    def _loss_delay(self) -> float:
        rtt = self.rtt
        base = max(rtt.srtt, rtt.latest_rtt) if rtt.has_sample else rtt.srtt
        return max(TIME_THRESHOLD * base, GRANULARITY_US)

    def detect_losses(self, now: int) -> list[int]:
        """Declare lost the outstanding reliable packets sent before the largest
        acknowledged one that trail it by PACKET_THRESHOLD reliable sends or
        are older than the time threshold."""
        loss_delay = self._loss_delay()
        lost: list[SentRecord] = []
        largest = self.largest_acked
        largest_order = self._largest_acked_order
        for pn, rec in self._outstanding.items():
            if pn >= largest:
                break
            if largest_order - rec.order >= PACKET_THRESHOLD or now - rec.sent_at > loss_delay:
                lost.append(rec)
        if not lost:
            return []
        cc = self.cc
        for rec in lost:
            del self._outstanding[rec.pn]
            rec.declared_lost = True
            cc.bytes_in_flight -= rec.size
            self._lost[rec.pn] = rec
            self.kpi.sender_detected_losses += 1
            if rec.kind is FrameKind.RELIABLE_STREAM:
                self._retx.append(rec)
        cc.on_congestion_event(lost[-1].sent_at, now)
        return [r.pn for r in lost]

    def _loss_deadline(self) -> tuple[int, bool] | None:
        """(time, is_pto) for the next loss-detection timer, or None when nothing is outstanding."""
        if not self._outstanding:
            return None
        first_pn, first = next(iter(self._outstanding.items()))
        if first_pn < self.largest_acked:
            return first.sent_at + math.ceil(self._loss_delay()) + 1, False
        rtt = self.rtt
        pto = (rtt.srtt + max(4 * rtt.rttvar, GRANULARITY_US)) * (2 ** self.pto_count)
        return self.last_ack_eliciting_at + math.ceil(pto), True

    def _arm_loss_timer(self) -> None:
        deadline = self._loss_deadline()
        ev = self._loss_timer
        t = None if deadline is None else max(deadline[0], self.sim.now)
        if ev is not None and not ev.cancelled:
            if ev.fire_at == t:
                return
            ev.cancel()
        self._loss_timer = None
        if t is not None:
            self._loss_timer = self.sim.schedule(t, self._on_loss_timer, deadline[1])

    def _on_loss_timer(self, is_pto: bool) -> None:
        self._loss_timer = None
        now = self.sim.now
        if is_pto:
            self.pto_count += 1
            self.kpi.ptos += 1
            self.send_ping(now)
        else:
            self.detect_losses(now)
        self._try_send()

    # ------------------------------------------------------------- auditing

    def check_invariants(self) -> None:
        total = sum(r.size for r in self._outstanding.values())
        if total != self.cc.bytes_in_flight:
            raise SimulationError(
                f"bytes_in_flight {self.cc.bytes_in_flight} != outstanding reliable bytes {total}"
            )
        if self.cc.bytes_in_flight < 0:
            raise SimulationError("negative bytes_in_flight")


class Receiver:
    """Server endpoint: immediate ACKs, in-order reliable delivery, occupancy-driven discard."""

    def __init__(self, sim: Simulator, emit_ack: Callable[[Packet], None], kpi: KpiCounters,
                 aoi: AoiTracker, *, buffer_threshold: int = DEFAULT_BUFFER_THRESHOLD):
        if buffer_threshold < 1:
            raise ValueError("buffer_threshold must be >= 1")
        self.sim = sim
        self._emit_ack = emit_ack
        self.kpi = kpi
        self.aoi = aoi
        self.buffer_threshold = buffer_threshold
        self.next_expected = 0
        self.held: dict[int, Packet] = {}
        self._ranges: list[list[int]] = []
        self._seen_unreliable: set[int] = set()
        self._next_ack_pn = 0
        self._frags_delivered: dict[int, int] = {}
        self.incomplete_updates: set[int] = set()
        self.delivery_log: list[tuple[int, int, int]] | None = None
        self.completed: list[int] = []

    # ACK ranges are maximal runs of consecutive reliable pns received.
    def _note_reliable_pn(self, pn: int) -> bool:
        ranges = self._ranges
        if ranges and pn > ranges[-1][1]:
            if pn == ranges[-1][1] + 1:
                ranges[-1][1] = pn
            else:
                ranges.append([pn, pn])
            return True
        if not ranges:
            ranges.append([pn, pn])
            return True
        i = bisect_right([r[0] for r in ranges], pn) - 1
        if i >= 0 and ranges[i][0] <= pn <= ranges[i][1]:
            return False
        ranges.insert(i + 1, [pn, pn])
        # merge neighbours
        j = i + 1
        if j + 1 < len(ranges) and ranges[j][1] + 1 == ranges[j + 1][0]:
            ranges[j][1] = ranges[j + 1][1]
            del ranges[j + 1]
        if j > 0 and ranges[j - 1][1] + 1 == ranges[j][0]:
            ranges[j - 1][1] = ranges[j][1]
            del ranges[j]
        return True

    def ack_ranges(self) -> tuple:
        return tuple((lo, hi) for lo, hi in self._ranges[-MAX_ACK_RANGES:])

    def on_packet(self, pkt: Packet) -> None:
        now = self.sim.now
        kind = pkt.kind
        if kind is FrameKind.UNRELIABLE_STREAM:
            if pkt.pn in self._seen_unreliable:
                self.kpi.duplicates += 1
                return
            self._seen_unreliable.add(pkt.pn)
            self._deliver(pkt.frag, now)
            return
        if kind is FrameKind.ACK:
            raise ProtocolViolation("receiver got an ACK frame")
        fresh = self._note_reliable_pn(pkt.pn)
        if not fresh:
            self.kpi.duplicates += 1
        elif kind is FrameKind.RELIABLE_STREAM:
            self._on_stream_packet(pkt, now)
        self._send_ack(now)

    def _on_stream_packet(self, pkt: Packet, now: int) -> None:
        s = pkt.stream_seq
        if s < self.next_expected or s in self.held:
            self.kpi.duplicates += 1
            return
        if s == self.next_expected:
            self._deliver(pkt.frag, now)
            self.next_expected += 1
            held = self.held
            while self.next_expected in held:
                self._deliver(held.pop(self.next_expected).frag, now)
                self.next_expected += 1
            return
        self.held[s] = pkt
        self.kpi.backlogged_events += 1
        self.flush_on_threshold()

    def flush_on_threshold(self) -> int:
        if len(self.held) < self.buffer_threshold:
            return 0
        n = len(self.held)
        for p in self.held.values():
            self.incomplete_updates.add(p.frag.update_id)
        self.next_expected = max(self.held) + 1
        self.held.clear()
        self.kpi.buffer_discards += n
        return n

    def occupancy(self) -> int:
        return len(self.held)

    def _deliver(self, frag: Fragment, now: int) -> None:
        uid = frag.update_id
        if self.delivery_log is not None:
            self.delivery_log.append((uid, frag.index, now))
        got = self._frags_delivered.get(uid, 0) + 1
        if got == frag.count:
            self._frags_delivered.pop(uid, None)
            if uid in self.incomplete_updates:
                return
            self.kpi.updates_delivered += 1
            self.completed.append(uid)
            self.aoi.record(frag.gen_time, now)
        else:
            self._frags_delivered[uid] = got

    def _send_ack(self, now: int) -> None:
        pkt = Packet(self._next_ack_pn, FrameKind.ACK, False, CONTROL_PACKET, now,
                     ack_ranges=self.ack_ranges())
        self._next_ack_pn += 1
        self.kpi.acks_sent += 1
        self._emit_ack(pkt)
