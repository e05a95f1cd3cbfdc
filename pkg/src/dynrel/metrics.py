"""Transport KPIs and time-average peak Age of Information."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class KpiCounters:
    data_packets_sent: int = 0
    reliable_data_sent: int = 0
    retransmissions: int = 0
    acks_sent: int = 0
    pings_sent: int = 0
    ptos: int = 0
    probe_overrides: int = 0
    drops_reliable: int = 0
    drops_unreliable: int = 0
    drops_ack: int = 0
    sender_detected_losses: int = 0
    spurious_losses: int = 0
    duplicates: int = 0
    backlogged_events: int = 0
    buffer_discards: int = 0
    updates_generated: int = 0
    updates_delivered: int = 0
    updates_incomplete: int = 0
    occupancy_samples: list = field(default_factory=list, repr=False)

    @property
    def session_volume(self) -> int:
        return self.data_packets_sent + self.retransmissions + self.acks_sent + self.pings_sent

    @property
    def reliable_fraction(self) -> float:
        if self.data_packets_sent == 0:
            return 0.0
        return self.reliable_data_sent / self.data_packets_sent

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("occupancy_samples")
        return d


class AoiTracker:
    """(generation, reception) pairs of complete updates on the freshness frontier."""

    def __init__(self):
        self.receptions: list[tuple[int, int]] = []
        self.stale = 0

    def record(self, gen_time: int, recv_time: int) -> bool:
        if recv_time < gen_time:
            raise ValueError("reception precedes generation")
        if self.receptions and gen_time <= self.receptions[-1][0]:
            self.stale += 1
            return False
        self.receptions.append((gen_time, recv_time))
        return True

    def __len__(self):
        return len(self.receptions)


def peak_aoi(tracker: AoiTracker | list[tuple[int, int]]) -> float | None:
    """Mean over refreshes of the age just before each refresh, in microseconds.

    The i-th term is r[i+1] - g[i]: the receiver still holds update i when
    update i+1 lands. Returns None with fewer than two receptions.
    """
    rec = tracker.receptions if isinstance(tracker, AoiTracker) else tracker
    n = len(rec)
    if n < 2:
        return None
    total = 0
    for i in range(n - 1):
        total += rec[i + 1][1] - rec[i][0]
    return total / (n - 1)


def normalize(value: float, baseline_mean: float) -> float | None:
    if not baseline_mean:
        return None
    return value / baseline_mean
