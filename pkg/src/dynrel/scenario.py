"""One experiment run: workload -> sender -> forward link -> receiver -> reverse link."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .channel import Link, LinkProfile, LossModel, loss_label, preset
from .metrics import AoiTracker, KpiCounters, peak_aoi
from .policy import make_policy
from .sim import US_PER_MS, US_PER_S, SimulationError, Simulator
from .transport import DEFAULT_BUFFER_THRESHOLD, MTU_PAYLOAD, Packet, Receiver, Sender
from .workload import SourceModel, VideoSource

OCCUPANCY_SAMPLE_US = 10 * US_PER_MS


@dataclass
class ScenarioConfig:
    link: str | LinkProfile = "wifi"
    loss: LossModel | None = None  # None keeps the profile's own loss
    policy: str = "vanilla"
    policy_params: dict = field(default_factory=dict)
    duration_s: float = 10.0
    seed: int = 0
    buffer_threshold: int = DEFAULT_BUFFER_THRESHOLD
    fps: float = 60.0
    mean_size_bytes: int = 16_667
    size_jitter_fraction: float = 0.2
    mtu_payload: int = MTU_PAYLOAD
    drain_s: float = 1.0
    link_name: str | None = None
    scenario_id: str = ""
    audit: bool = False

    def profile(self) -> LinkProfile:
        prof = preset(self.link) if isinstance(self.link, str) else self.link
        if self.loss is not None:
            prof = prof.with_loss(self.loss)
        return prof

    @property
    def link_label(self) -> str:
        if self.link_name:
            return self.link_name
        return self.link if isinstance(self.link, str) else "custom"


@dataclass
class RunResult:
    scenario_id: str
    policy: str
    link: str
    loss_kind: str
    loss_param: float
    seed: int
    duration_s: float
    kpi: KpiCounters
    peak_aoi_us: float | None
    reliable_fraction: float
    wall_time: float
    mean_occupancy: float = 0.0
    max_occupancy: int = 0
    aoi_receptions: list = field(default_factory=list, repr=False)

    @property
    def session_volume(self) -> int:
        return self.kpi.session_volume


class Connection:
    """Wires one sender/receiver pair over a forward and a reverse link."""

    def __init__(self, sim: Simulator, cfg: ScenarioConfig, kpi: KpiCounters, aoi: AoiTracker):
        prof = cfg.profile()
        self.sim = sim
        self.kpi = kpi
        self.fwd = Link(prof, sim.stream("loss:fwd"), sim.stream("delay:fwd"))
        self.rev = Link(prof, sim.stream("loss:rev"), sim.stream("delay:rev"))
        policy = make_policy(cfg.policy, **cfg.policy_params)
        self.sender = Sender(sim, self._forward, policy, kpi, mtu_payload=cfg.mtu_payload,
                             audit=cfg.audit)
        self.receiver = Receiver(sim, self._reverse, kpi, aoi, buffer_threshold=cfg.buffer_threshold)

    def _forward(self, pkt: Packet) -> None:
        arrival = self.fwd.transit(pkt.size_bytes, self.sim.now)
        if arrival is None:
            if pkt.reliable:
                self.kpi.drops_reliable += 1
            else:
                self.kpi.drops_unreliable += 1
            return
        self.sim.schedule(arrival, self.receiver.on_packet, pkt)

    def _reverse(self, pkt: Packet) -> None:
        arrival = self.rev.transit(pkt.size_bytes, self.sim.now)
        if arrival is None:
            self.kpi.drops_ack += 1
            return
        self.sim.schedule(arrival, self.sender.on_ack, pkt.ack_ranges)


def run_scenario(cfg: ScenarioConfig, *, keep_receptions: bool = False,
                 instrument: Callable[[Connection], None] | None = None) -> RunResult:
    """Run one session. ``instrument`` sees the wired connection before the clock starts."""
    t0 = time.perf_counter()
    sim = Simulator(seed=cfg.seed)
    kpi = KpiCounters()
    aoi = AoiTracker()
    conn = Connection(sim, cfg, kpi, aoi)
    if instrument is not None:
        instrument(conn)
    duration = round(cfg.duration_s * US_PER_S)
    source = VideoSource(
        SourceModel(cfg.fps, cfg.mean_size_bytes, cfg.size_jitter_fraction, duration),
        sim.stream("workload"),
    )

    def generate():
        update = source.next_update()
        kpi.updates_generated += 1
        conn.sender.send_update(update)
        if not source.exhausted():
            sim.schedule(source.peek_time(), generate)

    occupancy = kpi.occupancy_samples

    def sample():
        occupancy.append(conn.receiver.occupancy())
        if sim.now + OCCUPANCY_SAMPLE_US <= duration:
            sim.schedule_in(OCCUPANCY_SAMPLE_US, sample)

    if not source.exhausted():
        sim.schedule(source.peek_time(), generate)
    sim.schedule(0, sample)
    sim.run_until(duration + round(cfg.drain_s * US_PER_S))

    kpi.updates_incomplete = kpi.updates_generated - kpi.updates_delivered
    accepted = conn.fwd.accepted + conn.rev.accepted
    if kpi.session_volume != accepted:
        raise SimulationError(
            f"packet conservation broken: session volume {kpi.session_volume} != channel accepted {accepted}"
        )
    kind, param = loss_label(conn.fwd.profile.loss)
    return RunResult(
        scenario_id=cfg.scenario_id,
        policy=cfg.policy,
        link=cfg.link_label,
        loss_kind=kind,
        loss_param=param,
        seed=cfg.seed,
        duration_s=cfg.duration_s,
        kpi=kpi,
        peak_aoi_us=peak_aoi(aoi),
        reliable_fraction=kpi.reliable_fraction,
        wall_time=time.perf_counter() - t0,
        mean_occupancy=sum(occupancy) / len(occupancy) if occupancy else 0.0,
        max_occupancy=max(occupancy, default=0),
        aoi_receptions=list(aoi.receptions) if keep_receptions else [],
    )
