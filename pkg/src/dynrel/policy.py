"""Per-packet reliability policies.

A policy sees a read-only snapshot of the sender's RTT estimator and loss
counters plus one uniform draw, and returns RELIABLE or UNRELIABLE.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Verdict(enum.Enum):
    RELIABLE = "reliable"
    UNRELIABLE = "unreliable"


RELIABLE = Verdict.RELIABLE
UNRELIABLE = Verdict.UNRELIABLE


@dataclass(frozen=True, slots=True)
class RttSnapshot:
    latest_rtt: int
    srtt: int
    rttvar: int
    min_rtt: int
    has_sample: bool


@dataclass
class LossStats:
    """Cumulative session counters and the smoothed loss estimate."""

    packets_sent_total: int = 0
    packets_sent_unreliable: int = 0
    reliable_acked: int = 0
    omega: float = 0.0
    alpha: float = 0.8
    rt_threshold: float = 0.05
    last_lambda: float = 0.0

    def snapshot(self) -> "LossStats":
        return LossStats(self.packets_sent_total, self.packets_sent_unreliable, self.reliable_acked,
                         self.omega, self.alpha, self.rt_threshold, self.last_lambda)

    def on_ack(self) -> float:
        """Recompute the loss fraction and fold it into omega; returns the new omega."""
        lam = loss_estimate(self)
        self.omega = ewma_update(self.omega, lam, self.alpha)
        self.last_lambda = lam
        return self.omega


@dataclass(frozen=True, slots=True)
class PolicyContext:
    rtt: RttSnapshot
    loss_stats: LossStats
    u: float
    now: int


def decide_static(p_reliable: float, u: float) -> Verdict:
    if not 0.0 <= p_reliable <= 1.0:
        raise ValueError(f"p_reliable must be in [0, 1], got {p_reliable}")
    return RELIABLE if u < p_reliable else UNRELIABLE


def decide_srtt(ctx: PolicyContext) -> Verdict:
    rtt = ctx.rtt
    if rtt.has_sample and rtt.latest_rtt < rtt.srtt:
        return UNRELIABLE
    return RELIABLE


def loss_estimate(stats: LossStats) -> float:
    """Fraction of reliably sent packets that have not been acknowledged."""
    reliable_sent = stats.packets_sent_total - stats.packets_sent_unreliable
    if reliable_sent <= 0:
        return 0.0
    return 1.0 - stats.reliable_acked / reliable_sent


def ewma_update(omega_prev: float, lambda_prev: float, alpha: float) -> float:
    return alpha * lambda_prev + (1.0 - alpha) * omega_prev


def decide_loss_aware(ctx: PolicyContext) -> Verdict:
    stats = ctx.loss_stats
    return UNRELIABLE if stats.omega <= stats.rt_threshold else RELIABLE


class Policy:
    name = "policy"

    def decide(self, ctx: PolicyContext) -> Verdict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class AlwaysReliable(Policy):
    """Vanilla baseline: every packet is ACK-eliciting."""

    name = "vanilla"

    def decide(self, ctx):
        return RELIABLE


class StaticSplit(Policy):
    def __init__(self, p_reliable: float, name: str | None = None):
        if not 0.0 <= p_reliable <= 1.0:
            raise ValueError(f"p_reliable must be in [0, 1], got {p_reliable}")
        self.p_reliable = p_reliable
        if name:
            self.name = name
        else:
            self.name = f"split{round(p_reliable * 100)}"

    def decide(self, ctx):
        return decide_static(self.p_reliable, ctx.u)

    def __repr__(self):
        return f"StaticSplit(p_reliable={self.p_reliable})"


class SrttPolicy(Policy):
    name = "srtt"

    def decide(self, ctx):
        return decide_srtt(ctx)


class LossAwarePolicy(Policy):
    """Unreliable while the smoothed loss estimate stays at or under the real-time bound."""

    name = "loss_aware"

    def __init__(self, alpha: float = 0.8, rt: float = 0.05, initial_omega: float = 1.0):
        if not 0.0 <= initial_omega <= 1.0:
            raise ValueError(f"initial_omega must be in [0, 1], got {initial_omega}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        if not 0.0 <= rt <= 1.0:
            raise ValueError(f"rt must be in [0, 1], got {rt}")
        self.alpha = alpha
        self.rt = rt
        # no measurements yet: assume the worst until ACKs say otherwise
        self.initial_omega = initial_omega

    def decide(self, ctx):
        return decide_loss_aware(ctx)

    def __repr__(self):
        return f"LossAwarePolicy(alpha={self.alpha}, rt={self.rt}, initial_omega={self.initial_omega})"


POLICY_NAMES = ("vanilla", "naive", "split80", "split20", "srtt", "loss_aware")
_STATIC = {"naive": 0.5, "split80": 0.8, "split20": 0.2}


def make_policy(name: str, **params) -> Policy:
    """Build a policy by config name. Accepted overrides: p_reliable, alpha, rt, initial_omega."""
    allowed = {"vanilla": set(), "srtt": set(), "loss_aware": {"alpha", "rt", "initial_omega"},
               "naive": {"p_reliable"}, "split80": {"p_reliable"}, "split20": {"p_reliable"},
               "static": {"p_reliable"}}
    if name not in allowed:
        raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
    extra = set(params) - allowed[name]
    if extra:
        raise ValueError(f"policy {name!r} does not take parameter(s) {sorted(extra)}")
    if name == "vanilla":
        return AlwaysReliable()
    if name == "srtt":
        return SrttPolicy()
    if name == "loss_aware":
        return LossAwarePolicy(**params)
    if name == "static":
        return StaticSplit(params["p_reliable"])
    return StaticSplit(params.get("p_reliable", _STATIC[name]), name=name)
