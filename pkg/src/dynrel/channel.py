"""One-directional link: FIFO serialization, truncated-normal delay, random or bursty loss."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from .sim import RngStream

GOOD = 0
BAD = 1


@dataclass(frozen=True)
class RandomLoss:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability must be in [0, 1], got {self.p}")

    @property
    def mean_loss(self) -> float:
        return self.p


@dataclass
class GilbertElliott:
    """Two-state Markov loss process; the state is advanced once per packet."""

    p_gb: float
    p_bg: float
    loss_good: float = 0.0
    loss_bad: float = 0.5
    state: int = GOOD

    def __post_init__(self):
        for name in ("p_gb", "p_bg", "loss_good", "loss_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def mean_loss(self) -> float:
        return stationary_loss(self)


LossModel = Union[RandomLoss, GilbertElliott]


def stationary_loss(ge: GilbertElliott) -> float:
    """Long-run drop probability of an ergodic Gilbert-Elliott chain."""
    denom = ge.p_gb + ge.p_bg
    if denom <= 0.0:
        raise ValueError("non-ergodic Gilbert-Elliott chain: p_gb = p_bg = 0")
    pi_bad = ge.p_gb / denom
    return pi_bad * ge.loss_bad + (1.0 - pi_bad) * ge.loss_good


def ge_step(ge: GilbertElliott, u_transition: float, u_loss: float) -> tuple[int, bool]:
    """Advance ``ge`` one packet; returns (new_state, dropped)."""
    if ge.state == GOOD:
        if u_transition < ge.p_gb:
            ge.state = BAD
    elif u_transition < ge.p_bg:
        ge.state = GOOD
    p = ge.loss_bad if ge.state == BAD else ge.loss_good
    return ge.state, u_loss < p


def burst_preset(target_loss: float, p_bg: float = 0.5, loss_good: float = 0.0,
                 loss_bad: float = 0.5) -> GilbertElliott:
    """GE chain whose stationary loss equals ``target_loss``, solved for p_gb."""
    if not loss_good <= target_loss < loss_bad:
        raise ValueError(
            f"target loss {target_loss} unreachable with loss_good={loss_good}, loss_bad={loss_bad}"
        )
    # pi_bad = (target - lg) / (lb - lg); p_gb = p_bg * pi_bad / (1 - pi_bad)
    pi_bad = (target_loss - loss_good) / (loss_bad - loss_good)
    p_gb = p_bg * pi_bad / (1.0 - pi_bad)
    if p_gb > 1.0:
        raise ValueError(f"target loss {target_loss} needs p_gb={p_gb:.3f} > 1")
    return GilbertElliott(p_gb=p_gb, p_bg=p_bg, loss_good=loss_good, loss_bad=loss_bad)


@dataclass(frozen=True)
class LinkProfile:
    capacity_bps: float
    base_delay_us: float
    jitter_std_us: float
    loss: LossModel = field(default_factory=lambda: RandomLoss(0.0))

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError("capacity_bps must be > 0")
        if self.base_delay_us < 0 or self.jitter_std_us < 0:
            raise ValueError("delay and jitter must be >= 0")

    def with_loss(self, loss: LossModel) -> "LinkProfile":
        return replace(self, loss=loss)


# Capacity, one-way delay mean and std dev (Normal, truncated at 0), random loss.
PRESETS: dict[str, LinkProfile] = {
    "sub6": LinkProfile(1100e6, 27_400, 6_400, RandomLoss(0.001)),
    "wifi": LinkProfile(30e6, 20_000, 10_000, RandomLoss(0.007)),
    "mmwave": LinkProfile(2500e6, 2_000, 1_000, RandomLoss(0.001)),
}


def preset(name: str) -> LinkProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown link preset {name!r}; expected one of {sorted(PRESETS)}") from None


class Link:
    """A directional link instance owned by one simulation run.

    ``transit`` returns the arrival time in microseconds, or None when the
    loss process drops the packet. Dropped packets still occupy the
    transmitter for their serialization time.
    """

    def __init__(self, profile: LinkProfile, loss_rng: RngStream, delay_rng: RngStream):
        self.profile = profile
        loss = profile.loss
        # per-run copy so the chain state is not shared between runs
        self.loss = replace(loss) if isinstance(loss, GilbertElliott) else loss
        self._loss_rng = loss_rng
        self._delay_rng = delay_rng
        self._busy_until_ns = 0
        self._last_arrival = 0
        self.accepted = 0
        self.dropped = 0

    def serialization_ns(self, size_bytes: int) -> int:
        bits = size_bytes * 8
        cap = int(self.profile.capacity_bps)
        return -(-bits * 1_000_000_000 // cap)

    def _drop(self) -> bool:
        loss = self.loss
        if isinstance(loss, RandomLoss):
            return self._loss_rng.uniform() < loss.p
        u_t = self._loss_rng.uniform()
        u_l = self._loss_rng.uniform()
        return ge_step(loss, u_t, u_l)[1]

    def transit(self, size_bytes: int, now: int) -> int | None:
        if size_bytes <= 0:
            raise ValueError("packet size must be > 0")
        self.accepted += 1
        depart_ns = max(now * 1000, self._busy_until_ns)
        self._busy_until_ns = depart_ns + self.serialization_ns(size_bytes)
        prof = self.profile
        if prof.jitter_std_us > 0:
            prop = self._delay_rng.normal(prof.base_delay_us, prof.jitter_std_us)
            prop = prop if prop > 0.0 else 0.0
        else:
            prop = prof.base_delay_us
        if self._drop():
            self.dropped += 1
            return None
        arrival = -(-(self._busy_until_ns + round(prop * 1000)) // 1000)
        # no reordering within a link
        if arrival < self._last_arrival:
            arrival = self._last_arrival
        self._last_arrival = arrival
        return arrival


def empirical_loss(loss: LossModel, rng: RngStream, n: int) -> float:
    """Monte-Carlo drop rate of ``loss`` over ``n`` packets (calibration helper)."""
    if isinstance(loss, GilbertElliott):
        ge = replace(loss)
        drops = 0
        for _ in range(n):
            drops += ge_step(ge, rng.uniform(), rng.uniform())[1]
        return drops / n
    return sum(rng.uniform() < loss.p for _ in range(n)) / n


def loss_label(loss: LossModel) -> tuple[str, float]:
    if isinstance(loss, GilbertElliott):
        return "burst", round(stationary_loss(loss), 6)
    return "random", loss.p


__all__ = [
    "GOOD", "BAD", "RandomLoss", "GilbertElliott", "LossModel", "LinkProfile", "Link",
    "PRESETS", "preset", "stationary_loss", "ge_step", "burst_preset", "empirical_loss",
    "loss_label",
]
