"""Discrete-event engine with named, seeded random streams.

Time is kept as integer microseconds. Events fire in (fire_at, seq) order,
so same-time events dispatch in the order they were scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

US_PER_MS = 1_000
US_PER_S = 1_000_000


class SimulationError(RuntimeError):
    """A simulator invariant was breached (scheduling in the past, protocol violation, ...)."""


@dataclass(eq=False, slots=True)
class Event:
    fire_at: int
    seq: int
    action: Callable[..., Any]
    args: tuple = ()
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


def stream_seed(global_seed: int, stream_id: str) -> int:
    """Stable 64-bit sub-seed for ``stream_id``; independent of PYTHONHASHSEED."""
    digest = hashlib.blake2b(f"{global_seed}:{stream_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based (Philox) generator keyed on (global seed, stream id).

    Draws are served from pre-generated blocks; the sequence seen by callers
    depends only on the seed, the stream id and the order of calls on this
    stream.
    """

    BLOCK = 4096

    def __init__(self, global_seed: int, stream_id: str):
        self.stream_id = stream_id
        self.global_seed = global_seed
        bitgen = np.random.Philox(np.random.SeedSequence(stream_seed(global_seed, stream_id)))
        self._gen = np.random.Generator(bitgen)
        self._uniform: list[float] = []
        self._ui = 0
        self._normal: list[float] = []
        self._ni = 0

    def uniform(self) -> float:
        """Next value in [0, 1)."""
        if self._ui >= len(self._uniform):
            self._uniform = self._gen.random(self.BLOCK).tolist()
            self._ui = 0
        u = self._uniform[self._ui]
        self._ui += 1
        return u

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if self._ni >= len(self._normal):
            self._normal = self._gen.standard_normal(self.BLOCK).tolist()
            self._ni = 0
        z = self._normal[self._ni]
        self._ni += 1
        return mean + std * z


def rng_uniform(stream: RngStream) -> float:
    return stream.uniform()


@dataclass
class Simulator:
    """Single-threaded event loop. One instance per simulation run."""

    seed: int = 0
    now: int = 0
    dispatched: int = 0
    _queue: list = field(default_factory=list, repr=False)
    _seq: int = 0
    _streams: dict = field(default_factory=dict, repr=False)

    def schedule(self, t: int, action: Callable[..., Any], *args: Any) -> Event:
        if t < self.now:
            raise SimulationError(
                f"cannot schedule {getattr(action, '__qualname__', action)} at {t} us; clock is at {self.now} us"
            )
        ev = Event(int(t), self._seq, action, args)
        self._seq += 1
        heapq.heappush(self._queue, (ev.fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay: int, action: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(self.now + delay, action, *args)

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with fire_at <= t_end; leaves the clock at t_end."""
        count = 0
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            fire_at, _, ev = heapq.heappop(queue)
            if ev.cancelled:
                continue
            self.now = fire_at
            ev.action(*ev.args)
            count += 1
        if t_end > self.now:
            self.now = t_end
        self.dispatched += count
        return count

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def stream(self, stream_id: str) -> RngStream:
        """Return the run's RNG stream for ``stream_id``, creating it on first use."""
        s = self._streams.get(stream_id)
        if s is None:
            s = self._streams[stream_id] = RngStream(self.seed, stream_id)
        return s
