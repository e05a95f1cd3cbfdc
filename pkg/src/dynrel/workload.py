"""Clocked live-stream source: periodic frame updates with jittered sizes."""

from __future__ import annotations

from dataclasses import dataclass

from .sim import US_PER_S, RngStream


@dataclass(frozen=True, slots=True)
class UpdateSpec:
    update_id: int
    gen_time: int
    size_bytes: int


@dataclass(frozen=True)
class SourceModel:
    fps: float = 60.0
    mean_size_bytes: int = 16_667
    size_jitter_fraction: float = 0.2
    duration: int = 10 * US_PER_S

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be > 0")
        if self.mean_size_bytes < 1:
            raise ValueError("mean_size_bytes must be >= 1")
        if self.size_jitter_fraction < 0:
            raise ValueError("size_jitter_fraction must be >= 0")


@dataclass(frozen=True, slots=True)
class Fragment:
    update_id: int
    gen_time: int
    index: int
    count: int
    size_bytes: int


class VideoSource:
    """Yields updates at 1/fps spacing; the fractional microsecond carries over."""

    def __init__(self, model: SourceModel, rng: RngStream):
        self.model = model
        self.rng = rng
        self._next_id = 0

    def _gen_time(self, k: int) -> int:
        fps = self.model.fps
        if float(fps).is_integer():
            return k * US_PER_S // int(fps)
        return int(k * US_PER_S / fps)

    def peek_time(self) -> int:
        return self._gen_time(self._next_id)

    def exhausted(self) -> bool:
        return self.peek_time() >= self.model.duration

    def next_update(self) -> UpdateSpec:
        k = self._next_id
        self._next_id += 1
        m = self.model
        if m.size_jitter_fraction > 0:
            size = round(self.rng.normal(m.mean_size_bytes, m.size_jitter_fraction * m.mean_size_bytes))
            size = max(1, size)
        else:
            size = m.mean_size_bytes
        return UpdateSpec(k, self._gen_time(k), size)

    def __iter__(self):
        while not self.exhausted():
            yield self.next_update()


def fragment(update: UpdateSpec, mtu_payload: int) -> list[Fragment]:
    if mtu_payload < 1:
        raise ValueError("mtu_payload must be >= 1")
    count = -(-update.size_bytes // mtu_payload)
    frags = []
    for i in range(count):
        size = min(mtu_payload, update.size_bytes - i * mtu_payload)
        frags.append(Fragment(update.update_id, update.gen_time, i, count, size))
    return frags
