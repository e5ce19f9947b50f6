"""LRU cache simulation over slot access traces.

Models a fixed-capacity cache of memory slots: every read or write event
touches its slot, a miss loads the slot (evicting the least recently used
entry when full), and first touches are cold misses. With capacity at
least the number of distinct slots, misses equal that distinct count and
nothing is ever evicted.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import ConfigError

POLICIES = ("LRU",)


@dataclass(frozen=True)
class CacheSimConfig:
    capacity: int
    policy: str = "LRU"

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"cache capacity must be >= 1, got {self.capacity}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")


@dataclass
class CacheStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    per_slot: dict = field(default_factory=dict)

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def as_dict(self) -> dict:
        return {
            "accesses": self.accesses,
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "hit_rate": self.hit_rate,
            "per_slot": dict(sorted(self.per_slot.items())),
        }


def simulate_cache(slots, cfg: CacheSimConfig) -> CacheStats:
    """Replay slot touches through an LRU cache.

    ``slots`` is any iterable of slot ids, or of trace events carrying a
    ``.slot`` attribute (reads and writes count alike).
    """
    stats = CacheStats()
    cache: OrderedDict = OrderedDict()
    for item in slots:
        slot = int(getattr(item, "slot", item))
        stats.accesses += 1
        stats.per_slot[slot] = stats.per_slot.get(slot, 0) + 1
        if slot in cache:
            stats.hits += 1
            cache.move_to_end(slot)
            continue
        stats.misses += 1
        if len(cache) >= cfg.capacity:
            cache.popitem(last=False)
            stats.evictions += 1
        cache[slot] = None
    return stats
