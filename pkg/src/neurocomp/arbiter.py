"""AER readout: toggle-tree arbitration of simultaneous events.

Events that share an ideal timestamp form a collision group. Each internal
node of a binary tree over the channel indices serves all requests of one
branch before the other; its toggle picks the branch served first and flips
after every arbitration in which both branches requested. The event granted
``p``-th (0-based) leaves at ``ideal_t + p * t_arb_ns``. Nothing is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .adm import ChannelEventTrain
from .signal_core import ArrayGeometry, SpikeGroundTruth

__all__ = [
    "AddressEvent",
    "AddressEventArray",
    "ArbiterConfig",
    "CollisionStats",
    "ToggleTreeArbiter",
    "arbitrate",
    "merge_ideal",
    "collision_stats",
]

EVENT_DTYPE = np.dtype([
    ("t_ns", "<i8"),
    ("ideal_t_ns", "<i8"),
    ("channel", "<i4"),
    ("x", "<u2"),
    ("y", "<u2"),
    ("polarity", "i1"),
    ("level", "u1"),
    ("priority", "<i4"),
])


class AddressEvent(NamedTuple):
    t_ns: int
    x: int
    y: int
    polarity: int
    ideal_t_ns: int
    priority: int
    level: int = 0


@dataclass(frozen=True, eq=False)
class AddressEventArray:
    """Columnar, globally time-ordered AER event list."""

    data: np.ndarray
    geometry: ArrayGeometry
    fs_hz: float

    def __len__(self):
        return self.data.size

    def __iter__(self):
        d = self.data
        for row in zip(d["t_ns"].tolist(), d["x"].tolist(), d["y"].tolist(), d["polarity"].tolist(),
                       d["ideal_t_ns"].tolist(), d["priority"].tolist(), d["level"].tolist()):
            yield AddressEvent(*row)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def delay_ns(self) -> np.ndarray:
        return self.data["t_ns"] - self.data["ideal_t_ns"]

    def select(self, mask) -> "AddressEventArray":
        return AddressEventArray(self.data[mask], self.geometry, self.fs_hz)

    @classmethod
    def empty(cls, geometry: ArrayGeometry, fs_hz: float) -> "AddressEventArray":
        return cls(np.empty(0, EVENT_DTYPE), geometry, fs_hz)


@dataclass(frozen=True)
class ArbiterConfig:
    t_arb_ns: int = 10
    fairness_seed: int = 0

    def __post_init__(self):
        if self.t_arb_ns <= 0:
            raise ValueError("t_arb_ns must be positive")


@numba.njit(cache=True)
def _rank_groups(channel, group_start, toggle, n_leaves):
    """Assign a grant rank to every event.

    ``channel`` is ordered by group, and within a group by (channel, original
    order). ``toggle`` holds one bit per internal node (heap layout, root at 1,
    0 = left branch first) and is updated in place.
    """
    n = channel.size
    rank = np.empty(n, np.int32)
    cnt = np.zeros(2 * n_leaves, np.int64)
    stamp = np.full(2 * n_leaves, -1, np.int64)
    for g in range(group_start.size - 1):
        a = group_start[g]
        b = group_start[g + 1]
        for e in range(a, b):
            node = n_leaves + channel[e]
            while node >= 1:
                cnt[node] += 1
                node >>= 1
        e = a
        while e < b:
            ch = channel[e]
            node = n_leaves + ch
            off = 0
            while node > 1:
                parent = node >> 1
                if node != 2 * parent + toggle[parent]:
                    off += cnt[node ^ 1]  # the sibling branch is served first
                node = parent
            k = 0
            while e < b and channel[e] == ch:
                rank[e] = off + k
                k += 1
                e += 1
        # every contested node flips once per arbitration
        for e in range(a, b):
            node = (n_leaves + channel[e]) >> 1
            while node >= 1 and stamp[node] != g:
                stamp[node] = g
                if cnt[2 * node] > 0 and cnt[2 * node + 1] > 0:
                    toggle[node] = 1 - toggle[node]
                node >>= 1
        for e in range(a, b):
            node = n_leaves + channel[e]
            while node >= 1 and cnt[node] > 0:
                cnt[node] = 0
                node >>= 1
    return rank


class ToggleTreeArbiter:
    """Stateful toggle tree over ``n_inputs`` requesters.

    The tree is the full binary tree over the next power of two; absent
    leaves never request.
    """

    def __init__(self, n_inputs: int, seed: int = 0):
        if n_inputs < 1:
            raise ValueError("n_inputs must be >= 1")
        self.n_inputs = n_inputs
        self.n_leaves = 1 << max(0, (n_inputs - 1).bit_length())
        rng = np.random.default_rng(seed)
        self.toggle = rng.integers(0, 2, size=max(self.n_leaves, 2), dtype=np.int8)

    def rank(self, channel: np.ndarray, group_start: np.ndarray) -> np.ndarray:
        channel = np.ascontiguousarray(channel, dtype=np.int64)
        if channel.size and (channel.min() < 0 or channel.max() >= self.n_inputs):
            raise ValueError("requester index outside arbiter")
        return _rank_groups(channel, np.ascontiguousarray(group_start, dtype=np.int64), self.toggle, self.n_leaves)

    def arbitrate_once(self, requesters: Sequence[int]) -> list[int]:
        """Grant order for one simultaneous request set (one grant per entry)."""
        req = np.sort(np.asarray(requesters, dtype=np.int64), kind="stable")
        rank = self.rank(req, np.array([0, req.size]))
        order = np.empty(req.size, np.int64)
        order[rank] = req
        return order.tolist()


def _flatten(trains: Sequence[ChannelEventTrain]):
    if not trains:
        return (np.empty(0, np.int64),) * 2 + (np.empty(0, np.int8), np.empty(0, np.uint8))
    ch = np.concatenate([np.full(len(t), t.channel, np.int64) for t in trains])
    ts = np.concatenate([t.timestamps_ns for t in trains])
    pol = np.concatenate([t.polarity for t in trains])
    lvl = np.concatenate([t.level for t in trains])
    return ch, ts, pol, lvl


def _group_starts(sorted_t: np.ndarray) -> np.ndarray:
    if sorted_t.size == 0:
        return np.zeros(1, np.int64)
    brk = np.flatnonzero(np.diff(sorted_t)) + 1
    return np.concatenate(([0], brk, [sorted_t.size])).astype(np.int64)


def _fs_of(trains) -> float:
    return trains[0].fs_hz if trains else 1.0


def _build(ch, ideal, t, pol, lvl, prio, geometry):
    out = np.empty(ch.size, EVENT_DTYPE)
    x, y = geometry.address(ch)
    out["t_ns"] = t
    out["ideal_t_ns"] = ideal
    out["channel"] = ch
    out["x"] = x
    out["y"] = y
    out["polarity"] = pol
    out["level"] = lvl
    out["priority"] = prio
    order = np.lexsort((out["y"], out["x"], out["t_ns"]))
    return out[order]


def arbitrate(trains: Sequence[ChannelEventTrain], geometry: ArrayGeometry,
              cfg: ArbiterConfig = ArbiterConfig()) -> AddressEventArray:
    """Serialize per-channel trains into one AER stream."""
    fs = _fs_of(trains)
    ch, ts, pol, lvl = _flatten(trains)
    if ch.size and ch.max() >= geometry.capacity:
        raise ValueError("channel index outside geometry")
    order = np.lexsort((ch, ts))  # stable: keeps per-channel order inside a group
    ch, ts, pol, lvl = ch[order], ts[order], pol[order], lvl[order]
    arb = ToggleTreeArbiter(geometry.capacity, cfg.fairness_seed)
    rank = arb.rank(ch, _group_starts(ts))
    t_out = ts + rank.astype(np.int64) * int(cfg.t_arb_ns)
    return AddressEventArray(_build(ch, ts, t_out, pol, lvl, rank, geometry), geometry, fs)


def merge_ideal(trains: Sequence[ChannelEventTrain], geometry: ArrayGeometry) -> AddressEventArray:
    """Collision-free reference stream: every event keeps its ideal timestamp."""
    fs = _fs_of(trains)
    ch, ts, pol, lvl = _flatten(trains)
    return AddressEventArray(_build(ch, ts, ts, pol, lvl, np.zeros(ch.size, np.int32), geometry), geometry, fs)


# ---------------------------------------------------------------------------
# collision statistics

@dataclass(frozen=True)
class CollisionStats:
    n_events: int
    n_instants: int
    n_collision_instants: int
    n_colliding_events: int
    mean_colliding_channels: float
    sd_colliding_channels: float
    min_group: int
    max_group: int
    spike_fraction: float | None
    histogram: dict

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in (
            "n_events", "n_instants", "n_collision_instants", "n_colliding_events",
            "mean_colliding_channels", "sd_colliding_channels", "min_group", "max_group", "spike_fraction")}
        return row


def collision_stats(source, truth: SpikeGroundTruth | None = None, fs_hz: float | None = None,
                    spike_window_s: float = 1e-3) -> CollisionStats:
    """Per-instant collision statistics from ideal timestamps.

    An instant is a distinct ideal timestamp carrying at least one event. The
    colliding-channel count of an instant is the number of distinct channels
    requesting there, counted as 0 when only one channel requests. Mean and
    s.d. are over collision instants; min/max over all instants.
    ``spike_fraction`` is the share of colliding events lying within
    ``spike_window_s`` of a ground-truth spike on their own channel.
    """
    if isinstance(source, AddressEventArray):
        ch = source.data["channel"].astype(np.int64)
        ts = source.data["ideal_t_ns"]
        fs_hz = fs_hz or source.fs_hz
    else:
        ch, ts, _, _ = _flatten(list(source))
        if source:
            fs_hz = fs_hz or source[0].fs_hz
    if ch.size == 0:
        return CollisionStats(0, 0, 0, 0, 0.0, 0.0, 0, 0, None if truth is None else 0.0, {})
    order = np.lexsort((ch, ts))
    ts_s, ch_s = ts[order], ch[order]
    new_inst = np.empty(ts_s.size, bool)
    new_inst[0] = True
    new_inst[1:] = ts_s[1:] != ts_s[:-1]
    new_pair = new_inst.copy()
    new_pair[1:] |= ch_s[1:] != ch_s[:-1]
    inst_id = np.cumsum(new_inst) - 1
    inst = ts_s[new_inst]
    n_ch = np.bincount(inst_id[new_pair], minlength=inst.size)
    colliding = np.where(n_ch >= 2, n_ch, 0)
    coll = colliding[colliding > 0]
    ev_coll = np.empty(ch.size, bool)
    ev_coll[order] = colliding[inst_id] > 0
    del ts_s, ch_s, new_inst, new_pair, inst_id
    spike_fraction = None
    if truth is not None:
        if fs_hz is None:
            raise ValueError("fs_hz needed for spike coincidence")
        sel_all = np.flatnonzero(ev_coll)
        sel_all = sel_all[np.argsort(ch[sel_all], kind="stable")]
        ch_sel = ch[sel_all]
        bounds = np.flatnonzero(np.diff(ch_sel)) + 1
        n_hits = 0
        win_ns = spike_window_s * 1e9
        for sel in np.split(sel_all, bounds):
            if sel.size == 0:
                continue
            st = np.asarray(truth.times[int(ch[sel[0]])]) * 1e9
            if st.size == 0:
                continue
            t = ts[sel]
            j = np.searchsorted(st, t)
            d_hi = np.abs(st[np.minimum(j, st.size - 1)] - t)
            d_lo = np.abs(st[np.maximum(j - 1, 0)] - t)
            n_hits += int(np.count_nonzero(np.minimum(d_hi, d_lo) <= win_ns))
        n_ce = int(ev_coll.sum())
        spike_fraction = n_hits / n_ce if n_ce else 0.0
    vals, counts = np.unique(colliding, return_counts=True)
    return CollisionStats(
        n_events=int(ch.size),
        n_instants=int(inst.size),
        n_collision_instants=int(coll.size),
        n_colliding_events=int(ev_coll.sum()),
        mean_colliding_channels=float(coll.mean()) if coll.size else 0.0,
        sd_colliding_channels=float(coll.std()) if coll.size else 0.0,
        min_group=int(colliding.min()),
        max_group=int(colliding.max()),
        spike_fraction=spike_fraction,
        histogram={int(v): int(c) for v, c in zip(vals, counts)},
    )
