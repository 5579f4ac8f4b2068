"""Temporal-density event filter that keeps spike-like bursts.

An event passes when its channel produced at least ``min_events`` events
(itself included) within the last ``window_s``. Such a density pass opens a
``hold_s`` window during which every further event of that channel passes,
so a spike loses at most its first ``min_events - 1`` events.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arbiter import AddressEventArray
from .packetizer import EventStream

__all__ = ["FilterConfig", "filter_mask", "filter_spike_events"]


@dataclass(frozen=True)
class FilterConfig:
    window_s: float = 0.5e-3
    min_events: int = 2
    hold_s: float = 2e-3

    def __post_init__(self):
        if not self.window_s > 0:
            raise ValueError("window_s must be positive")
        if self.min_events < 1:
            raise ValueError("min_events must be >= 1")
        if self.hold_s < 0:
            raise ValueError("hold_s must be >= 0")


def filter_mask(t_ns: np.ndarray, channel: np.ndarray, cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Boolean keep-mask for events given in time order."""
    t_ns = np.asarray(t_ns, dtype=np.int64)
    channel = np.asarray(channel, dtype=np.int64)
    n = t_ns.size
    if n == 0:
        return np.zeros(0, bool)
    if np.any(np.diff(t_ns) < 0):
        raise ValueError("events must be time-ordered")
    order = np.lexsort((np.arange(n), channel))
    ch, t = channel[order], t_ns[order]
    win = int(round(cfg.window_s * 1e9))
    hold = int(round(cfg.hold_s * 1e9))
    starts = np.searchsorted(ch, ch, side="left")
    # sort key that keeps channels apart and time ordered inside each
    span = int(t.max() - t.min()) + win + hold + 1
    key = (ch - ch.min()) * span + (t - t.min())
    lo = np.searchsorted(key, key - win, side="left")
    lo = np.maximum(lo, starts)
    count = np.arange(n) - lo + 1
    dense = count >= cfg.min_events
    last = np.where(dense, np.arange(n), -1)
    last = np.maximum.accumulate(last)
    same = (last >= starts) & (last >= 0)
    held = same & (t - t[np.maximum(last, 0)] <= hold)
    keep_sorted = dense | held
    keep = np.empty(n, bool)
    keep[order] = keep_sorted
    return keep


def filter_spike_events(events, cfg: FilterConfig = FilterConfig()):
    """Return ``(filtered, gain)`` where gain is input count over output count.

    Accepts an AddressEventArray or an APM EventStream; the output has the
    same type and keeps the input order.
    """
    if isinstance(events, AddressEventArray):
        d = events.data
        keep = filter_mask(d["t_ns"], d["channel"], cfg)
        out = events.select(keep)
    elif isinstance(events, EventStream):
        if events.mode != "APM":
            raise ValueError("filtering needs individual pulses (APM stream)")
        keep = filter_mask(events.packets["t_ns"], events.channel, cfg)
        out = EventStream("APM", events.geometry, events.fs_hz, events.packets[keep].copy(), events.duration_s)
    else:
        raise TypeError("expected AddressEventArray or EventStream")
    n_in, n_out = keep.size, int(keep.sum())
    if n_out == 0:
        gain = 1.0 if n_in == 0 else float("inf")
    else:
        gain = n_in / n_out
    return out, gain
