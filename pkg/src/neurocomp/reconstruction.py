"""Stair-step signal recovery from APM/PCM streams and fidelity scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from ._timebase import ns_to_sample_round
from .adm import AdmConfig, level_steps
from .packetizer import EventStream
from .signal_core import SampledRecording

__all__ = [
    "RecoveredSignal",
    "FidelityReport",
    "as_step_table",
    "reconstruct",
    "iter_reconstruct",
    "channel_updates",
    "accumulate_steps",
    "remove_drift",
    "highpass",
    "bandpass",
    "rmse_normalized",
    "pearson_cc",
    "fidelity",
    "stream_fidelity",
]

DEFAULT_CUTOFF_HZ = 10.0
SPIKE_BAND_HZ = (100.0, 3000.0)
REFERENCE_MODES = ("bandpass", "highpass", "raw")


@dataclass(frozen=True, eq=False)
class RecoveredSignal:
    fs_hz: float
    samples: np.ndarray
    drift_removed: bool = False

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def to_recording(self, geometry=None) -> SampledRecording:
        return SampledRecording(self.fs_hz, self.samples, geometry)


def as_step_table(thresholds, channels: int) -> np.ndarray:
    """Normalize thresholds to an array ``(channels, levels, 2)`` of input-referred steps.

    Accepts one AdmConfig, a list of AdmConfig, ``(AdmConfig, DualThresholdConfig)``
    pairs, or a ready-made array.
    """
    if isinstance(thresholds, AdmConfig):
        thresholds = [thresholds] * channels
    if isinstance(thresholds, np.ndarray):
        table = np.asarray(thresholds, dtype=np.float64)
        if table.ndim == 2:
            table = np.broadcast_to(table, (channels,) + table.shape)
    else:
        rows = []
        for t in thresholds:
            if isinstance(t, tuple):
                rows.append(level_steps(t[0], t[1]))
            else:
                rows.append(level_steps(t))
        width = max(r.shape[0] for r in rows)
        table = np.zeros((len(rows), width, 2))
        for i, r in enumerate(rows):
            table[i, : r.shape[0]] = r
    if table.shape[0] < channels:
        raise ValueError(f"thresholds given for {table.shape[0]} channels, stream needs {channels}")
    return table


def _updates(stream: EventStream, table: np.ndarray):
    """Per-packet (channel, sample index, increment), in packet order."""
    p = stream.packets
    ch = stream.channel if p.size else np.empty(0, np.int64)
    if ch.size and ch.max() >= table.shape[0]:
        raise ValueError("stream addresses a channel without thresholds")
    if stream.mode == "APM":
        lvl = p["level"].astype(np.int64)
        if lvl.size and lvl.max() >= table.shape[1]:
            raise ValueError("event level has no matching threshold")
        col = (p["polarity"] < 0).astype(np.int64)
        inc = table[ch, lvl, col]
        idx = ns_to_sample_round(p["t_ns"], stream.fs_hz)
    else:
        inc = p["n_on"] * table[ch, 0, 0] + p["n_off"] * table[ch, 0, 1]
        # bin contents are known at bin close
        idx = (p["bin_index"].astype(np.int64) + 1) * stream.bin_width
    return ch, idx, inc


def accumulate_steps(idx: np.ndarray, inc: np.ndarray, n_samples: int) -> np.ndarray:
    """Stair-step series: ``out[n]`` is the sum of increments with ``idx <= n``."""
    order = np.argsort(idx, kind="stable")
    idx, running = idx[order], np.cumsum(inc[order])
    last = np.searchsorted(idx, np.arange(n_samples), side="right") - 1
    out = np.zeros(n_samples)
    hit = last >= 0
    out[hit] = running[last[hit]]
    return out


def channel_updates(stream: EventStream, thresholds, channels: int):
    """Yield ``(channel, sample_index, increment)`` arrays per channel, in packet order."""
    table = as_step_table(thresholds, channels)
    ch, idx, inc = _updates(stream, table)
    order = np.argsort(ch, kind="stable")
    ch, idx, inc = ch[order], idx[order], inc[order]
    bounds = np.searchsorted(ch, np.arange(channels + 1))
    for c in range(channels):
        a, b = bounds[c], bounds[c + 1]
        yield c, idx[a:b], inc[a:b]


def iter_reconstruct(stream: EventStream, thresholds, n_samples: int, channels: int):
    """Yield ``(channel, series)`` one channel at a time (memory-light)."""
    for c, idx, inc in channel_updates(stream, thresholds, channels):
        yield c, accumulate_steps(idx, inc, n_samples)


def reconstruct(stream: EventStream, thresholds, n_samples: int | None = None,
                channels: int | None = None) -> RecoveredSignal:
    """Stair-step recovery on the stream's sample grid.

    APM: each pulse adds its ON/OFF step from the nearest sample instant on.
    PCM: each bin adds ``n_on*th_on + n_off*th_off`` from the bin's end on.
    Steps are summed in packet order, so the result is exactly reproducible
    by a per-event accumulator.
    """
    if n_samples is None:
        n_samples = int(round(stream.duration_s * stream.fs_hz))
    if channels is None:
        if isinstance(thresholds, list):
            channels = len(thresholds)
        elif isinstance(thresholds, np.ndarray) and thresholds.ndim == 3:
            channels = thresholds.shape[0]
        else:
            channels = stream.geometry.capacity
    out = np.zeros((channels, n_samples))
    for c, series in iter_reconstruct(stream, thresholds, n_samples, channels):
        out[c] = series
    return RecoveredSignal(stream.fs_hz, out)


def highpass(x: np.ndarray, fs_hz: float, cutoff_hz: float = DEFAULT_CUTOFF_HZ) -> np.ndarray:
    """Single-pole RC high-pass along the last axis, started in steady state.

    ``y[n] = a * (y[n-1] + x[n] - x[n-1])`` with ``a = RC / (RC + dt)``; the
    initial state treats the first sample as a held DC level, so a constant
    input maps to exactly zero.
    """
    if not 0 < cutoff_hz < fs_hz / 2:
        raise ValueError("cutoff must lie in (0, fs/2)")
    x = np.asarray(x, dtype=np.float64)
    rc = 1.0 / (2 * np.pi * cutoff_hz)
    a = rc / (rc + 1.0 / fs_hz)
    b, den = np.array([a, -a]), np.array([1.0, -a])
    zi = sps.lfilter_zi(b, den) * x[..., :1]
    y, _ = sps.lfilter(b, den, x, axis=-1, zi=zi)
    return y


def bandpass(x: np.ndarray, fs_hz: float, band_hz=SPIKE_BAND_HZ, order: int = 2) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    lo, hi = band_hz
    if not 0 < lo < hi < fs_hz / 2:
        raise ValueError("band must satisfy 0 < lo < hi < fs/2")
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=fs_hz, output="sos")
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def remove_drift(sig: RecoveredSignal, cutoff_hz: float = DEFAULT_CUTOFF_HZ) -> RecoveredSignal:
    return RecoveredSignal(sig.fs_hz, highpass(sig.samples, sig.fs_hz, cutoff_hz), True)


def rmse_normalized(ref, rec) -> float:
    """RMSE divided by the reference peak-to-peak range, clamped to [0, 1]."""
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError("signals must have equal length")
    span = float(ref.max() - ref.min())
    if span == 0:
        raise ValueError("zero range reference")
    rmse = float(np.sqrt(np.mean((ref - rec) ** 2)))
    return min(1.0, rmse / span)


def pearson_cc(ref, rec) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError("signals must have equal length")
    a = ref - ref.mean()
    b = rec - rec.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        raise ValueError("correlation undefined for a constant input")
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


@dataclass(frozen=True)
class FidelityReport:
    rmse: np.ndarray
    cc: np.ndarray
    reference_mode: str

    @property
    def rmse_mean(self) -> float:
        return float(np.nanmean(self.rmse)) if self.rmse.size else float("nan")

    @property
    def cc_mean(self) -> float:
        return float(np.nanmean(self.cc)) if self.cc.size else float("nan")


def _reference(x, fs_hz, mode, cutoff_hz):
    if mode == "raw":
        return x
    if mode == "highpass":
        return highpass(x, fs_hz, cutoff_hz)
    if mode == "bandpass":
        return bandpass(x, fs_hz)
    raise ValueError(f"unknown reference mode {mode!r}")


def _score(ref, rec):
    try:
        r = rmse_normalized(ref, rec)
    except ValueError:
        r = np.nan
    try:
        c = pearson_cc(ref, rec)
    except ValueError:
        c = np.nan
    return r, c


def fidelity(original: SampledRecording, recovered: RecoveredSignal, reference_mode: str = "bandpass",
             cutoff_hz: float = DEFAULT_CUTOFF_HZ) -> FidelityReport:
    """Per-channel normalized RMSE and CC; NaN where a metric is undefined."""
    n = min(original.n_samples, recovered.samples.shape[1])
    rm, cc = [], []
    for c in range(original.channels):
        ref = _reference(original.samples[c, :n], original.fs_hz, reference_mode, cutoff_hz)
        r, k = _score(ref, recovered.samples[c, :n])
        rm.append(r)
        cc.append(k)
    return FidelityReport(np.array(rm), np.array(cc), reference_mode)


def stream_fidelity(original: SampledRecording, stream: EventStream, thresholds,
                    reference_mode: str = "bandpass", cutoff_hz: float = DEFAULT_CUTOFF_HZ,
                    drift_removal: bool = True) -> FidelityReport:
    """Reconstruct, drift-remove and score channel by channel without holding all channels."""
    n = original.n_samples
    rm, cc = [], []
    ref_cache = {}
    for c, series in iter_reconstruct(stream, thresholds, n, original.channels):
        row = original.samples[c]
        key = row.__array_interface__["data"][0]
        if key not in ref_cache:
            ref_cache = {key: _reference(row, original.fs_hz, reference_mode, cutoff_hz)}
        if drift_removal:
            series = highpass(series, stream.fs_hz, cutoff_hz)
        r, k = _score(ref_cache[key], series)
        rm.append(r)
        cc.append(k)
    return FidelityReport(np.array(rm), np.array(cc), reference_mode)
