"""Asynchronous delta modulation: ON/OFF pulse generation per channel.

The modulator tracks ``V_mod = total_gain * (V_in - V_ref)`` where the
reference is re-armed at every pulse. Thresholds are measured from ``v_cm``.
A pulse fires when ``V_mod >= th_on`` (ON, +1) or ``V_mod <= th_off``
(OFF, -1). With zero refractory time the remainder of a large step keeps
integrating after the reset, so one sample can carry a burst of pulses.
With a non-zero refractory time the modulator is held at ``v_cm`` and input
changes during the hold are lost.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np

from ._timebase import sample_to_ns
from .signal_core import SampledRecording

__all__ = [
    "AdmConfig",
    "DualThresholdConfig",
    "ChannelEventTrain",
    "calibrate_threshold",
    "estimate_v_spike_max",
    "encode_channel",
    "encode_dual_threshold",
    "encode_recording",
    "level_steps",
    "dual_thresholds",
    "with_threshold_factor",
]

DEFAULT_MAX_BURST = 16


@dataclass(frozen=True)
class AdmConfig:
    th_on: float
    th_off: float
    refractory_s: float = 0.0
    total_gain: float = 1.0
    v_cm: float = 0.0
    max_burst: int = DEFAULT_MAX_BURST
    # amplitude the thresholds were derived from; needed by the dual-threshold variant
    v_spike_max: float | None = None

    def __post_init__(self):
        if not (self.th_on > 0 > self.th_off):
            raise ValueError(f"need th_on > 0 > th_off, got {self.th_on}, {self.th_off}")
        if self.refractory_s < 0:
            raise ValueError("refractory_s must be >= 0")
        if self.total_gain <= 0:
            raise ValueError("total_gain must be positive")
        if self.max_burst < 1:
            raise ValueError("max_burst must be >= 1")

    @classmethod
    def symmetric(cls, th: float, **kw) -> "AdmConfig":
        return cls(th_on=th, th_off=-th, **kw)


@dataclass(frozen=True)
class DualThresholdConfig:
    """Th_High = k1 * V_spike-max until a pulse fires, then Th_Low = k2 * V_spike-max for ``timer_s``."""

    k1: float = 0.6
    k2: float = 0.3
    timer_s: float = 1e-3

    def __post_init__(self):
        if not (self.k1 > self.k2 > 0):
            raise ValueError("need k1 > k2 > 0")
        if self.timer_s <= 0:
            raise ValueError("timer_s must be positive")


@dataclass(frozen=True, eq=False)
class ChannelEventTrain:
    """Pulses of one channel, on sample instants.

    ``level`` is 0 for events produced under the base (or high) threshold and
    1 for events produced under the dual-threshold low level.
    """

    channel: int
    fs_hz: float
    sample_index: np.ndarray
    polarity: np.ndarray
    level: np.ndarray = field(default=None)
    timestamps_ns: np.ndarray = field(default=None, init=False)

    def __post_init__(self):
        idx = np.asarray(self.sample_index, dtype=np.int64)
        pol = np.asarray(self.polarity, dtype=np.int8)
        lvl = np.zeros(idx.size, np.uint8) if self.level is None else np.asarray(self.level, dtype=np.uint8)
        if not (idx.shape == pol.shape == lvl.shape):
            raise ValueError("sample_index, polarity and level must have equal length")
        if idx.size > 1 and np.any(np.diff(idx) < 0):
            raise ValueError("event times must be non-decreasing")
        for a in (idx, pol, lvl):
            a.setflags(write=False)
        ts = sample_to_ns(idx, self.fs_hz)
        ts.setflags(write=False)
        object.__setattr__(self, "sample_index", idx)
        object.__setattr__(self, "polarity", pol)
        object.__setattr__(self, "level", lvl)
        object.__setattr__(self, "timestamps_ns", ts)

    def __len__(self):
        return self.sample_index.size

    def __iter__(self):
        return zip(self.timestamps_ns.tolist(), self.polarity.tolist())

    @property
    def n_on(self) -> int:
        return int(np.count_nonzero(self.polarity > 0))

    @property
    def n_off(self) -> int:
        return int(np.count_nonzero(self.polarity < 0))


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _grow(a, n):
    b = np.empty(max(2 * a.size, n), a.dtype)
    b[: a.size] = a
    return b


@numba.njit(cache=True)
def _adm_kernel(x, th_hi, th_lo, th_off_hi, th_off_lo, gain, refr_samples, max_burst, timer_samples, dual):
    """Shared single/dual-threshold loop.

    Single-threshold mode uses only the ``*_hi`` thresholds. In dual mode an
    event under the high level arms the timer and switches to the low level.
    """
    n = x.size
    out_idx = np.empty(max(16, n // 8), np.int64)
    out_pol = np.empty(out_idx.size, np.int8)
    out_lvl = np.empty(out_idx.size, np.uint8)
    m = 0
    v = 0.0
    hold_until = -1.0  # sample position until which the modulator is held in reset
    level = 0
    timer_end = 0.0
    for i in range(1, n):
        if dual and level == 1 and i >= timer_end:
            level = 0
        if i < hold_until:
            continue
        v += gain * (x[i] - x[i - 1])
        fired = 0
        while True:
            on = th_lo if level == 1 else th_hi
            off = th_off_lo if level == 1 else th_off_hi
            if v >= on:
                pol = 1
                v -= on
            elif v <= off:
                pol = -1
                v -= off
            else:
                break
            if m == out_idx.size:
                out_idx = _grow(out_idx, m + 1)
                out_pol = _grow(out_pol, m + 1)
                out_lvl = _grow(out_lvl, m + 1)
            out_idx[m] = i
            out_pol[m] = pol
            out_lvl[m] = level
            m += 1
            fired += 1
            if dual and level == 0:
                level = 1
                timer_end = i + timer_samples
            if refr_samples > 0.0:
                v = 0.0
                hold_until = i + refr_samples
                break
            if fired >= max_burst:
                v = 0.0
                break
    return out_idx[:m].copy(), out_pol[:m].copy(), out_lvl[:m].copy()


def _prepare(signal) -> np.ndarray:
    x = np.ascontiguousarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be 1-D")
    if np.isnan(x).any():
        raise ValueError("signal contains NaN samples")
    return x


def encode_channel(signal, cfg: AdmConfig, fs_hz: float, channel: int = 0) -> ChannelEventTrain:
    """Delta-modulate one uniformly sampled channel."""
    x = _prepare(signal)
    idx, pol, lvl = _adm_kernel(
        x, cfg.th_on, cfg.th_on, cfg.th_off, cfg.th_off, cfg.total_gain,
        cfg.refractory_s * fs_hz, cfg.max_burst, 0.0, False,
    )
    return ChannelEventTrain(channel, fs_hz, idx, pol, lvl)


def dual_thresholds(base: AdmConfig, dual: DualThresholdConfig) -> tuple[float, float]:
    if base.v_spike_max is None:
        raise ValueError("dual-threshold encoding needs base.v_spike_max (use calibrate_threshold)")
    return dual.k1 * base.v_spike_max, dual.k2 * base.v_spike_max


def encode_dual_threshold(signal, base: AdmConfig, dual: DualThresholdConfig, fs_hz: float,
                          channel: int = 0) -> ChannelEventTrain:
    """Dual-threshold modulation; events carry the level they fired under."""
    x = _prepare(signal)
    hi, lo = dual_thresholds(base, dual)
    idx, pol, lvl = _adm_kernel(
        x, hi, lo, -hi, -lo, base.total_gain,
        base.refractory_s * fs_hz, base.max_burst, dual.timer_s * fs_hz, True,
    )
    return ChannelEventTrain(channel, fs_hz, idx, pol, lvl)


def level_steps(cfg: AdmConfig, dual: DualThresholdConfig | None = None) -> np.ndarray:
    """Input-referred reconstruction steps, shape ``(levels, 2)`` as ``[on, off]`` rows."""
    g = cfg.total_gain
    if dual is None:
        return np.array([[cfg.th_on / g, cfg.th_off / g]])
    hi, lo = dual_thresholds(cfg, dual)
    return np.array([[hi / g, -hi / g], [lo / g, -lo / g]])


def encode_recording(rec: SampledRecording, cfgs, dual: DualThresholdConfig | None = None) -> list[ChannelEventTrain]:
    """Encode every channel; ``cfgs`` is one AdmConfig or one per channel."""
    if isinstance(cfgs, AdmConfig):
        cfgs = [cfgs] * rec.channels
    if len(cfgs) != rec.channels:
        raise ValueError("need one AdmConfig per channel")
    if dual is None:
        return [encode_channel(rec.samples[c], cfgs[c], rec.fs_hz, c) for c in range(rec.channels)]
    return [encode_dual_threshold(rec.samples[c], cfgs[c], dual, rec.fs_hz, c) for c in range(rec.channels)]


# ---------------------------------------------------------------------------
# threshold calibration

def _robust_sigma(x: np.ndarray) -> float:
    return float(np.median(np.abs(x)) / 0.6745)


def estimate_v_spike_max(x: np.ndarray, percentile: float = 99.9) -> float:
    return float(np.percentile(np.abs(x), percentile))


def calibrate_threshold(
    rec: SampledRecording,
    k: float,
    calib_s: float = 5.0,
    percentile: float = 99.9,
    spike_snr: float = 4.0,
    default_v_spike_max: float | None = None,
    allow_flat: bool = False,
    **adm_kwargs,
) -> list[AdmConfig]:
    """Per-channel symmetric thresholds ``+-k * V_spike-max``.

    ``V_spike-max`` is the ``percentile`` of ``|x|`` over the first
    ``calib_s`` seconds. Channels whose calibration window shows no spike
    (percentile below ``spike_snr`` robust noise deviations) fall back to the
    median ``V_spike-max`` of the spiking channels, or ``default_v_spike_max``
    when no channel spikes. A flat calibration segment is an error unless
    ``allow_flat`` is set, in which case the channel takes the fallback too.
    """
    if not 0 < k:
        raise ValueError("k must be positive")
    n = min(rec.n_samples, max(1, int(round(calib_s * rec.fs_hz))))
    seg = rec.samples[:, :n]
    vmax = np.empty(rec.channels)
    spiking = np.zeros(rec.channels, bool)
    cache = {}
    for c in range(rec.channels):
        row = seg[c]
        key = row.__array_interface__["data"][0]
        if key not in cache:
            centred = row - np.median(row)
            if np.ptp(row) == 0:
                if not allow_flat:
                    raise ValueError(f"channel {c}: no dynamic range in calibration segment")
                cache[key] = (0.0, False)
            else:
                v = estimate_v_spike_max(centred, percentile)
                cache[key] = (v, v > spike_snr * _robust_sigma(centred))
        vmax[c], spiking[c] = cache[key]
    if not spiking.all():
        if spiking.any():
            fallback = float(np.median(vmax[spiking]))
        elif default_v_spike_max is not None:
            fallback = float(default_v_spike_max)
        else:
            fallback = None
        if fallback is not None:
            vmax[~spiking] = fallback
    if np.any(vmax <= 0):
        raise ValueError("no dynamic range in calibration segment and no default V_spike-max")
    return [AdmConfig.symmetric(k * float(v), v_spike_max=float(v), **adm_kwargs) for v in vmax]


def with_threshold_factor(cfg: AdmConfig, k: float) -> AdmConfig:
    """Same channel calibration, different factor k."""
    if cfg.v_spike_max is None:
        raise ValueError("config carries no v_spike_max")
    return replace(cfg, th_on=k * cfg.v_spike_max, th_off=-k * cfg.v_spike_max)
