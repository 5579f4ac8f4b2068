"""Multichannel recordings: synthetic generation, replication, and file I/O.

Samples are input-referred volts (or units of the unit spike peak for the
synthetic generator) with shape ``(channels, samples_per_channel)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._toml import load_toml_text

__all__ = [
    "ArrayGeometry",
    "SpikeGroundTruth",
    "SampledRecording",
    "SynthConfig",
    "RecordingLoadError",
    "TEMPLATES",
    "dog_template",
    "generate_synthetic",
    "replicate_channels",
    "load_recording",
    "save_recording",
]


class RecordingLoadError(ValueError):
    """Raised when a recording file is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Electrode array of ``n_rows x n_cols`` sites, addressed row-major."""

    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(f"geometry must be at least 1x1, got {self.n_rows}x{self.n_cols}")

    @classmethod
    def near_square(cls, channels: int) -> "ArrayGeometry":
        if channels < 1:
            raise ValueError("channels must be >= 1")
        n_cols = math.isqrt(channels - 1) + 1
        n_rows = -(-channels // n_cols)
        return cls(n_rows, n_cols)

    @property
    def capacity(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def row_bits(self) -> int:
        return _ceil_log2(self.n_rows)

    @property
    def col_bits(self) -> int:
        return _ceil_log2(self.n_cols)

    @property
    def address_bits(self) -> int:
        """ceil(log2 N_r) + ceil(log2 N_c)."""
        return self.row_bits + self.col_bits

    def address(self, channel):
        """Channel index -> (x, y). Works elementwise on arrays."""
        channel = np.asarray(channel)
        if np.any((channel < 0) | (channel >= self.capacity)):
            raise ValueError("channel index outside geometry")
        return channel % self.n_cols, channel // self.n_cols

    def channel(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        if np.any((x < 0) | (x >= self.n_cols) | (y < 0) | (y >= self.n_rows)):
            raise ValueError("address outside geometry")
        return y * self.n_cols + x


def _ceil_log2(n: int) -> int:
    return 0 if n <= 1 else (int(n) - 1).bit_length()


@dataclass(frozen=True)
class SpikeGroundTruth:
    """Per-channel sorted spike times in seconds."""

    times: tuple

    def __post_init__(self):
        arrs = []
        for t in self.times:
            a = np.array(t, dtype=np.float64)
            if a.ndim != 1:
                raise ValueError("spike times must be 1-D per channel")
            if a.size > 1 and np.any(np.diff(a) <= 0):
                raise ValueError("spike times must be strictly increasing per channel")
            a.setflags(write=False)
            arrs.append(a)
        object.__setattr__(self, "times", tuple(arrs))

    @property
    def channels(self) -> int:
        return len(self.times)

    @property
    def total(self) -> int:
        return sum(a.size for a in self.times)

    def check_within(self, duration_s: float) -> None:
        for a in self.times:
            if a.size and (a[0] < 0 or a[-1] > duration_s):
                raise ValueError("spike time outside recording")


@dataclass(frozen=True, eq=False)
class SampledRecording:
    fs_hz: float
    samples: np.ndarray
    geometry: ArrayGeometry | None = None
    ground_truth: SpikeGroundTruth | None = None

    def __post_init__(self):
        if not self.fs_hz > 0:
            raise ValueError("fs_hz must be positive")
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[np.newaxis, :]
        if s.ndim != 2:
            raise ValueError("samples must be (channels, samples_per_channel)")
        if s.dtype.kind != "f":
            s = s.astype(np.float64)
        if s.flags.writeable:
            s = s.view()
            s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        geometry = self.geometry or ArrayGeometry.near_square(s.shape[0])
        if geometry.capacity < s.shape[0]:
            raise ValueError(f"geometry {geometry.n_rows}x{geometry.n_cols} too small for {s.shape[0]} channels")
        object.__setattr__(self, "geometry", geometry)
        if self.ground_truth is not None:
            if self.ground_truth.channels != s.shape[0]:
                raise ValueError("ground truth channel count mismatch")
            self.ground_truth.check_within(self.duration_s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs_hz

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]

    def segment(self, start_s: float, stop_s: float) -> "SampledRecording":
        a = max(0, int(round(start_s * self.fs_hz)))
        b = min(self.n_samples, int(round(stop_s * self.fs_hz)))
        truth = None
        if self.ground_truth is not None:
            t0, t1 = a / self.fs_hz, b / self.fs_hz
            truth = SpikeGroundTruth(tuple(t[(t >= t0) & (t < t1)] - t0 for t in self.ground_truth.times))
        return SampledRecording(self.fs_hz, self.samples[:, a:b], self.geometry, truth)


# ---------------------------------------------------------------------------
# spike templates

def dog_template(width_s: float, fs_hz: float) -> tuple[np.ndarray, int]:
    """Biphasic difference-of-Gaussians with unit positive peak.

    Returns the waveform and the index of its peak sample. The waveform spans
    ``width_s`` and starts/ends near zero.
    """
    n = max(3, int(round(width_s * fs_hz)))
    t = (np.arange(n) - n / 3.0) / fs_hz
    pos = np.exp(-0.5 * (t / (width_s / 10.0)) ** 2)
    neg = 0.3 * np.exp(-0.5 * ((t - width_s / 5.0) / (width_s / 7.0)) ** 2)
    w = pos - neg
    w = w - np.linspace(w[0], w[-1], n)
    peak = int(np.argmax(w))
    return w / w[peak], peak


def monophasic_template(width_s: float, fs_hz: float) -> tuple[np.ndarray, int]:
    n = max(3, int(round(width_s * fs_hz)))
    t = (np.arange(n) - (n - 1) / 2.0) / fs_hz
    w = np.exp(-0.5 * (t / (width_s / 8.0)) ** 2)
    w = w - w[0]
    peak = int(np.argmax(w))
    return w / w[peak], peak


TEMPLATES: dict[str, Callable[[float, float], tuple[np.ndarray, int]]] = {
    "dog": dog_template,
    "monophasic": monophasic_template,
}


@dataclass(frozen=True)
class SynthConfig:
    fs_hz: float = 24_000.0
    duration_s: float = 10.0
    firing_rate_hz: float = 60.0
    noise_sigma: float = 0.05
    spike_duration_ms: tuple[float, float] = (1.0, 2.0)
    template_id: str = "dog"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.spike_duration_ms
        object.__setattr__(self, "spike_duration_ms", (float(lo), float(hi)))
        if self.fs_hz <= 0 or self.duration_s <= 0:
            raise ValueError("fs_hz and duration_s must be positive")
        if self.firing_rate_hz < 0:
            raise ValueError("firing_rate_hz must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < lo <= hi:
            raise ValueError("spike_duration_ms must be an increasing positive range")
        if self.template_id not in TEMPLATES:
            raise ValueError(f"unknown template {self.template_id!r}; known: {sorted(TEMPLATES)}")

    @property
    def refractory_s(self) -> float:
        return self.spike_duration_ms[1] * 1e-3


def _spike_peaks(rng: np.random.Generator, cfg: SynthConfig, n_samples: int, margin: int) -> np.ndarray:
    """Dead-time Poisson peak sample indices (gaps >= refractory)."""
    rate = cfg.firing_rate_hz
    if rate == 0:
        return np.empty(0, dtype=np.int64)
    dead = cfg.refractory_s
    mean_free = 1.0 / rate - dead
    if mean_free <= 0:
        raise ValueError(
            f"firing rate {rate} Hz cannot satisfy the {dead * 1e3:g} ms refractory constraint "
            f"(needs rate < {1.0 / dead:g} Hz)"
        )
    t_end = cfg.duration_s
    expected = int(rate * t_end * 1.2) + 20
    times = []
    t = margin / cfg.fs_hz
    while True:
        isi = dead + rng.exponential(mean_free, size=expected)
        cum = t + np.cumsum(isi)
        times.append(cum)
        t = cum[-1]
        if t >= t_end:
            break
    times = np.concatenate(times)
    idx = np.round(times * cfg.fs_hz).astype(np.int64)
    idx = idx[idx < n_samples - margin]
    # rounding can only shrink gaps by < 1 sample; the template hold keeps them disjoint
    return idx


def generate_synthetic(cfg: SynthConfig) -> tuple[SampledRecording, SpikeGroundTruth]:
    """Single-channel recording of unit-peak spikes in white Gaussian noise.

    Ground-truth times are the template peak instants.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration_s * cfg.fs_hz))
    make = TEMPLATES[cfg.template_id]
    lo, hi = cfg.spike_duration_ms
    margin = int(math.ceil(hi * 1e-3 * cfg.fs_hz)) + 1
    peaks = _spike_peaks(rng, cfg, n, margin)
    widths = rng.uniform(lo, hi, size=peaks.size) * 1e-3
    x = np.zeros(n)
    for p, w in zip(peaks, widths):
        wave, pk = make(float(w), cfg.fs_hz)
        start = p - pk
        x[start:start + wave.size] += wave
    if cfg.noise_sigma > 0:
        x += rng.standard_normal(n) * cfg.noise_sigma
    truth = SpikeGroundTruth((peaks / cfg.fs_hz,))
    return SampledRecording(cfg.fs_hz, x, ArrayGeometry(1, 1), truth), truth


def replicate_channels(rec: SampledRecording, n: int, geometry: ArrayGeometry | None = None) -> SampledRecording:
    """Copy a single-channel recording onto ``n`` channels (worst-case collisions).

    The result is a read-only broadcast view, so replication costs no memory.
    """
    if rec.channels != 1:
        raise ValueError("replicate_channels expects a single-channel recording")
    if n < 1:
        raise ValueError("n must be >= 1")
    geometry = geometry or ArrayGeometry.near_square(n)
    samples = np.broadcast_to(rec.samples[0], (n, rec.n_samples))
    truth = None
    if rec.ground_truth is not None:
        truth = SpikeGroundTruth(rec.ground_truth.times * n)
    return SampledRecording(rec.fs_hz, samples, geometry, truth)


# ---------------------------------------------------------------------------
# file I/O

def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def _truth_path(path: Path) -> Path:
    return path.with_name(path.name + ".spikes.csv")


def save_recording(rec: SampledRecording, path, format: str = "f32", scale: float = 1.0) -> Path:
    """Write ``rec`` as raw little-endian float32 (+ header) or CSV.

    Stored values are ``samples / scale``; loading multiplies by ``scale``.
    """
    path = Path(path)
    data = np.asarray(rec.samples, dtype=np.float64) / scale
    if format == "f32":
        data.astype("<f4").tofile(path)
        g = rec.geometry
        _header_path(path).write_text(
            f'format = "f32-le"\nlayout = "channel-major"\n'
            f"fs_hz = {float(rec.fs_hz)!r}\nchannels = {rec.channels}\n"
            f"samples_per_channel = {rec.n_samples}\nscale = {float(scale)!r}\n"
            f"n_rows = {g.n_rows}\nn_cols = {g.n_cols}\n"
        )
    elif format == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"ch{i}" for i in range(rec.channels)])
            for row in data.T:
                w.writerow([repr(float(v)) for v in row])
    else:
        raise ValueError(f"unknown format {format!r}")
    if rec.ground_truth is not None:
        with _truth_path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "t_s"])
            for ch, ts in enumerate(rec.ground_truth.times):
                for t in ts:
                    w.writerow([ch, repr(float(t))])
    return path


def _load_truth(path: Path, channels: int) -> SpikeGroundTruth | None:
    tp = _truth_path(path)
    if not tp.exists():
        return None
    per = [[] for _ in range(channels)]
    with tp.open(newline="") as fh:
        for row in csv.DictReader(fh):
            per[int(row["channel"])].append(float(row["t_s"]))
    return SpikeGroundTruth(tuple(per))


def load_recording(
    path,
    format: str | None = None,
    fs_hz: float | None = None,
    geometry: ArrayGeometry | None = None,
    scale: float | None = None,
    channels: int | None = None,
) -> SampledRecording:
    """Load a raw ``.f32`` (with ``.hdr`` sidecar) or CSV recording.

    For raw files without a sidecar, ``fs_hz`` and ``channels`` must be given.
    Explicit arguments override header values.
    """
    path = Path(path)
    if not path.exists():
        raise RecordingLoadError(f"{path}: no such file")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "f32"
    if path.stat().st_size == 0:
        raise RecordingLoadError(f"{path}: empty file")
    header = {}
    if format == "f32":
        hp = _header_path(path)
        if hp.exists():
            try:
                header = load_toml_text(hp.read_text())
            except Exception as exc:
                raise RecordingLoadError(f"{hp}: malformed header ({exc})") from exc
        fs = fs_hz if fs_hz is not None else header.get("fs_hz")
        nch = channels if channels is not None else header.get("channels")
        if fs is None or nch is None:
            raise RecordingLoadError(f"{path}: fs_hz and channels required (no usable header)")
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % int(nch):
            raise RecordingLoadError(f"{path}: {raw.size} samples not divisible by {nch} channels")
        data = raw.reshape(int(nch), -1)
        spc = header.get("samples_per_channel")
        if spc is not None and data.shape[1] != int(spc):
            raise RecordingLoadError(f"{path}: length mismatch, header says {spc}, file has {data.shape[1]}")
    elif format == "csv":
        if fs_hz is None:
            raise RecordingLoadError("CSV recordings need fs_hz")
        fs = fs_hz
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if not head or any(h.strip() != f"ch{i}" for i, h in enumerate(head)):
                raise RecordingLoadError(f"{path}: header must be ch0..chN")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(head):
                    raise RecordingLoadError(f"{path}:{lineno}: expected {len(head)} columns, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise RecordingLoadError(f"{path}:{lineno}: {exc}") from exc
        if not rows:
            raise RecordingLoadError(f"{path}: no samples")
        data = np.array(rows, dtype=np.float64).T
    else:
        raise RecordingLoadError(f"unknown format {format!r}")
    if np.isnan(data).any():
        raise RecordingLoadError(f"{path}: NaN samples")
    sc = scale if scale is not None else header.get("scale", 1.0)
    data = data.astype(np.float64) * float(sc)
    if geometry is None and "n_rows" in header:
        geometry = ArrayGeometry(int(header["n_rows"]), int(header["n_cols"]))
    return SampledRecording(float(fs), data, geometry, _load_truth(path, data.shape[0]))


def stack_recordings(recs: Sequence[SampledRecording]) -> SampledRecording:
    fs = recs[0].fs_hz
    if any(r.fs_hz != fs for r in recs):
        raise ValueError("sampling rates differ")
    samples = np.vstack([r.samples for r in recs])
    truth = None
    if all(r.ground_truth is not None for r in recs):
        truth = SpikeGroundTruth(sum((r.ground_truth.times for r in recs), ()))
    return SampledRecording(fs, samples, None, truth)
