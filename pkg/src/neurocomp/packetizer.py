"""APM / PCM packetization, exact bit accounting, and the ``.naer`` stream format.

APM sends one ``(x, y, polarity)`` packet per pulse:
``1 + ceil(log2 N_r) + ceil(log2 N_c)`` bits.

PCM-n accumulates each channel's ON/OFF pulses in bins of ``n`` sample
intervals and sends only non-empty bins as ``(x, y, n_on, n_off)``. With the
default ``"unary"`` count encoding a bin costs ``n_on + n_off`` bits plus the
address; ``"fixed"`` spends ``count_bits`` bits on each of the two counts.

``.naer`` layout (little-endian)::

    magic "NAER" | version u8 | mode u8 | N_r u16 | N_c u16 | fs u32 |
    bin_width u16 | flags u8 | count_bits u8 | duration_ns u64
    APM record: t_ns u64, x u16, y u16, polarity i8
    PCM record: bin_index u32, x u16, y u16, n_on u16, n_off u16

APM polarity is stored as ``+-(1 + level)`` so dual-threshold level
annotations survive a round trip. Flags bit 0 selects fixed-width counts.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._timebase import NS_PER_S, ns_to_sample_floor
from .arbiter import AddressEventArray
from .signal_core import ArrayGeometry

__all__ = [
    "ApmPacket",
    "PcmBinPacket",
    "EventStream",
    "StreamFormatError",
    "packetize_apm",
    "packetize_pcm",
    "measure_tdr",
    "measure_bin_occupancy",
    "write_stream",
    "read_stream",
    "export_csv",
    "apm_bits_per_packet",
]

MAGIC = b"NAER"
VERSION = 1
MODE_APM, MODE_PCM = 0, 1
_HEADER = struct.Struct("<4sBBHHIHBBQ")

APM_DTYPE = np.dtype([("t_ns", "<i8"), ("x", "<u2"), ("y", "<u2"), ("polarity", "i1"), ("level", "u1")])
PCM_DTYPE = np.dtype([("bin_index", "<i8"), ("x", "<u2"), ("y", "<u2"), ("n_on", "<u2"), ("n_off", "<u2")])
_APM_REC = np.dtype([("t_ns", "<u8"), ("x", "<u2"), ("y", "<u2"), ("polarity", "i1")])
_PCM_REC = np.dtype([("bin_index", "<u4"), ("x", "<u2"), ("y", "<u2"), ("n_on", "<u2"), ("n_off", "<u2")])


class StreamFormatError(ValueError):
    pass


class ApmPacket(NamedTuple):
    x: int
    y: int
    polarity: int
    t_ns: int
    level: int = 0


class PcmBinPacket(NamedTuple):
    x: int
    y: int
    bin_index: int
    n_on: int
    n_off: int


def apm_bits_per_packet(geometry: ArrayGeometry) -> int:
    return 1 + geometry.address_bits


@dataclass(frozen=True, eq=False)
class EventStream:
    mode: str  # "APM" or "PCM"
    geometry: ArrayGeometry
    fs_hz: float
    packets: np.ndarray
    duration_s: float
    bin_width: int = 1
    count_encoding: str = "unary"
    count_bits: int = 8

    def __post_init__(self):
        if self.mode not in ("APM", "PCM"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.count_encoding not in ("unary", "fixed"):
            raise ValueError("count_encoding must be 'unary' or 'fixed'")
        if self.bin_width < 1:
            raise ValueError("bin_width must be >= 1")
        self.packets.setflags(write=False)

    @property
    def label(self) -> str:
        return "APM" if self.mode == "APM" else f"PCM{self.bin_width}"

    @property
    def bin_s(self) -> float:
        return self.bin_width / self.fs_hz

    @property
    def n_bins_per_channel(self) -> int:
        return int(np.ceil(round(self.duration_s * self.fs_hz, 6) / self.bin_width))

    def __len__(self):
        return self.packets.size

    def __iter__(self):
        p = self.packets
        if self.mode == "APM":
            for row in zip(p["x"].tolist(), p["y"].tolist(), p["polarity"].tolist(),
                           p["t_ns"].tolist(), p["level"].tolist()):
                yield ApmPacket(*row)
        else:
            for row in zip(p["x"].tolist(), p["y"].tolist(), p["bin_index"].tolist(),
                           p["n_on"].tolist(), p["n_off"].tolist()):
                yield PcmBinPacket(*row)

    def bits_per_packet(self) -> np.ndarray:
        addr = self.geometry.address_bits
        if self.mode == "APM":
            return np.full(self.packets.size, 1 + addr, np.int64)
        if self.count_encoding == "unary":
            return self.packets["n_on"].astype(np.int64) + self.packets["n_off"] + addr
        return np.full(self.packets.size, 2 * self.count_bits + addr, np.int64)

    @property
    def total_bits(self) -> int:
        return int(self.bits_per_packet().sum())

    @property
    def n_pulses(self) -> int:
        if self.mode == "APM":
            return int(self.packets.size)
        return int(self.packets["n_on"].sum(dtype=np.int64) + self.packets["n_off"].sum(dtype=np.int64))

    @property
    def channel(self) -> np.ndarray:
        return self.geometry.channel(self.packets["x"].astype(np.int64), self.packets["y"].astype(np.int64))


def _check_addresses(events: AddressEventArray, geometry: ArrayGeometry):
    d = events.data
    if d.size and (d["x"].max() >= geometry.n_cols or d["y"].max() >= geometry.n_rows):
        raise ValueError("event address outside geometry")


def packetize_apm(events: AddressEventArray, geometry: ArrayGeometry | None = None,
                  duration_s: float | None = None, fs_hz: float | None = None) -> EventStream:
    """One packet per pulse, in arbitrated time order."""
    geometry = geometry or events.geometry
    fs_hz = fs_hz or events.fs_hz
    _check_addresses(events, geometry)
    d = events.data
    if d.size > 1 and np.any(np.diff(d["t_ns"]) < 0):
        raise ValueError("events must be sorted by t_ns")
    p = np.empty(d.size, APM_DTYPE)
    for f in ("t_ns", "x", "y", "polarity", "level"):
        p[f] = d[f]
    if duration_s is None:
        duration_s = (int(d["t_ns"][-1]) + 1) / NS_PER_S if d.size else 0.0
    return EventStream("APM", geometry, float(fs_hz), p, float(duration_s))


def packetize_pcm(events: AddressEventArray, geometry: ArrayGeometry | None = None, n: int = 1,
                  fs_hz: float | None = None, duration_s: float | None = None,
                  count_encoding: str = "unary", count_bits: int = 8) -> EventStream:
    """Per-channel ON/OFF counts in bins of ``n`` sample intervals.

    An event belongs to the bin containing its (arbitrated) timestamp. Only
    non-empty bins become packets, ordered by (bin, y, x).
    """
    if n < 1:
        raise ValueError("bin width multiplier must be >= 1")
    geometry = geometry or events.geometry
    fs_hz = fs_hz or events.fs_hz
    _check_addresses(events, geometry)
    d = events.data
    if d.size and np.any(d["level"] != 0):
        raise ValueError("PCM cannot carry dual-threshold level annotations; use APM")
    bins = ns_to_sample_floor(d["t_ns"], fs_hz) // n
    ch = geometry.channel(d["x"].astype(np.int64), d["y"].astype(np.int64))
    key = bins * geometry.capacity + ch
    on = d["polarity"] > 0
    uniq, inv = np.unique(key, return_inverse=True)
    n_on = np.bincount(inv, weights=on, minlength=uniq.size).astype(np.int64)
    n_tot = np.bincount(inv, minlength=uniq.size)
    n_off = n_tot - n_on
    if count_encoding == "fixed" and uniq.size and max(n_on.max(), n_off.max()) >= (1 << count_bits):
        raise ValueError(f"bin count exceeds {count_bits}-bit field")
    if uniq.size and max(n_on.max(), n_off.max()) > 0xFFFF:
        raise ValueError("bin count exceeds 16-bit record field")
    p = np.empty(uniq.size, PCM_DTYPE)
    p["bin_index"] = uniq // geometry.capacity
    x, y = geometry.address(uniq % geometry.capacity)
    p["x"], p["y"] = x, y
    p["n_on"], p["n_off"] = n_on, n_off
    p = p[np.lexsort((p["x"], p["y"], p["bin_index"]))]
    if duration_s is None:
        duration_s = (int(p["bin_index"][-1]) + 1) * n / fs_hz if p.size else 0.0
    return EventStream("PCM", geometry, float(fs_hz), p, float(duration_s), n, count_encoding, count_bits)


def measure_tdr(stream: EventStream) -> float:
    """Measured transmission data rate in bits per second."""
    if stream.packets.size == 0:
        return 0.0
    if stream.duration_s <= 0:
        raise ValueError("stream duration must be positive")
    return stream.total_bits / stream.duration_s


def measure_bin_occupancy(stream: EventStream, channels: int | None = None) -> float:
    """Fraction of (channel, bin) cells that carried at least one pulse."""
    if stream.mode != "PCM":
        raise ValueError("occupancy undefined for APM streams")
    channels = channels or stream.geometry.capacity
    total = channels * stream.n_bins_per_channel
    return stream.packets.size / total if total else 0.0


# ---------------------------------------------------------------------------
# serialization

def _to_bytes(stream: EventStream) -> bytes:
    fs = float(stream.fs_hz)
    if not fs.is_integer() or not 0 < fs < 2**32:
        raise StreamFormatError("fs must be an integer number of Hz for .naer")
    flags = 1 if stream.count_encoding == "fixed" else 0
    dur_ns = int(round(stream.duration_s * NS_PER_S))
    head = _HEADER.pack(MAGIC, VERSION, MODE_APM if stream.mode == "APM" else MODE_PCM,
                        stream.geometry.n_rows, stream.geometry.n_cols, int(fs),
                        stream.bin_width, flags, stream.count_bits, dur_ns)
    p = stream.packets
    if stream.mode == "APM":
        rec = np.empty(p.size, _APM_REC)
        rec["t_ns"] = p["t_ns"]
        rec["x"], rec["y"] = p["x"], p["y"]
        rec["polarity"] = p["polarity"] * (1 + p["level"].astype(np.int8))
    else:
        rec = np.empty(p.size, _PCM_REC)
        for f in _PCM_REC.names:
            rec[f] = p[f]
    return head + rec.tobytes()


def write_stream(stream: EventStream, path) -> Path:
    path = Path(path)
    path.write_bytes(_to_bytes(stream))
    return path


def read_stream(path) -> EventStream:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise StreamFormatError("truncated header")
    magic, version, mode, n_rows, n_cols, fs, bw, flags, cbits, dur_ns = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    if mode not in (MODE_APM, MODE_PCM):
        raise StreamFormatError(f"unknown mode byte {mode}")
    body = memoryview(buf)[_HEADER.size:]
    rec_t = _APM_REC if mode == MODE_APM else _PCM_REC
    if len(body) % rec_t.itemsize:
        raise StreamFormatError("truncated record")
    rec = np.frombuffer(body, rec_t)
    geometry = ArrayGeometry(n_rows, n_cols)
    if mode == MODE_APM:
        p = np.empty(rec.size, APM_DTYPE)
        p["t_ns"] = rec["t_ns"]
        p["x"], p["y"] = rec["x"], rec["y"]
        mag = np.abs(rec["polarity"])
        if rec.size and (mag.min() < 1 or mag.max() > 2):
            raise StreamFormatError("invalid polarity byte")
        p["polarity"] = np.sign(rec["polarity"])
        p["level"] = mag - 1
        return EventStream("APM", geometry, float(fs), p, dur_ns / NS_PER_S, bw,
                           "fixed" if flags & 1 else "unary", cbits)
    p = np.empty(rec.size, PCM_DTYPE)
    for f in _PCM_REC.names:
        p[f] = rec[f]
    return EventStream("PCM", geometry, float(fs), p, dur_ns / NS_PER_S, bw,
                       "fixed" if flags & 1 else "unary", cbits)


def export_csv(stream: EventStream, path) -> Path:
    """One packet per row, for inspection."""
    path = Path(path)
    names = ["t_ns", "x", "y", "polarity", "level"] if stream.mode == "APM" else list(_PCM_REC.names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["bits"])
        bits = stream.bits_per_packet()
        cols = [stream.packets[n].tolist() for n in names]
        for i, row in enumerate(zip(*cols)):
            w.writerow(list(row) + [int(bits[i])])
    return path


def stream_from_events(events: AddressEventArray, label: str, duration_s: float, **kw) -> EventStream:
    """Packetize by mode label: ``"APM"`` or ``"PCM<n>"``."""
    label = label.upper()
    if label == "APM":
        return packetize_apm(events, duration_s=duration_s)
    if label.startswith("PCM"):
        return packetize_pcm(events, n=int(label[3:] or 1), duration_s=duration_s, **kw)
    raise ValueError(f"unknown mode {label!r}")
