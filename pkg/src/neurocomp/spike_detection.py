"""Spike detection (absolute threshold, nonlinear energy operator) and scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DetectionConfig",
    "DetectionResult",
    "ChannelScore",
    "neo",
    "at_threshold",
    "neo_threshold",
    "calibrate_detection",
    "detect_at",
    "detect_neo",
    "detect",
    "score_detections",
    "score_channels",
]


@dataclass(frozen=True)
class DetectionConfig:
    method: str = "AT"
    th_spd: float | None = None  # None: derive from the calibration segment
    tolerance_s: float = 0.5e-3
    neo_factor: float = 8.0
    at_factor: float = 4.0
    calib_s: float = 5.0
    # crossings are ignored for this long after a detection; None means the
    # full tolerance window (2 * tolerance_s)
    dead_time_s: float | None = None
    # move each detection to the feature maximum inside its dead time
    align_peak: bool = False

    def __post_init__(self):
        if self.method not in ("AT", "NEO"):
            raise ValueError("method must be 'AT' or 'NEO'")
        if self.tolerance_s <= 0:
            raise ValueError("tolerance_s must be positive")
        if self.dead_time_s is not None and self.dead_time_s <= 0:
            raise ValueError("dead_time_s must be positive")
        if self.neo_factor <= 0 or self.at_factor <= 0:
            raise ValueError("threshold factors must be positive")

    @property
    def lockout_s(self) -> float:
        return 2 * self.tolerance_s if self.dead_time_s is None else self.dead_time_s


def neo(x) -> np.ndarray:
    """Teager energy ``x[n]^2 - x[n-1] x[n+1]``; the two end samples are 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    if x.size >= 3:
        out[1:-1] = x[1:-1] ** 2 - x[:-2] * x[2:]
    return out


def _calib(x, fs_hz, calib_s):
    return x[: max(1, int(round(calib_s * fs_hz)))]


def at_threshold(x, fs_hz: float, cfg: DetectionConfig = DetectionConfig()) -> float:
    """``at_factor`` times the median/0.6745 noise estimate."""
    seg = _calib(np.asarray(x, dtype=np.float64), fs_hz, cfg.calib_s)
    return cfg.at_factor * float(np.median(np.abs(seg - np.median(seg)))) / 0.6745


def neo_threshold(x, fs_hz: float, cfg: DetectionConfig = DetectionConfig()) -> float:
    seg = _calib(np.asarray(x, dtype=np.float64), fs_hz, cfg.calib_s)
    return cfg.neo_factor * float(np.median(neo(seg)))


def calibrate_detection(x, fs_hz: float, cfg: DetectionConfig = DetectionConfig()) -> float:
    if cfg.th_spd is not None:
        return float(cfg.th_spd)
    return at_threshold(x, fs_hz, cfg) if cfg.method == "AT" else neo_threshold(x, fs_hz, cfg)


def _crossings(feature: np.ndarray, th: float, cfg: DetectionConfig, fs_hz: float) -> np.ndarray:
    """Sample indices of detections: upward crossings separated by the dead time."""
    above = feature >= th
    up = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    if th <= 0 or up.size == 0:
        return np.empty(0, np.int64)
    dead = max(1, int(round(cfg.lockout_s * fs_hz)))
    keep = []
    nxt = -1
    for i in up.tolist():
        if i >= nxt:
            keep.append(i)
            nxt = i + dead
    idx = np.asarray(keep, dtype=np.int64)
    if cfg.align_peak:
        idx = np.array([i + int(np.argmax(feature[i:i + dead])) for i in idx.tolist()], dtype=np.int64)
    return idx


def detect_at(x, fs_hz: float, cfg: DetectionConfig = DetectionConfig(), threshold: float | None = None) -> np.ndarray:
    """Spike times (s) from crossings of ``|x|`` over the threshold."""
    x = np.asarray(x, dtype=np.float64)
    th = threshold if threshold is not None else (cfg.th_spd if cfg.th_spd is not None else at_threshold(x, fs_hz, cfg))
    return _crossings(np.abs(x), th, cfg, fs_hz) / fs_hz


def detect_neo(x, fs_hz: float, cfg: DetectionConfig = DetectionConfig(method="NEO"),
               threshold: float | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    psi = neo(x)
    th = threshold if threshold is not None else (cfg.th_spd if cfg.th_spd is not None else neo_threshold(x, fs_hz, cfg))
    return _crossings(psi, th, cfg, fs_hz) / fs_hz


def detect(x, fs_hz: float, cfg: DetectionConfig, threshold: float | None = None) -> np.ndarray:
    if cfg.method == "AT":
        return detect_at(x, fs_hz, cfg, threshold)
    return detect_neo(x, fs_hz, cfg, threshold)


# ---------------------------------------------------------------------------
# scoring

@dataclass(frozen=True)
class ChannelScore:
    tp: int
    fp: int
    fn: int

    @property
    def sensitivity(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else float("nan")

    @property
    def fdr(self) -> float:
        d = self.tp + self.fp
        return self.fp / d if d else float("nan")

    @property
    def accuracy(self) -> float:
        d = self.tp + self.fp + self.fn
        return self.tp / d if d else float("nan")


@dataclass(frozen=True)
class DetectionResult:
    detections: tuple
    per_channel: tuple
    matches: tuple = field(default=(), repr=False)

    @property
    def total(self) -> ChannelScore:
        return ChannelScore(
            sum(s.tp for s in self.per_channel),
            sum(s.fp for s in self.per_channel),
            sum(s.fn for s in self.per_channel),
        )

    @property
    def tp(self):
        return self.total.tp

    @property
    def fp(self):
        return self.total.fp

    @property
    def fn(self):
        return self.total.fn

    @property
    def sensitivity(self) -> float:
        return self.total.sensitivity

    @property
    def fdr(self) -> float:
        return self.total.fdr

    @property
    def accuracy(self) -> float:
        return self.total.accuracy


def _match(det: np.ndarray, truth: np.ndarray, tol: float):
    """Greedy one-to-one matching, closest pairs first."""
    if det.size == 0 or truth.size == 0:
        return []
    lo = np.searchsorted(truth, det - tol, side="left")
    hi = np.searchsorted(truth, det + tol, side="right")
    di, tj = [], []
    for i in np.flatnonzero(hi > lo).tolist():
        for j in range(lo[i], hi[i]):
            di.append(i)
            tj.append(j)
    if not di:
        return []
    di = np.asarray(di)
    tj = np.asarray(tj)
    dist = np.abs(det[di] - truth[tj])
    order = np.lexsort((tj, di, dist))
    used_d = np.zeros(det.size, bool)
    used_t = np.zeros(truth.size, bool)
    pairs = []
    for k in order.tolist():
        i, j = di[k], tj[k]
        if not used_d[i] and not used_t[j]:
            used_d[i] = used_t[j] = True
            pairs.append((int(i), int(j)))
    return pairs


def score_detections(detections, truth, tolerance_s: float = 0.5e-3) -> ChannelScore:
    """TP/FP/FN for one channel with a +-tolerance window."""
    det = np.sort(np.asarray(detections, dtype=np.float64))
    tru = np.sort(np.asarray(truth, dtype=np.float64))
    tp = len(_match(det, tru, tolerance_s))
    return ChannelScore(tp, det.size - tp, tru.size - tp)


def score_channels(detections, truths, tolerance_s: float = 0.5e-3) -> DetectionResult:
    """Score per channel; aggregate metrics pool TP/FP/FN over channels."""
    if len(detections) != len(truths):
        raise ValueError("detections and ground truth differ in channel count")
    scores = tuple(score_detections(d, t, tolerance_s) for d, t in zip(detections, truths))
    return DetectionResult(tuple(np.asarray(d) for d in detections), scores)
