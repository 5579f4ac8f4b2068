"""End-to-end pipeline: dataset -> calibrate -> encode -> arbitrate -> packetize
-> (filter) -> reconstruct -> drift removal -> detect -> score -> rates.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from ._toml import load_toml_file
from .adm import AdmConfig, DualThresholdConfig, calibrate_threshold, encode_recording, level_steps
from .arbiter import ArbiterConfig, arbitrate, collision_stats
from .event_filter import FilterConfig, filter_spike_events
from .packetizer import measure_bin_occupancy, measure_tdr, stream_from_events
from .rate_model import SWEEP_COLUMNS, RateModelParams, tdr_theoretical
from .reconstruction import (DEFAULT_CUTOFF_HZ, REFERENCE_MODES, accumulate_steps, bandpass, channel_updates,
                             highpass, pearson_cc, rmse_normalized)
from .signal_core import (ArrayGeometry, SampledRecording, SynthConfig, generate_synthetic, load_recording,
                          replicate_channels)
from .spike_detection import DetectionConfig, calibrate_detection, detect, score_detections

__all__ = [
    "DatasetSpec",
    "PipelineConfig",
    "PipelineError",
    "RunReport",
    "run_pipeline",
    "emit_report",
    "load_config",
    "save_thresholds",
    "load_thresholds",
    "FIDELITY_COLUMNS",
    "DETECTION_COLUMNS",
    "RATES_COLUMNS",
    "SPARSITY_COLUMNS",
    "COLLISION_COLUMNS",
]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {err}")
        self.stage = stage
        self.__cause__ = err


@dataclass(frozen=True)
class DatasetSpec:
    """Exactly one of ``synthetic`` or ``path``."""

    synthetic: SynthConfig | None = None
    path: str | None = None
    format: str | None = None
    fs_hz: float | None = None
    channels: int = 1  # replication count for single-channel sources
    n_rows: int | None = None
    n_cols: int | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.path is None):
            raise ValueError("dataset needs exactly one of 'synthetic' or 'path'")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if (self.n_rows is None) != (self.n_cols is None):
            raise ValueError("give both n_rows and n_cols or neither")

    @property
    def label(self) -> str:
        if self.synthetic is not None:
            return f"synthetic(sigma={self.synthetic.noise_sigma:g})"
        return Path(self.path).stem

    @property
    def geometry(self) -> ArrayGeometry | None:
        return ArrayGeometry(self.n_rows, self.n_cols) if self.n_rows is not None else None


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetSpec
    k: float = 0.3
    dual: DualThresholdConfig | None = None
    refractory_s: float = 0.0
    calib_s: float = 5.0
    default_v_spike_max: float = 1.0
    t_arb_ns: int = 10
    fairness_seed: int = 0
    modes: tuple = ("APM", "PCM1", "PCM2", "PCM4")
    count_encoding: str = "unary"
    count_bits: int = 8
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    filter: FilterConfig | None = None
    reference_mode: str = "bandpass"
    drift_cutoff_hz: float = DEFAULT_CUTOFF_HZ
    b_adc: int = 10
    spdwor_window_s: float = 2e-3
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(m.upper() for m in self.modes))
        for m in self.modes:
            if m != "APM" and not (m.startswith("PCM") and m[3:].isdigit() and int(m[3:]) >= 1):
                raise ValueError(f"invalid mode {m!r}")
        if self.dual is not None and any(m != "APM" for m in self.modes):
            raise ValueError("dual-threshold events can only be sent in APM mode")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"reference_mode must be one of {REFERENCE_MODES}")
        if self.k <= 0:
            raise ValueError("k must be positive")

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modes"] = list(self.modes)
        ds = d["dataset"]
        if ds["synthetic"] is not None:
            ds["synthetic"]["spike_duration_ms"] = list(ds["synthetic"]["spike_duration_ms"])
        return _drop_none(d)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        ds = dict(d.pop("dataset"))
        if "synthetic" in ds:
            syn = dict(ds["synthetic"])
            if "spike_duration_ms" in syn:
                syn["spike_duration_ms"] = tuple(syn["spike_duration_ms"])
            ds["synthetic"] = SynthConfig(**syn)
        kw = {"dataset": DatasetSpec(**ds)}
        if "dual" in d:
            kw["dual"] = DualThresholdConfig(**d.pop("dual"))
        if "detection" in d:
            kw["detection"] = DetectionConfig(**d.pop("detection"))
        if "filter" in d:
            kw["filter"] = FilterConfig(**d.pop("filter"))
        if "modes" in d:
            kw["modes"] = tuple(d.pop("modes"))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def load_config(path) -> PipelineConfig:
    """Read a TOML or JSON pipeline config."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
    else:
        data = load_toml_file(path)
    return PipelineConfig.from_dict(data)


# ---------------------------------------------------------------------------
# thresholds sidecar (used by the CLI to reconstruct a stored stream)

def save_thresholds(path, cfgs: list[AdmConfig], dual: DualThresholdConfig | None = None) -> Path:
    path = Path(path)
    payload = {
        "channels": [{"th_on": c.th_on, "th_off": c.th_off, "total_gain": c.total_gain,
                      "v_spike_max": c.v_spike_max} for c in cfgs],
        "dual": dataclasses.asdict(dual) if dual is not None else None,
    }
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_thresholds(path):
    payload = json.loads(Path(path).read_text())
    cfgs = [AdmConfig(**c) for c in payload["channels"]]
    dual = DualThresholdConfig(**payload["dual"]) if payload.get("dual") else None
    return cfgs, dual


# ---------------------------------------------------------------------------
# report

FIDELITY_COLUMNS = ("dataset", "channels", "mode", "RMSE", "CC", "A", "S", "FDR", "DR_Mbps")
DETECTION_COLUMNS = ("dataset", "channels", "mode", "method", "TP", "FP", "FN", "A", "S", "FDR")
RATES_COLUMNS = ("dataset", "channels", "tdr_fs", "tdr_spk", "tdr_apm", "tdr_pcm1", "tdr_pcm4",
                 "cr1", "cr2", "cr3", "cr4", "filter_gain")
SPARSITY_COLUMNS = ("dataset", "channels", "mode", "alpha_b", "mean_count")
COLLISION_COLUMNS = ("dataset", "channels", "n_events", "n_instants", "n_collision_instants",
                     "n_colliding_events", "mean_colliding_channels", "sd_colliding_channels",
                     "min_group", "max_group", "spike_fraction", "max_delay_ns")


@dataclass
class RunReport:
    config: dict
    versions: dict
    dataset: str
    channels: int
    fidelity: list = field(default_factory=list)
    detection: list = field(default_factory=list)
    rates: dict = field(default_factory=dict)
    sparsity: list = field(default_factory=list)
    collisions: dict = field(default_factory=dict)
    sweeps: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.stages.values())

    def row(self, table: str, mode: str) -> dict:
        for r in getattr(self, table):
            if r["mode"] == mode:
                return r
        raise KeyError(mode)

    def to_dict(self) -> dict:
        return {
            "config": self.config, "versions": self.versions, "dataset": self.dataset,
            "channels": self.channels, "fidelity": self.fidelity, "detection": self.detection,
            "rates": self.rates, "sparsity": self.sparsity, "collisions": self.collisions,
            "sweeps": self.sweeps, "stages": self.stages, "skipped": self.skipped,
        }


def _versions() -> dict:
    import numba
    import scipy
    return {"neurocomp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _nan_to_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _stage(report: RunReport, name: str, fn, *a, **kw):
    try:
        out = fn(*a, **kw)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage label
        report.stages[name] = f"error: {e}"
        raise PipelineError(name, e) from e
    report.stages[name] = "ok"
    return out


def _load(spec: DatasetSpec) -> SampledRecording:
    if spec.synthetic is not None:
        rec, _ = generate_synthetic(spec.synthetic)
    else:
        rec = load_recording(spec.path, format=spec.format, fs_hz=spec.fs_hz,
                             geometry=spec.geometry if spec.channels == 1 else None)
    if spec.channels > 1:
        rec = replicate_channels(rec, spec.channels, spec.geometry)
    elif spec.geometry is not None and rec.geometry != spec.geometry:
        rec = SampledRecording(rec.fs_hz, rec.samples, spec.geometry, rec.ground_truth)
    return rec


def _key(row: np.ndarray, *arrays) -> tuple:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return row.__array_interface__["data"][0], row.strides, h.hexdigest()


class _Evaluator:
    """Per-channel reconstruction, scoring and detection with reuse across identical channels."""

    def __init__(self, rec: SampledRecording, cfg: PipelineConfig):
        self.rec, self.cfg = rec, cfg
        self._ref = {}
        self._th = {}
        self._cache = {}

    def _reference(self, c):
        row = self.rec.samples[c]
        k = (row.__array_interface__["data"][0], row.strides)
        if k not in self._ref:
            mode = self.cfg.reference_mode
            if mode == "raw":
                ref = np.asarray(row, dtype=np.float64)
            elif mode == "highpass":
                ref = highpass(row, self.rec.fs_hz, self.cfg.drift_cutoff_hz)
            else:
                ref = bandpass(row, self.rec.fs_hz)
            th = calibrate_detection(row, self.rec.fs_hz, self.cfg.detection)
            self._ref = {k: (ref, th)}
        return self._ref[k]

    def channel(self, c, idx, inc):
        row = self.rec.samples[c]
        key = _key(row, idx, inc)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        ref, th = self._reference(c)
        series = accumulate_steps(idx, inc, self.rec.n_samples)
        series = highpass(series, self.rec.fs_hz, self.cfg.drift_cutoff_hz)
        try:
            r = rmse_normalized(ref, series)
        except ValueError:
            r = math.nan
        try:
            cc = pearson_cc(ref, series)
        except ValueError:
            cc = math.nan
        det = detect(series, self.rec.fs_hz, self.cfg.detection, th)
        out = (r, cc, det)
        self._cache[key] = out
        return out


def _score_mode(rec, stream, steps, cfg: PipelineConfig):
    ev = _Evaluator(rec, cfg)
    rm, cc = [], []
    tp = fp = fn = 0
    truth = rec.ground_truth
    for c, idx, inc in channel_updates(stream, steps, rec.channels):
        r, k, det = ev.channel(c, idx, inc)
        rm.append(r)
        cc.append(k)
        if truth is not None:
            s = score_detections(det, truth.times[c], cfg.detection.tolerance_s)
            tp, fp, fn = tp + s.tp, fp + s.fp, fn + s.fn
    rm, cc = np.asarray(rm), np.asarray(cc)
    mean = lambda a: float(np.nanmean(a)) if np.isfinite(a).any() else math.nan  # noqa: E731
    return mean(rm), mean(cc), (tp, fp, fn) if truth is not None else None


def _ratio(a, b):
    return a / b if b else math.nan


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    report = RunReport(cfg.to_dict(), _versions(), cfg.dataset.label, 0)
    rec = _stage(report, "dataset", _load, cfg.dataset)
    report.channels = rec.channels
    adm = _stage(report, "calibrate", calibrate_threshold, rec, cfg.k, calib_s=cfg.calib_s,
                 default_v_spike_max=cfg.default_v_spike_max, allow_flat=True, refractory_s=cfg.refractory_s)
    trains = _stage(report, "encode", encode_recording, rec, adm, cfg.dual)
    events = _stage(report, "arbitrate", arbitrate, trains, rec.geometry,
                    ArbiterConfig(cfg.t_arb_ns, cfg.fairness_seed))

    def _collisions():
        st = collision_stats(events, rec.ground_truth, rec.fs_hz)
        row = st.as_row()
        row["max_delay_ns"] = int(events.delay_ns.max()) if len(events) else 0
        return row
    report.collisions = {k: _nan_to_none(v) for k, v in _stage(report, "collisions", _collisions).items()}

    gain = None
    if cfg.filter is not None:
        events, gain = _stage(report, "filter", filter_spike_events, events, cfg.filter)
    steps = [(a, cfg.dual) for a in adm] if cfg.dual is not None else [level_steps(a) for a in adm]
    steps = np.stack([s if isinstance(s, np.ndarray) else level_steps(*s) for s in steps])

    dataset, n = report.dataset, rec.channels
    tdr = {}
    for mode in cfg.modes:
        kw = {} if mode == "APM" else {"count_encoding": cfg.count_encoding, "count_bits": cfg.count_bits}
        stream = _stage(report, f"packetize:{mode}", stream_from_events, events, mode, rec.duration_s, **kw)
        tdr[mode] = measure_tdr(stream)
        if stream.mode == "PCM":
            p = stream.packets
            mean_count = float((p["n_on"].astype(np.int64) + p["n_off"]).mean()) if p.size else math.nan
            report.sparsity.append({"dataset": dataset, "channels": n, "mode": mode,
                                    "alpha_b": measure_bin_occupancy(stream, n),
                                    "mean_count": _nan_to_none(mean_count)})
        rmse, cc, counts = _stage(report, f"evaluate:{mode}", _score_mode, rec, stream, steps, cfg)
        row = {"dataset": dataset, "channels": n, "mode": mode, "RMSE": _nan_to_none(rmse),
               "CC": _nan_to_none(cc), "A": None, "S": None, "FDR": None, "DR_Mbps": tdr[mode] / 1e6}
        det_row = {"dataset": dataset, "channels": n, "mode": mode, "method": cfg.detection.method,
                   "TP": None, "FP": None, "FN": None, "A": None, "S": None, "FDR": None}
        if counts is None:
            report.skipped.append(f"detection scoring ({mode}): no ground truth")
        else:
            tp, fp, fn = counts
            a, s, f = _ratio(tp, tp + fp + fn), _ratio(tp, tp + fn), _ratio(fp, tp + fp)
            det_row.update(TP=tp, FP=fp, FN=fn, A=_nan_to_none(a), S=_nan_to_none(s), FDR=_nan_to_none(f))
            row.update(A=det_row["A"], S=det_row["S"], FDR=det_row["FDR"])
            for name, v in (("A", a), ("S", s), ("FDR", f)):
                if not math.isfinite(v):
                    report.skipped.append(f"{name} ({mode}): undefined")
        if rmse != rmse or cc != cc:
            report.skipped.append(f"fidelity ({mode}): undefined for a constant signal")
        report.fidelity.append(row)
        report.detection.append(det_row)

    def _rates():
        f_neu = rec.ground_truth.total / (n * rec.duration_s) if rec.ground_truth is not None else math.nan
        base = RateModelParams(rec.geometry, f_neu=0.0 if f_neu != f_neu else f_neu, b_adc=cfg.b_adc,
                               fs_hz=rec.fs_hz, n_spike=round(cfg.spdwor_window_s * rec.fs_hz), channels=n)
        tdr_fs = tdr_theoretical(base, "FULL")
        tdr_spk = tdr_theoretical(base, "SPDWOR") if f_neu == f_neu else math.nan
        row = {"dataset": dataset, "channels": n, "tdr_fs": tdr_fs, "tdr_spk": tdr_spk,
               "tdr_apm": tdr.get("APM", math.nan), "tdr_pcm1": tdr.get("PCM1", math.nan),
               "tdr_pcm4": tdr.get("PCM4", math.nan), "filter_gain": gain}
        for i, k in enumerate(("tdr_spk", "tdr_apm", "tdr_pcm1", "tdr_pcm4"), start=1):
            row[f"cr{i}"] = _ratio(tdr_fs, row[k]) if row[k] == row[k] else math.nan
        return {k: _nan_to_none(v) for k, v in row.items()}
    report.rates = _stage(report, "rates", _rates)
    return report


# ---------------------------------------------------------------------------
# emission

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _run_dir(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for i in range(10_000):
        d = root / (stamp if i == 0 else f"{stamp}-{i}")
        try:
            d.mkdir()
            return d
        except FileExistsError:
            continue
    raise FileExistsError(f"could not create a fresh run directory under {root}")


def emit_report(report: RunReport, out_dir=None, formats=("csv", "json")) -> Path:
    """Write report tables into a new timestamped subdirectory; returns it."""
    root = Path(out_dir if out_dir is not None else report.config.get("output_dir", "runs"))
    d = _run_dir(root)
    if "csv" in formats:
        _write_csv(d / "fidelity.csv", FIDELITY_COLUMNS, report.fidelity)
        _write_csv(d / "detection.csv", DETECTION_COLUMNS, report.detection)
        _write_csv(d / "rates.csv", RATES_COLUMNS, [report.rates] if report.rates else [])
        _write_csv(d / "sparsity.csv", SPARSITY_COLUMNS, report.sparsity)
        coll = dict(report.collisions, dataset=report.dataset, channels=report.channels) if report.collisions else None
        _write_csv(d / "collisions.csv", COLLISION_COLUMNS, [coll] if coll else [])
        _write_csv(d / "sweeps.csv", SWEEP_COLUMNS, report.sweeps)
    if "json" in formats:
        (d / "summary.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        (d / "config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    return d
