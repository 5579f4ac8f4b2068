"""Command-line entry point (``neurocomp``)."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from .adm import DualThresholdConfig, calibrate_threshold, encode_recording
from .arbiter import ArbiterConfig, arbitrate
from .event_filter import FilterConfig
from .packetizer import measure_bin_occupancy, measure_tdr, read_stream, stream_from_events, write_stream
from .pipeline import (DatasetSpec, PipelineConfig, emit_report, load_config, load_thresholds, run_pipeline,
                       save_thresholds)
from .rate_model import AXES, RateModelParams, SweepConfig, compression_ratios, sweep, tdr_theoretical, write_sweep_csv
from .reconstruction import remove_drift, reconstruct
from .signal_core import (ArrayGeometry, SampledRecording, SynthConfig, generate_synthetic, load_recording,
                          replicate_channels, save_recording)
from .spike_detection import DetectionConfig, calibrate_detection, detect, score_detections

THRESHOLD_SUFFIX = ".thresholds.json"


def _synth_args(p):
    p.add_argument("--sigma", type=float, default=0.05, help="noise s.d. relative to unit spike peak")
    p.add_argument("--rate", type=float, default=60.0, help="firing rate in Hz")
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--fs", type=float, default=24_000.0, help="sampling rate in Hz")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template", default="dog")


def _synth_cfg(a) -> SynthConfig:
    return SynthConfig(fs_hz=a.fs, duration_s=a.duration, firing_rate_hz=a.rate, noise_sigma=a.sigma,
                       template_id=a.template, seed=a.seed)


def _dual(a):
    if a.k1 is None and a.k2 is None:
        return None
    d = DualThresholdConfig()
    return DualThresholdConfig(a.k1 if a.k1 is not None else d.k1, a.k2 if a.k2 is not None else d.k2,
                               a.timer if a.timer is not None else d.timer_s)


def _adm_args(p):
    p.add_argument("--k", type=float, default=0.3, help="threshold factor of V_spike-max")
    p.add_argument("--k1", type=float, help="dual-threshold high factor")
    p.add_argument("--k2", type=float, help="dual-threshold low factor")
    p.add_argument("--timer", type=float, help="dual-threshold timer in seconds")
    p.add_argument("--refractory", type=float, default=0.0, help="seconds")
    p.add_argument("--calib", type=float, default=5.0, help="calibration segment in seconds")


def cmd_synth(a):
    rec, _ = generate_synthetic(_synth_cfg(a))
    if a.channels > 1:
        rec = replicate_channels(rec, a.channels)
    path = save_recording(rec, a.out, format=a.format)
    print(f"wrote {path} ({rec.channels} ch, {rec.n_samples} samples, {rec.ground_truth.total} spikes)")
    return 0


def cmd_encode(a):
    rec = load_recording(a.input, format=a.format, fs_hz=a.fs)
    dual = _dual(a)
    adm = calibrate_threshold(rec, a.k, calib_s=a.calib, refractory_s=a.refractory)
    trains = encode_recording(rec, adm, dual)
    events = arbitrate(trains, rec.geometry, ArbiterConfig(a.t_arb, a.fairness_seed))
    kw = {} if a.mode.upper() == "APM" else {"count_encoding": a.count_encoding}
    stream = stream_from_events(events, a.mode, rec.duration_s, **kw)
    out = write_stream(stream, a.out)
    save_thresholds(str(out) + THRESHOLD_SUFFIX, adm, dual)
    print(f"wrote {out}: {stream.label}, {len(stream)} packets, {measure_tdr(stream) / 1e6:.4f} Mbps")
    return 0


def cmd_reconstruct(a):
    stream = read_stream(a.stream)
    cfgs, dual = load_thresholds(a.thresholds or str(a.stream) + THRESHOLD_SUFFIX)
    steps = [(c, dual) for c in cfgs] if dual is not None else cfgs
    rec = reconstruct(stream, steps, channels=len(cfgs))
    if not a.keep_drift:
        rec = remove_drift(rec)
    out = save_recording(SampledRecording(rec.fs_hz, rec.samples, stream.geometry
                                          if stream.geometry.capacity >= len(cfgs) else None), a.out, format=a.format)
    print(f"wrote {out} ({rec.channels} ch)")
    return 0


def cmd_detect(a):
    rec = load_recording(a.input, format=a.format, fs_hz=a.fs)
    cfg = DetectionConfig(method=a.method, th_spd=a.threshold, tolerance_s=a.tolerance, neo_factor=a.neo_factor)
    ref = load_recording(a.reference, format=a.format, fs_hz=a.fs) if a.reference else rec
    truth = ref.ground_truth
    rows, tp = [], [0, 0, 0]
    for c in range(rec.channels):
        th = calibrate_detection(ref.samples[c], ref.fs_hz, cfg)
        det = detect(rec.samples[c], rec.fs_hz, cfg, th)
        rows += [(c, float(t)) for t in det]
        if truth is not None:
            s = score_detections(det, truth.times[c], cfg.tolerance_s)
            tp = [tp[0] + s.tp, tp[1] + s.fp, tp[2] + s.fn]
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "t_s"])
        w.writerows(rows)
    print(f"wrote {a.out}: {len(rows)} detections")
    if truth is not None:
        t, f, n = tp
        print(json.dumps({"TP": t, "FP": f, "FN": n,
                          "S": t / (t + n) if t + n else None,
                          "FDR": f / (t + f) if t + f else None,
                          "A": t / (t + f + n) if t + f + n else None}))
    return 0


def cmd_rates(a):
    geo = ArrayGeometry(a.rows, a.cols)
    p = RateModelParams(geo, f_neu=a.f_neu, n_ap=a.n_ap, r_noise=a.r_noise, b_adc=a.b_adc, n_spike=a.n_spike,
                        fs_hz=a.fs)
    out = {
        "tdr_fs": tdr_theoretical(p, "FULL", a.full_address_bits),
        "tdr_spk": tdr_theoretical(p, "SPDWOR"),
        "tdr_apm": tdr_theoretical(p, "APM"),
    }
    if a.alpha_b1 is not None:
        out["tdr_pcm1"] = tdr_theoretical(p.for_pcm(1, a.alpha_b1, a.count1), "PCM")
    if a.alpha_b4 is not None:
        out["tdr_pcm4"] = tdr_theoretical(p.for_pcm(4, a.alpha_b4, a.count4), "PCM")
    if len(out) == 5 and all(v > 0 for v in out.values()):
        out.update({k: v for k, v in compression_ratios(**out).as_row().items() if k.startswith("cr")})
    print(json.dumps(out, indent=1))
    return 0


def cmd_sweep(a):
    cfg = SweepConfig(synth=_synth_cfg(a), k=a.k, channels=a.array_channels, seeds=tuple(a.seeds))
    rows = sweep(a.axis, a.values, cfg)
    path = write_sweep_csv(rows, a.out)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _run_config(a) -> PipelineConfig:
    if a.config:
        cfg = load_config(a.config)
        if a.output:
            cfg = replace(cfg, output_dir=a.output)
        return cfg
    if a.input:
        ds = DatasetSpec(path=a.input, fs_hz=a.input_fs, channels=a.channels)
    else:
        ds = DatasetSpec(synthetic=_synth_cfg(a), channels=a.channels)
    dual = _dual(a)
    modes = tuple(a.modes) if a.modes else (("APM",) if dual else ("APM", "PCM1", "PCM2", "PCM4"))
    return PipelineConfig(
        dataset=ds, k=a.k, dual=dual, refractory_s=a.refractory, calib_s=a.calib, t_arb_ns=a.t_arb,
        fairness_seed=a.fairness_seed, modes=modes, detection=DetectionConfig(method=a.method),
        filter=FilterConfig() if a.filter else None, reference_mode=a.reference_mode,
        output_dir=a.output or "runs",
    )


def cmd_run(a):
    cfg = _run_config(a)
    report = run_pipeline(cfg)
    out = emit_report(report, cfg.output_dir)
    for row in report.fidelity:
        print(",".join(f"{k}={v}" for k, v in row.items()))
    print(f"report: {out}")
    return 0 if report.ok else 1


def cmd_inspect(a):
    s = read_stream(a.stream)
    info = {"mode": s.label, "rows": s.geometry.n_rows, "cols": s.geometry.n_cols, "fs_hz": s.fs_hz,
            "duration_s": s.duration_s, "packets": len(s), "pulses": s.n_pulses, "bits": s.total_bits,
            "tdr_bps": measure_tdr(s)}
    if s.mode == "PCM":
        info["alpha_b"] = measure_bin_occupancy(s)
    else:
        info["levels"] = sorted(set(np.unique(s.packets["level"]).tolist()))
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurocomp", description="Neuromorphic (delta-modulation + AER) "
                                 "compression simulator for multichannel neural recordings.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic recording")
    _synth_args(p)
    p.add_argument("--channels", type=int, default=1, help="replicate onto this many channels")
    p.add_argument("--format", choices=("f32", "csv"), default="f32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="recording -> .naer event stream")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("f32", "csv"))
    p.add_argument("--fs", type=float, help="sampling rate for CSV input")
    _adm_args(p)
    p.add_argument("--mode", default="APM", help="APM or PCM<n>")
    p.add_argument("--count-encoding", choices=("unary", "fixed"), default="unary")
    p.add_argument("--t-arb", type=int, default=10, help="arbitration time in ns")
    p.add_argument("--fairness-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("reconstruct", help=".naer stream -> recovered recording")
    p.add_argument("--stream", required=True)
    p.add_argument("--thresholds", help="thresholds JSON (default: sidecar next to the stream)")
    p.add_argument("--keep-drift", action="store_true", help="skip the drift-removal high-pass")
    p.add_argument("--format", choices=("f32", "csv"), default="f32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("detect", help="spike detection on a recording")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", help="recording used for threshold calibration and ground truth")
    p.add_argument("--format", choices=("f32", "csv"))
    p.add_argument("--fs", type=float)
    p.add_argument("--method", choices=("AT", "NEO"), default="AT")
    p.add_argument("--threshold", type=float)
    p.add_argument("--tolerance", type=float, default=0.5e-3)
    p.add_argument("--neo-factor", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("rates", help="evaluate the analytical data-rate model")
    p.add_argument("--rows", type=int, default=100)
    p.add_argument("--cols", type=int, default=100)
    p.add_argument("--fs", type=float, default=24_000.0)
    p.add_argument("--f-neu", type=float, default=60.0)
    p.add_argument("--n-ap", type=float, default=6.0)
    p.add_argument("--r-noise", type=float, default=20.0)
    p.add_argument("--b-adc", type=int, default=10)
    p.add_argument("--n-spike", type=float, default=48.0)
    p.add_argument("--alpha-b1", type=float)
    p.add_argument("--count1", type=float, default=2.0)
    p.add_argument("--alpha-b4", type=float)
    p.add_argument("--count4", type=float, default=3.0)
    p.add_argument("--full-address-bits", action="store_true")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("sweep", help="data-rate sweep over firing rate, noise or channel count")
    _synth_args(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--k", type=float, default=0.3)
    p.add_argument("--array-channels", type=int, default=10_000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run", help="full pipeline with CSV/JSON report")
    p.add_argument("--config", help="TOML or JSON pipeline config (overrides the flags below)")
    p.add_argument("--input", help="recording file instead of synthetic data")
    p.add_argument("--input-fs", type=float, help="sampling rate for CSV input")
    _synth_args(p)
    p.add_argument("--channels", type=int, default=1)
    _adm_args(p)
    p.add_argument("--modes", nargs="+")
    p.add_argument("--t-arb", type=int, default=10)
    p.add_argument("--fairness-seed", type=int, default=0)
    p.add_argument("--method", choices=("AT", "NEO"), default="AT")
    p.add_argument("--filter", action="store_true", help="apply the spike-density event filter")
    p.add_argument("--reference-mode", choices=("bandpass", "highpass", "raw"), default="bandpass")
    p.add_argument("--output", help="report root directory (default: runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inspect", help="summarize a .naer stream")
    p.add_argument("stream")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
