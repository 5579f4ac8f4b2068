"""End-to-end acceptance criteria.

Each test records one PASS/FAIL/SKIP line that is printed in the terminal
summary under "acceptance criteria". Run on its own with

    pytest tests/test_acceptance.py -v
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from neurocomp.adm import DualThresholdConfig, calibrate_threshold, encode_recording
from neurocomp.arbiter import arbitrate, merge_ideal
from neurocomp.event_filter import FilterConfig
from neurocomp.packetizer import packetize_apm, packetize_pcm, read_stream, stream_from_events, write_stream
from neurocomp.pipeline import DatasetSpec, PipelineConfig, run_pipeline
from neurocomp.rate_model import RateModelParams, ValidationConfig, compression_ratios, tdr_theoretical, validate_model
from neurocomp.reconstruction import as_step_table, reconstruct, stream_fidelity
from neurocomp.signal_core import (
    ArrayGeometry,
    SampledRecording,
    SynthConfig,
    generate_synthetic,
    replicate_channels,
    stack_recordings,
)
from neurocomp.spike_detection import score_detections

SIGMAS = (0.05, 0.1, 0.15, 0.2)
SEEDS = tuple(range(10))
PCM_MODES = ("PCM1", "PCM2", "PCM4")


def verdict(record, n, title, checks: dict, detail: str):
    ok = all(checks.values())
    record(n, title, ok, detail)
    failed = [k for k, v in checks.items() if not v]
    assert not failed, f"failed: {failed} ({detail})"


def synth_100x100(sigma, seed):
    return DatasetSpec(synthetic=SynthConfig(noise_sigma=sigma, seed=seed), n_rows=100, n_cols=100)


@pytest.fixture(scope="module")
def grid():
    """Pipeline reports for every noise level and seed, one channel on a 100x100 array."""
    return {s: [run_pipeline(PipelineConfig(dataset=synth_100x100(s, i))) for i in SEEDS] for s in SIGMAS}


def median(reports, table, mode, key):
    return float(np.median([r.row(table, mode)[key] for r in reports]))


# ---------------------------------------------------------------- 1

@pytest.mark.slow
def test_c01_rate_model_matches_simulation(acceptance_record):
    t0 = time.perf_counter()
    worst = {"APM": 0.0, "PCM1": 0.0}
    control = []
    for sigma in SIGMAS:
        parts = [generate_synthetic(SynthConfig(noise_sigma=sigma, seed=100 + c))[0] for c in range(100)]
        stacked = stack_recordings(parts)
        rec = SampledRecording(stacked.fs_hz, stacked.samples, ArrayGeometry(10, 10), stacked.ground_truth)
        res = validate_model(rec)
        for m in worst:
            worst[m] = max(worst[m], res.rel_error[m])
        control.append(validate_model(rec, ValidationConfig(f_neu_scale=2.0)).rel_error["APM"])
    elapsed = time.perf_counter() - t0
    detail = (f"max rel err APM {worst['APM']:.4f}, PCM1 {worst['PCM1']:.4f}; "
              f"2x f_neu control min err {min(control):.3f}; {elapsed:.0f} s")
    verdict(acceptance_record, 1, "TDR model within 5%", {
        "apm": worst["APM"] <= 0.05, "pcm1": worst["PCM1"] <= 0.05,
        "control": min(control) > 0.05, "runtime": elapsed < 120}, detail)


# ---------------------------------------------------------------- 2

def test_c02_full_sample_baseline(acceptance_record):
    p = RateModelParams(ArrayGeometry(100, 100), b_adc=10, fs_hz=30_000.0)
    tdr = tdr_theoretical(p, "FULL")
    verdict(acceptance_record, 2, "full-sample baseline", {"exact": tdr == 3e9}, f"{tdr / 1e9:g} Gbps")


# ---------------------------------------------------------------- 3

@pytest.mark.slow
def test_c03_lossless_arbitration(acceptance_record):
    t0 = time.perf_counter()
    rec1, _ = generate_synthetic(SynthConfig(noise_sigma=0.1, seed=0))
    rec = replicate_channels(rec1, 1000)
    adm = calibrate_threshold(rec, 0.3)
    trains = encode_recording(rec, adm)
    n_in = sum(len(t) for t in trains)
    t_arb = 10
    ev = arbitrate(trains, rec.geometry)
    _, inv, counts = np.unique(ev.data["ideal_t_ns"], return_inverse=True, return_counts=True)
    bound_ok = bool(np.all(ev.delay_ns <= (counts[inv] - 1) * t_arb))
    with_arb = stream_fidelity(rec, packetize_apm(ev, duration_s=rec.duration_s), adm).rmse_mean
    ideal = merge_ideal(trains, rec.geometry)
    without = stream_fidelity(rec, packetize_apm(ideal, duration_s=rec.duration_s), adm).rmse_mean
    rel = abs(with_arb - without) / without
    elapsed = time.perf_counter() - t0
    detail = (f"{len(ev)}/{n_in} events, max delay {int(ev.delay_ns.max())} ns, "
              f"RMSE {with_arb:.5f} vs {without:.5f} (rel {rel:.2e}); {elapsed:.0f} s")
    verdict(acceptance_record, 3, "lossless arbitration (1000 replicated ch)", {
        "count": len(ev) == n_in, "delay": bound_ok, "rmse": rel < 0.01, "runtime": elapsed < 300}, detail)


# ---------------------------------------------------------------- 4, 5

def test_c04_fidelity_band(grid, acceptance_record):
    reps = grid[0.05]
    cc, rmse = median(reps, "fidelity", "APM", "CC"), median(reps, "fidelity", "APM", "RMSE")
    verdict(acceptance_record, 4, "fidelity band at sigma 0.05", {"cc": cc >= 0.87, "rmse": rmse <= 0.15},
            f"median CC {cc:.3f}, RMSE {rmse:.4f} over {len(reps)} seeds")


def test_c05_detection_band(grid, acceptance_record):
    reps = grid[0.05]
    a, s, f = (median(reps, "fidelity", "APM", k) for k in ("A", "S", "FDR"))
    verdict(acceptance_record, 5, "spike detection band at sigma 0.05",
            {"A": a >= 0.90, "S": s >= 0.90, "FDR": f <= 0.02},
            f"median A {a:.4f}, S {s:.4f}, FDR {f:.4f}")


# ---------------------------------------------------------------- 6, 7

def test_c06_fidelity_compression_ordering(grid, acceptance_record):
    checks, parts = {}, []
    for sigma, reps in grid.items():
        cc = [median(reps, "fidelity", m, "CC") for m in ("APM",) + PCM_MODES]
        checks[f"cc@{sigma}"] = all(a >= b for a, b in zip(cc, cc[1:]))
        checks[f"tdr@{sigma}"] = all(r.rates["tdr_pcm4"] <= r.rates["tdr_pcm1"] for r in reps)
        parts.append(f"{sigma}: " + "/".join(f"{c:.2f}" for c in cc))
    verdict(acceptance_record, 6, "CC APM>=PCM1>=PCM2>=PCM4, TDR PCM4<=PCM1", checks,
            "median CC " + "; ".join(parts))


def test_c07_sparsity_trend(grid, acceptance_record):
    alpha = {s: [median(reps, "sparsity", m, "alpha_b") for m in PCM_MODES] for s, reps in grid.items()}
    checks = {}
    for i, m in enumerate(PCM_MODES):
        col = [alpha[s][i] for s in SIGMAS]
        checks[f"sigma@{m}"] = all(a < b for a, b in zip(col, col[1:]))
    for s in SIGMAS:
        checks[f"width@{s}"] = all(a < b for a, b in zip(alpha[s], alpha[s][1:]))
    a0 = alpha[0.05][0]
    checks["band"] = 0.01 <= a0 <= 0.05
    verdict(acceptance_record, 7, "bin occupancy trend", checks,
            f"PCM1 at 0.05 = {a0:.4f}; " + "; ".join(f"{s}: " + "/".join(f"{v:.3f}" for v in alpha[s])
                                                   for s in SIGMAS))


# ---------------------------------------------------------------- 8

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="single-threshold baseline already sparse; see decision log")
def test_c08_dual_threshold_gain(acceptance_record):
    ratios, dual_cr = [], []
    for seed in SEEDS:
        ds = synth_100x100(0.05, seed)
        single = run_pipeline(PipelineConfig(dataset=ds, modes=("APM",))).rates["cr2"]
        dual = run_pipeline(PipelineConfig(dataset=ds, modes=("APM",), dual=DualThresholdConfig())).rates["cr2"]
        ratios.append(dual / single)
        dual_cr.append(dual)
    r = float(np.median(ratios))
    verdict(acceptance_record, 8, "dual-threshold CR2 gain >= 1.8", {"gain": r >= 1.8},
            f"median CR2 ratio {r:.2f} (dual CR2 {np.median(dual_cr):.1f}) at sigma 0.05")


# ---------------------------------------------------------------- 9

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="noise events pass the density rule; see decision log")
def test_c09_event_filter_gain(acceptance_record):
    gains, crs = [], []
    for seed in SEEDS:
        rates = run_pipeline(PipelineConfig(dataset=synth_100x100(0.1, seed), modes=("APM",),
                                            filter=FilterConfig())).rates
        gains.append(rates["filter_gain"])
        crs.append(rates["cr2"])
    g, cr = float(np.median(gains)), float(np.median(crs))
    verdict(acceptance_record, 9, "event-filter gain >= 4 and CR in [50, 100]",
            {"gain": g >= 4, "cr": 50 <= cr <= 100}, f"median gain {g:.2f}, CR {cr:.1f} at sigma 0.1")


# ---------------------------------------------------------------- 10

def _brute_force(stream, table, n_samples, channels):
    out = np.zeros((channels, n_samples))
    for p, c in zip(stream.packets, stream.channel.tolist()):
        if stream.mode == "APM":
            idx = int(round(int(p["t_ns"]) * stream.fs_hz / 1e9))
            inc = table[c, int(p["level"]), 0 if p["polarity"] > 0 else 1]
        else:
            idx = (int(p["bin_index"]) + 1) * stream.bin_width
            inc = p["n_on"] * table[c, 0, 0] + p["n_off"] * table[c, 0, 1]
        out[c, idx:] += inc
    return out


def test_c10_oracle_suite(acceptance_record, tmp_path):
    parts = [generate_synthetic(SynthConfig(noise_sigma=0.1, duration_s=1.0, seed=s))[0] for s in range(4)]
    stacked = stack_recordings(parts)
    rec = SampledRecording(stacked.fs_hz, stacked.samples, ArrayGeometry(2, 2), stacked.ground_truth)
    adm = calibrate_threshold(rec, 0.3, calib_s=1.0)
    ev = arbitrate(encode_recording(rec, adm), rec.geometry)
    table = as_step_table(adm, rec.channels)
    checks = {}
    for mode in ("APM",) + PCM_MODES:
        s = stream_from_events(ev, mode, rec.duration_s)
        got = reconstruct(s, adm, n_samples=rec.n_samples).samples
        checks[f"recon:{mode}"] = got.tobytes() == _brute_force(s, table, rec.n_samples, rec.channels).tobytes()
        checks[f"count:{mode}"] = s.n_pulses == len(ev)
        p1 = write_stream(s, tmp_path / f"{mode}.naer")
        p2 = write_stream(read_stream(p1), tmp_path / f"{mode}.again.naer")
        checks[f"serial:{mode}"] = p1.read_bytes() == p2.read_bytes()
    pcm = packetize_pcm(ev, n=1, duration_s=rec.duration_s)
    checks["pcm-on-off"] = int(pcm.packets["n_on"].sum()) == int(np.count_nonzero(ev.data["polarity"] > 0))
    r = compression_ratios(3e9, 1e9, 7e7, 1.3e8, 3e6)
    checks["cr-identity"] = all(cr * t == 3e9 for cr, t in ((r.cr1, 1e9), (r.cr2, 7e7), (r.cr3, 1.3e8), (r.cr4, 3e6)))
    sc = score_detections([1.0, 5.0], [1.0, 2.0])
    checks["metrics"] = (sc.sensitivity, sc.fdr) == (0.5, 0.5) and abs(sc.accuracy - 1 / 3) < 1e-15
    checks["apm-hand"] = tdr_theoretical(RateModelParams(ArrayGeometry(100, 100), f_neu=60, n_ap=6, r_noise=20),
                                         "APM") == 10_000 * 380 * 15
    verdict(acceptance_record, 10, "oracle and exactness suite", checks, f"{len(checks)} exact checks")


# ---------------------------------------------------------------- 11

NHP_ENV = "NEUROCOMP_NHP_RECORDING"


@pytest.mark.dataset
def test_c11_dataset_reproduction(acceptance_record):
    path = os.environ.get(NHP_ENV)
    if not path or not Path(path).exists():
        acceptance_record(11, "dataset reproduction", None, f"set {NHP_ENV} to a 100-channel recording to run")
        pytest.skip(f"{NHP_ENV} not set")
    fs = float(os.environ.get("NEUROCOMP_NHP_FS", "0")) or None
    rep = run_pipeline(PipelineConfig(dataset=DatasetSpec(path=path, fs_hz=fs), modes=("APM", "PCM1", "PCM4")))
    cr = rep.rates
    mean = rep.collisions["mean_colliding_channels"]
    within = lambda v, ref, tol: v is not None and abs(v - ref) <= tol * ref  # noqa: E731
    verdict(acceptance_record, 11, "dataset reproduction", {
        "cr1": within(cr["cr1"], 3.23, 0.15), "cr2": within(cr["cr2"], 25.2, 0.15),
        "cr3": within(cr["cr3"], 15.4, 0.15), "collisions": within(mean, 10.07, 0.20)},
        f"CR1 {cr['cr1']}, CR2 {cr['cr2']}, CR3 {cr['cr3']}, mean colliding {mean}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
