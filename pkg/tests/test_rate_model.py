import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurocomp.rate_model import (
    SWEEP_COLUMNS,
    CrReport,
    RateModelParams,
    SweepConfig,
    ValidationConfig,
    compression_ratios,
    extrapolate_linear,
    sweep,
    tdr_theoretical,
    validate_model,
    write_sweep_csv,
)
from neurocomp.signal_core import ArrayGeometry, SynthConfig, generate_synthetic

G100 = ArrayGeometry(100, 100)
SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------- model arithmetic

def test_full_sample_three_gbps():
    p = RateModelParams(G100, b_adc=10, fs_hz=30_000.0)
    assert tdr_theoretical(p, "FULL") == 3e9
    assert tdr_theoretical(p, "FULL", address_bits=True) == 10_000 * 30_000 * 24


def test_apm_silent_is_zero():
    assert tdr_theoretical(RateModelParams(G100, n_ap=6), "APM") == 0.0


def test_apm_hand_case():
    p = RateModelParams(G100, f_neu=60, n_ap=6, r_noise=20)
    assert tdr_theoretical(p, "APM") == pytest.approx(57.0e6, rel=1e-12)


def test_pcm_and_spdwor_terms():
    p = RateModelParams(G100, f_neu=50, n_spike=48, b_adc=10).for_pcm(2, alpha_b=0.1, count_bits=1.5)
    assert p.bins_per_s == 12_000
    assert tdr_theoretical(p, "PCM") == pytest.approx(1e4 * 0.1 * 12_000 * (1.5 + 14))
    assert tdr_theoretical(p, "SPDWOR") == pytest.approx(1e4 * 50 * 48 * 24)
    assert tdr_theoretical(replace(p, channels=100), "SPDWOR") == pytest.approx(100 * 50 * 48 * 24)


@pytest.mark.parametrize("kw", [dict(f_neu=-1), dict(r_noise=-0.1), dict(alpha_b=1.5), dict(channels=10_001),
                                dict(fs_hz=float("nan"))])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        RateModelParams(G100, **kw)


def test_unknown_mode():
    with pytest.raises(ValueError):
        tdr_theoretical(RateModelParams(G100), "XYZ")


@given(st.floats(0, 500), st.floats(0, 20), st.floats(0, 1000), st.sampled_from([(1, 1), (10, 10), (100, 100), (3, 7)]))
def test_doubling_packet_rate_doubles_tdr(f, nap, noise, rc):
    g = ArrayGeometry(*rc)
    a = tdr_theoretical(RateModelParams(g, f_neu=f, n_ap=nap, r_noise=noise), "APM")
    b = tdr_theoretical(RateModelParams(g, f_neu=2 * f, n_ap=nap, r_noise=2 * noise), "APM")
    assert b == pytest.approx(2 * a, rel=1e-12, abs=0)


@given(st.floats(0, 1), st.integers(1, 16))
def test_bin_rate_identity(alpha, n):
    p = RateModelParams(G100).for_pcm(n, alpha, 1.0)
    assert tdr_theoretical(p, "PCM") == pytest.approx(1e4 * alpha * (24_000 / n) * 15, rel=1e-12)


# ---------------------------------------------------------------- compression ratios

pos = st.floats(1e-3, 1e12)


@given(pos, pos, pos, pos, pos)
def test_cr_identities(fs, spk, apm, p1, p4):
    r = compression_ratios(fs, spk, apm, p1, p4)
    for cr, tdr in ((r.cr1, spk), (r.cr2, apm), (r.cr3, p1), (r.cr4, p4)):
        assert cr * tdr == pytest.approx(fs, rel=1e-12)


def test_equal_tdrs_give_unit_ratios():
    r = compression_ratios(*[5.0] * 5)
    assert (r.cr1, r.cr2, r.cr3, r.cr4) == (1.0, 1.0, 1.0, 1.0)


def test_zero_denominator():
    with pytest.raises(ZeroDivisionError):
        compression_ratios(1.0, 1.0, 0.0, 1.0, 1.0)
    r = CrReport(1.0, 1.0, 0.0, 1.0, 1.0)
    with pytest.raises(ZeroDivisionError):
        r.cr2
    assert math.isnan(r.as_row()["cr2"])


def test_from_params_matches_modes():
    base = RateModelParams(G100, f_neu=60, n_ap=6, r_noise=20, n_spike=48, fs_hz=30_000)
    p1 = base.for_pcm(1, 0.03, 1.2)
    p4 = base.for_pcm(4, 0.06, 2.0)
    r = CrReport.from_params(base, p1, p4)
    assert r.tdr_fs == 3e9 and r.tdr_apm == pytest.approx(57e6)
    assert r.tdr_pcm1 == tdr_theoretical(p1, "PCM")


# ---------------------------------------------------------------- validation

def test_validation_within_five_percent():
    rec, _ = generate_synthetic(SynthConfig(noise_sigma=0.1, duration_s=10.0, seed=3))
    res = validate_model(rec)
    assert res.rel_error["APM"] <= 0.05 and res.rel_error["PCM1"] <= 0.05
    assert res.measured["APM"] > 0


def test_validation_negative_control():
    rec, _ = generate_synthetic(SynthConfig(noise_sigma=0.05, duration_s=10.0, seed=3))
    res = validate_model(rec, ValidationConfig(f_neu_scale=2.0))
    assert res.rel_error["APM"] > 0.05


def test_zero_event_recording():
    rec, _ = generate_synthetic(SynthConfig(noise_sigma=0.0, firing_rate_hz=0.0, duration_s=2.0))
    res = validate_model(rec, ValidationConfig(fit_s=1.0, calib_s=1.0))
    assert res.measured == res.theory == {"APM": 0.0, "PCM1": 0.0}
    assert res.rel_error == {"APM": 0.0, "PCM1": 0.0}


# ---------------------------------------------------------------- sweeps

SWEEP_CFG = SweepConfig(synth=SynthConfig(duration_s=6.0), seeds=SEEDS)


def non_increasing(xs):
    return all(b <= a for a, b in zip(xs, xs[1:]))


def test_firing_rate_sweep_cr_falls():
    rows = sweep("firing-rate", [10, 30, 60, 100, 200], SWEEP_CFG)
    cr2 = [r.report.cr2 for r in rows]
    assert non_increasing(cr2)
    # roughly 20-50 across the physiological 30-60 Hz band
    assert 15 <= cr2[2] <= cr2[1] <= 100


def test_noise_sweep_cr_falls():
    rows = sweep("noise", [0.05, 0.1, 0.15, 0.2], SWEEP_CFG)
    assert non_increasing([r.report.cr2 for r in rows])


def test_channel_sweep_address_overhead():
    rows = sweep("channels", [100, 1000, 10_000], SWEEP_CFG)
    assert non_increasing([r.report.cr1 for r in rows])
    assert non_increasing([r.report.cr2 for r in rows])
    assert rows[-1].report.cr2 > rows[-1].report.cr1


def test_sweep_rejects_bad_axis():
    with pytest.raises(ValueError):
        sweep("bogus", [1])
    with pytest.raises(ValueError):
        sweep("channels", [0], SWEEP_CFG)


def test_sweep_csv(tmp_path):
    rows = sweep("noise", [0.05], replace(SWEEP_CFG, seeds=(0,)))
    path = write_sweep_csv(rows, tmp_path / "s.csv")
    with path.open() as fh:
        r = list(csv.reader(fh))
    assert tuple(r[0]) == SWEEP_COLUMNS
    assert float(r[1][0]) == 0.05 and float(r[1][SWEEP_COLUMNS.index("cr2")]) == rows[0].report.cr2
    empty = write_sweep_csv([], tmp_path / "e.csv").read_text().splitlines()
    assert empty == [",".join(SWEEP_COLUMNS)]


def test_extrapolate_linear():
    np.testing.assert_allclose(extrapolate_linear([1, 2, 3], [2, 4, 6], [10, 0]), [20, 0], atol=1e-9)
    with pytest.raises(ValueError):
        extrapolate_linear([1], [1], [2])
