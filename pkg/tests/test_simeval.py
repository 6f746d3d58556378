import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import coherence

from rtbse.errors import ShapeMismatch, SilentSpeech, ZeroReference
from rtbse.prior import ArrayGeometry
from rtbse.simeval import (SDR_CAP, MixSpec, NoiseSpec, active_mask, fractional_delay_ir,
                           make_scenario, sdr, sdr_improvement_segments, simulate_diffuse_noise,
                           speech_surrogate, synthesize_mixture, synthetic_irs)

FS = 16000


def test_snr_zero_db(rng):
    geom = ArrayGeometry.circular()
    speech = speech_surrogate(6.0, FS, rng)
    irs = synthetic_irs(geom, 0.4, sample_rate=FS)
    mix = synthesize_mixture(MixSpec(speech, NoiseSpec(geom), irs, 0.0, FS), seed=1)
    mask = active_mask(mix.image, FS)
    measured = 10 * np.log10(np.mean(mix.image[mask] ** 2) / np.mean(mix.noise[mask] ** 2))
    assert abs(measured) <= 0.01
    assert mix.snr_db == pytest.approx(measured)
    np.testing.assert_allclose(mix.mixture, mix.image + mix.noise)


def test_snr_other_targets(rng):
    speech = speech_surrogate(3.0, FS, rng)
    noise = rng.standard_normal((speech.size, 2))
    for target in (-5.0, 10.0):
        mix = synthesize_mixture(MixSpec(speech, noise, np.ones((2, 1)), target, FS))
        assert abs(mix.snr_db - target) <= 0.01


def test_infinite_snr_is_clean_image(rng):
    speech = speech_surrogate(2.0, FS, rng)
    mix = synthesize_mixture(MixSpec(speech, rng.standard_normal((speech.size, 3)), np.ones((3, 1)),
                                     float("inf"), FS))
    assert mix.noise_gain == 0.0
    np.testing.assert_array_equal(mix.mixture, mix.image)


def test_unit_impulse_irs(rng):
    speech = rng.standard_normal(1000)
    irs = np.zeros((3, 8))
    for m, d in enumerate((0, 2, 5)):
        irs[m, d] = 1.0
    mix = synthesize_mixture(MixSpec(speech, np.zeros((1000, 3)) + 1e-3, irs, float("inf"), FS))
    for m, d in enumerate((0, 2, 5)):
        np.testing.assert_allclose(mix.image[d:, m], speech[: 1000 - d], atol=1e-12)
        np.testing.assert_allclose(mix.image[:d, m], 0.0, atol=1e-12)


def test_silent_speech_rejected():
    with pytest.raises(SilentSpeech):
        synthesize_mixture(MixSpec(np.zeros(1000), np.ones((1000, 1)), np.ones((1, 1))))


def test_noise_shape_checked(rng):
    with pytest.raises(ShapeMismatch):
        synthesize_mixture(MixSpec(rng.standard_normal(100), np.ones((50, 1)), np.ones((1, 1))))


def test_mixture_linear_in_source(rng):
    noise = rng.standard_normal((2000, 2))
    irs = rng.standard_normal((2, 10))
    s1, s2 = rng.standard_normal((2, 2000))
    a = synthesize_mixture(MixSpec(s1, noise, irs, float("inf"))).image
    b = synthesize_mixture(MixSpec(s2, noise, irs, float("inf"))).image
    c = synthesize_mixture(MixSpec(2 * s1 - s2, noise, irs, float("inf"))).image
    np.testing.assert_allclose(c, 2 * a - b, atol=1e-10)


def test_fractional_delay():
    h = fractional_delay_ir(10.0, 32)
    assert np.argmax(h) == 10 and h[10] == pytest.approx(1.0)
    t = np.arange(400)
    sig = np.sin(2 * np.pi * 0.02 * t)
    # delays are used near the middle of the filter, where the sinc is not truncated
    out = np.convolve(sig, fractional_delay_ir(32.5, 64))[:400]
    np.testing.assert_allclose(out[100:300], np.sin(2 * np.pi * 0.02 * (t[100:300] - 32.5)), atol=1e-3)


def test_reverberant_irs():
    geom = ArrayGeometry.circular()
    dry = synthetic_irs(geom, 0.3)
    wet = synthetic_irs(geom, 0.3, t60=0.3, rng=0)
    assert dry.shape == (4, 64) and wet.shape[1] > 4000
    np.testing.assert_allclose(wet[:, :32], dry[:, :32])


def test_diffuse_noise_wide_spacing_and_determinism():
    g1 = ArrayGeometry([[0, 0, 0], [5.0, 0, 0]])
    n = simulate_diffuse_noise(g1, 1.0, 32, seed=5)
    assert n.shape == (FS, 2)
    assert np.array_equal(n, simulate_diffuse_noise(g1, 1.0, 32, seed=5))
    assert abs(np.var(n[:, 0]) - 1.0) < 0.1
    # widely spaced mics behave like independent Gaussian channels
    assert abs(np.corrcoef(n.T)[0, 1]) < 0.1


def test_diffuse_coherence_follows_sinc():
    d, c = 0.05, 343.0
    geom = ArrayGeometry([[0, 0, 0], [d, 0, 0]], c)
    n = simulate_diffuse_noise(geom, 20.0, 256, seed=2)
    f, coh = coherence(n[:, 0], n[:, 1], fs=FS, nperseg=512)
    model = np.sinc(2 * f * d / c) ** 2
    assert coh[1] > 0.9
    band = (f > 0) & (f < 6000)
    assert np.max(np.abs(coh[band] - model[band])) < 0.15


def test_sdr_examples(rng):
    s = rng.standard_normal(4000)
    assert sdr(s, s) == SDR_CAP
    noise = rng.standard_normal(4000)
    noise -= s * (noise @ s) / (s @ s)
    noise *= np.linalg.norm(s) / np.linalg.norm(noise)
    assert sdr(s, s + noise) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ZeroReference):
        sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ShapeMismatch):
        sdr(np.ones(10), np.ones(11))


def test_sdr_direct_formula(rng):
    s, e = rng.standard_normal((2, 3000))
    a = (e @ s) / (s @ s)
    expect = 10 * np.log10(np.sum((a * s) ** 2) / np.sum((a * s - e) ** 2))
    assert sdr(s, e) == pytest.approx(expect, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_sdr_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    s, e = rng.standard_normal((2, 500))
    assert sdr(s, k * e) == pytest.approx(sdr(s, e), abs=1e-9)


def test_segments_examples(rng):
    fs = 100
    gt = rng.standard_normal(fs * 5)
    gt[fs * 2: fs * 3] = 0.0  # one silent second
    obs = gt + rng.standard_normal(gt.size)
    rep = sdr_improvement_segments(gt, obs, obs, fs)
    assert rep.excluded_segments == 1 and rep.segments[2].excluded
    np.testing.assert_allclose(rep.deltas, 0.0)
    rep = sdr_improvement_segments(gt, obs, gt, fs)
    expect = [SDR_CAP - sdr(gt[k * fs:(k + 1) * fs], obs[k * fs:(k + 1) * fs]) for k in (0, 1, 3, 4)]
    np.testing.assert_allclose(rep.deltas, expect)


def test_segments_drop_partial_tail_and_check_lengths(rng):
    gt = rng.standard_normal(350)
    rep = sdr_improvement_segments(gt, gt, gt, 100)
    assert len(rep.segments) == 3
    with pytest.raises(ShapeMismatch):
        sdr_improvement_segments(gt, gt[:-1], gt, 100)


def test_report_files(tmp_path, rng):
    fs = 100
    gt = rng.standard_normal(fs * 6)
    gt[:fs] = 0.0
    obs = gt + rng.standard_normal(gt.size)
    rep = sdr_improvement_segments(gt, obs, 0.5 * (gt + obs), fs)
    rep.write_csv(tmp_path / "s.csv")
    rep.write_json(tmp_path / "s.json")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 6 - 1
    assert [int(r["index"]) for r in rows] == [1, 2, 3, 4, 5]
    doc = json.load(open(tmp_path / "s.json"))
    assert doc["summary"]["evaluated_segments"] == 5 and doc["summary"]["excluded_segments"] == 1
    assert doc["summary"]["median"] == pytest.approx(float(np.median(rep.deltas)))


def test_make_scenario_deterministic():
    geom = ArrayGeometry.circular()
    a = make_scenario(3.0, geom, 0.5, seed=4)
    b = make_scenario(3.0, geom, 0.5, seed=4)
    assert np.array_equal(a.mixture, b.mixture)
    assert abs(a.snr_db) <= 0.01
    assert not np.array_equal(a.mixture, make_scenario(3.0, geom, 0.5, seed=5).mixture)


def test_surrogate_level_and_pauses():
    s = speech_surrogate(20.0, FS, rng=0)
    active = s != 0
    assert np.sqrt(np.mean(s[active] ** 2)) == pytest.approx(0.05)
    assert 0.05 < 1 - active.mean() < 0.6
