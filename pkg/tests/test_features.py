import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from songconv.audio_io import AudioClip
from songconv.errors import ClipTooShort
from songconv.features import (HOP, N_BANDS, N_MCEP, NBINS, SAMPLE_RATE, F0Stats, InsufficientVariance,
                               InsufficientVoicedFrames, VoiceFeatures, WrongSampleRate, analyze, estimate_f0,
                               f0_convert, f0_stats, mcep_decode, mcep_encode, mel_cepstral_distortion,
                               read_features_csv, synthesize, write_features_csv)

from conftest import SR, pulse_vowel, sine

FREQS = np.arange(NBINS) * SAMPLE_RATE / 1024


def bark(f):
    return 13 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def test_pure_tone_f0():
    f0 = estimate_f0(sine(220.0, 1.0))
    assert np.mean(np.abs(f0 - 220.0) <= 2.0) >= 0.95


def test_noise_and_silence_unvoiced(rng):
    noise = estimate_f0(AudioClip(rng.standard_normal(SR) * 0.1, SR))
    assert np.mean(noise == 0) >= 0.9
    assert not np.any(estimate_f0(AudioClip(np.zeros(SR // 2), SR)))


def test_wrong_rate():
    with pytest.raises(WrongSampleRate):
        estimate_f0(AudioClip(np.zeros(4410), 44100))


def test_f0_stats_examples(rng):
    with pytest.raises(InsufficientVariance):
        f0_stats(np.full(50, 200.0))
    with pytest.raises(InsufficientVoicedFrames):
        f0_stats(np.array([0.0] * 20 + [200.0] * 5))
    st_ = f0_stats(np.array([100.0, 400.0] * 5 + [0.0] * 3))
    assert st_.mu == pytest.approx((np.log(100) + np.log(400)) / 2)
    draws = np.exp(rng.normal(5.0, 0.2, 1000))
    est = f0_stats(draws)
    assert abs(est.mu - 5.0) / 5.0 < 0.05 and abs(est.sigma - 0.2) / 0.2 < 0.05


def test_f0_convert_examples():
    track = np.array([120.0, 0.0, 150.0, 90.0])
    s = F0Stats(np.log(150.0), 0.2)
    np.testing.assert_allclose(f0_convert(track, s, s), track, rtol=1e-12)
    out = f0_convert(np.array([120.0, 0.0]), F0Stats(np.log(120), 0.1), F0Stats(np.log(240), 0.1))
    assert out[0] == pytest.approx(240.0, rel=1e-12)
    assert out[1] == 0.0


stats = st.builds(F0Stats, st.floats(np.log(60), np.log(500)), st.floats(0.01, 1.0))


@settings(max_examples=100, deadline=None)
@given(src=stats, tgt=stats, seed=st.integers(0, 2 ** 31))
def test_f0_convert_properties(src, tgt, seed):
    rng = np.random.default_rng(seed)
    track = np.where(rng.random(50) < 0.3, 0.0, rng.uniform(60, 500, 50))
    out = f0_convert(track, src, tgt)
    assert np.array_equal(out > 0, track > 0)
    np.testing.assert_allclose(f0_convert(track, src, src), track, rtol=1e-12)
    mapped = f0_convert(np.array([np.exp(src.mu)]), src, tgt)
    assert np.log(mapped[0]) == pytest.approx(tgt.mu, abs=1e-12)


def test_mcep_flat_envelope():
    c, c0 = mcep_encode(np.full(NBINS, 0.3))
    assert c.shape == (N_MCEP,)
    assert np.max(np.abs(c)) < 1e-9
    assert c0 == pytest.approx(np.log(0.3), abs=1e-9)


def _smooth_envelope(rng):
    log_env = np.zeros(NBINS)
    for _ in range(4):
        f = rng.uniform(200, 6000)
        log_env += rng.uniform(0.5, 2) * np.exp(-0.5 * ((FREQS - f) / rng.uniform(200, 800)) ** 2)
    return np.exp(log_env - 3.0)


def test_mcep_projection_idempotent(rng):
    env = _smooth_envelope(rng)
    c, c0 = mcep_encode(env)
    c2, c02 = mcep_encode(mcep_decode(c, c0))
    c3, c03 = mcep_encode(mcep_decode(c2, c02))
    assert np.max(np.abs(c3 - c2)) < 1e-3 and abs(c03 - c02) < 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), k=st.floats(1e-3, 1e3))
def test_mcep_scaling_shifts_only_c0(seed, k):
    env = _smooth_envelope(np.random.default_rng(seed))
    c, c0 = mcep_encode(env)
    ck, c0k = mcep_encode(k * env)
    assert np.max(np.abs(ck - c)) < 1e-9
    assert c0k - c0 == pytest.approx(np.log(k), abs=1e-9)


def test_mcep_decode_mirrors():
    env = mcep_decode(np.zeros(N_MCEP), np.log(0.3))
    np.testing.assert_allclose(env, 0.3, rtol=1e-9)
    c, c0 = mcep_encode(np.full(NBINS, 2.0))
    np.testing.assert_allclose(mcep_decode(c, c0 + np.log(5.0)), 10.0, rtol=1e-6)


def test_analyze_synthetic_vowel():
    formants = ((700, 80), (1200, 90), (2600, 120))
    feats = analyze(pulse_vowel(150.0, 1.0, formants))
    v = feats.voiced
    assert v.mean() > 0.9
    assert np.median(np.abs(feats.f0[v] - 150.0)) <= 3.0
    env = np.median(mcep_decode(feats.mcep[v], feats.energy[v]), axis=0)
    log_env = np.log(env)
    peaks = [i for i in range(1, NBINS - 1) if log_env[i] > log_env[i - 1] and log_env[i] >= log_env[i + 1]]
    peak_bark = bark(FREQS[peaks])
    for f, _ in formants:
        assert np.min(np.abs(peak_bark - bark(f))) <= 1.0, f


def test_analyze_silence_and_short():
    feats = analyze(AudioClip(np.zeros(SR // 2), SR))
    assert not np.any(feats.voiced)
    assert np.all(np.exp(feats.energy) < 1e-6)
    with pytest.raises(ClipTooShort):
        analyze(AudioClip(np.zeros(800), SR))


def test_analysis_synthesis_loop():
    clip = pulse_vowel(160.0, 1.0)
    a = analyze(clip)
    b = analyze(synthesize(a, n_samples=len(clip)))
    v = a.voiced & b.voiced
    assert np.mean(np.abs(a.f0[v] - b.f0[v]) <= 3.0) >= 0.9
    assert np.mean(np.abs(b.f0[a.voiced] - a.f0[a.voiced]) <= 3.0) >= 0.9
    c = analyze(synthesize(b, n_samples=len(clip)))
    assert mel_cepstral_distortion(b.mcep[v & c.voiced], c.mcep[v & c.voiced]) < 1.5


def _flat_features(T, f0, energy):
    return VoiceFeatures(np.full(T, f0), np.zeros((T, N_MCEP)), np.full(T, energy), np.full((T, N_BANDS), 0.1))


def test_synthesize_unvoiced_is_noise():
    out = synthesize(_flat_features(200, 0.0, np.log(0.05)), seed=3)
    assert np.std(out.samples) > 0
    assert np.mean(estimate_f0(out) == 0) >= 0.9


def test_synthesize_zero_energy_is_silent():
    out = synthesize(_flat_features(200, 150.0, -np.inf))
    assert np.max(np.abs(out.samples)) < 1e-6


def test_synthesize_length_and_determinism():
    f = _flat_features(100, 200.0, np.log(0.05))
    a, b = synthesize(f, seed=1, n_samples=8000), synthesize(f, seed=1, n_samples=8000)
    assert len(a) == 8000 and np.array_equal(a.samples, b.samples)
    assert len(synthesize(f)) == 99 * HOP + 1


def test_inconsistent_lengths_rejected():
    with pytest.raises(Exception):
        VoiceFeatures(np.zeros(3), np.zeros((4, N_MCEP)), np.zeros(3), np.zeros((3, N_BANDS)))


def test_features_csv_round_trip(tmp_path):
    feats = analyze(pulse_vowel(150.0, 0.3))
    p = tmp_path / "f.csv"
    write_features_csv(feats, p)
    header = p.read_text().splitlines()[0].split(",")
    assert header[:3] == ["f0", "energy", "c1"] and header[-1] == "ap4" and len(header) == 30
    back = read_features_csv(p)
    for name in ("f0", "mcep", "energy", "ap"):
        assert np.array_equal(getattr(back, name), getattr(feats, name))
