import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from songconv.audio_io import (AudioClip, EmptyFile, MalformedHeader, NonColaConfig, UnsupportedEncoding, hann,
                               is_cola, istft, load_wav, resample, stft, store_wav)
from songconv.errors import ClipTooShort

from conftest import SR, sine


def _write_pcm(path, frames: np.ndarray, width=2, channels=1, rate=SR):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(frames.tobytes())


def _riff(fmt_tag, channels, rate, bits, data: bytes) -> bytes:
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_load_16bit_scaling(tmp_path):
    p = tmp_path / "a.wav"
    _write_pcm(p, np.array([0, 16384, -16384], dtype="<i2"))
    clip = load_wav(p)
    assert clip.sample_rate == SR
    np.testing.assert_allclose(clip.samples, [0.0, 0.5, -0.5], atol=1 / 32768)


def test_load_empty_data_chunk(tmp_path):
    p = tmp_path / "empty.wav"
    p.write_bytes(_riff(1, 1, SR, 16, b""))
    with pytest.raises(EmptyFile):
        load_wav(p)


def test_stereo_downmix(tmp_path):
    p = tmp_path / "st.wav"
    lr = np.tile(np.array([round(0.4 * 32768), round(0.2 * 32768)], dtype="<i2"), 100)
    _write_pcm(p, lr, channels=2)
    np.testing.assert_allclose(load_wav(p).samples, 0.3, atol=2 / 32768)


@pytest.mark.parametrize("bits,fmt_tag,dtype,scale", [
    (8, 1, "u1", None), (24, 1, None, 2 ** 23), (32, 3, "<f4", 1.0),
])
def test_other_encodings(tmp_path, bits, fmt_tag, dtype, scale):
    vals = np.array([0.0, 0.25, -0.5, 0.75])
    if bits == 8:
        data = np.round(vals * 128 + 128).astype("u1").tobytes()
    elif bits == 24:
        ints = np.round(vals * scale).astype("<i4")
        data = b"".join(int(v).to_bytes(4, "little", signed=True)[:3] for v in ints)
    else:
        data = vals.astype("<f4").tobytes()
    p = tmp_path / f"x{bits}.wav"
    p.write_bytes(_riff(fmt_tag, 1, SR, bits, data))
    np.testing.assert_allclose(load_wav(p).samples, vals, atol=1 / 128)


def test_malformed_and_unsupported(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX0000WAVE")
    with pytest.raises(MalformedHeader):
        load_wav(p)
    q = tmp_path / "alaw.wav"
    q.write_bytes(_riff(6, 1, SR, 8, b"\x00\x01"))
    with pytest.raises(UnsupportedEncoding):
        load_wav(q)


def test_store_load_sine_round_trip(tmp_path):
    clip = sine(440.0, 0.5)
    p = tmp_path / "s.wav"
    assert store_wav(clip, p) == 0
    back = load_wav(p)
    assert np.max(np.abs(back.samples - clip.samples)) <= 2 ** -15


def test_store_clips_and_counts(tmp_path):
    p = tmp_path / "c.wav"
    n = store_wav(AudioClip(np.array([0.0, 1.5, -2.0, 0.5]), SR), p)
    assert n == 2
    back = load_wav(p)
    assert back.samples[1] == pytest.approx(1.0, abs=1 / 32768)
    assert back.samples[2] == pytest.approx(-1.0, abs=1 / 32768)


def test_store_empty_clip_rejected(tmp_path):
    with pytest.raises(ValueError):
        store_wav(AudioClip(np.zeros(0), SR), tmp_path / "e.wav")


def test_resample_keeps_pitch():
    clip = sine(440.0, 1.0, sr=48000)
    out = resample(clip, SR)
    spec = stft(out)
    peak = np.argmax(spec.magnitude.mean(axis=0))
    assert abs(peak - 440.0 * 1024 / SR) <= 1


def test_resample_identity_and_length():
    clip = sine(300.0, 0.2)
    assert np.array_equal(resample(clip, SR).samples, clip.samples)
    out = resample(AudioClip(np.zeros(44100), 44100), SR)
    assert abs(len(out) - 16000) <= 1


def test_stft_zero_and_sine_peak():
    z = stft(AudioClip(np.zeros(4000), SR))
    assert not np.any(z.frames)
    s = stft(sine(1000.0, 1.0))
    assert np.argmax(s.magnitude.mean(axis=0)) == 64
    assert s.frames.shape == (int(np.ceil(SR / 256)), 513)


def test_stft_parseval_white_noise(rng):
    x = AudioClip(rng.standard_normal(SR) * 0.1, SR)
    e = stft(x).energy()
    assert abs(e - np.sum(x.samples ** 2)) / np.sum(x.samples ** 2) < 0.01


def test_stft_too_short():
    with pytest.raises(ClipTooShort):
        stft(AudioClip(np.zeros(100), SR))


def test_round_trip_speechlike():
    t = np.arange(2 * SR) / SR
    env = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * t)
    x = env * (np.sin(2 * np.pi * 180 * t) + 0.3 * np.sin(2 * np.pi * 720 * t)) * 0.3
    back = istft(stft(AudioClip(x, SR)))
    assert np.sqrt(np.mean((back.samples - x) ** 2)) < 1e-6


def test_round_trip_zeros_and_zero_magnitude(rng):
    assert not np.any(istft(stft(AudioClip(np.zeros(3000), SR))).samples)
    spec = stft(AudioClip(rng.standard_normal(5000), SR))
    zero = spec.with_frames(0.0 * np.exp(1j * spec.phase))
    assert np.sqrt(np.mean(istft(zero).samples ** 2)) < 1e-6


def test_non_cola_rejected(rng):
    spec = stft(AudioClip(rng.standard_normal(4096), SR), 1024, 1024)
    assert not is_cola(hann(1024), 1024)
    with pytest.raises(NonColaConfig):
        istft(spec)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), extra=st.integers(0, 5000),
       cfg=st.sampled_from([(256, 64), (512, 128), (1024, 256), (1024, 512), (2048, 512)]))
def test_round_trip_property(seed, extra, cfg):
    x = np.random.default_rng(seed).standard_normal(cfg[0] + extra)
    back = istft(stft(AudioClip(x, SR), *cfg)).samples
    assert np.sqrt(np.mean((back - x) ** 2)) < 1e-6 * np.sqrt(np.mean(x ** 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), a=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_stft_linearity(seed, a):
    x = np.random.default_rng(seed).uniform(-0.1, 0.1, 2048)
    s1 = stft(AudioClip(a * x, SR)).frames
    s2 = a * stft(AudioClip(x, SR)).frames
    assert np.max(np.abs(s1 - s2)) <= 1e-6 * max(np.max(np.abs(s2)), 1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_store_load_property(seed, tmp_path_factory):
    x = np.random.default_rng(seed).uniform(-1, 1, 257)
    p = tmp_path_factory.mktemp("w") / "p.wav"
    store_wav(AudioClip(x, SR), p)
    assert np.max(np.abs(load_wav(p).samples - x)) <= 2 ** -15
