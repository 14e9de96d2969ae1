"""WAV I/O, resampling and STFT/ISTFT.

Everything here is pure: functions take and return values, nothing is
cached between calls.
"""
from __future__ import annotations

import logging
import math
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ClipTooShort, DataError, IoFailure

log = logging.getLogger(__name__)


class MalformedHeader(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyFile(DataError):
    pass


class NonColaConfig(DataError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio samples contain NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


# ----------------------------------------------------------------- WAV

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file, downmix to mono and scale to [-1, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedHeader(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {channels} channels")
    if rate <= 0 or block_align != channels * bits // 8:
        raise MalformedHeader(f"{path}: inconsistent fmt chunk")
    nframes = len(data) // block_align if block_align else 0
    if nframes == 0:
        raise EmptyFile(f"{path}: no audio frames")
    data = data[: nframes * block_align]

    if tag == _WAVE_FORMAT_PCM and bits == 8:
        x = (np.frombuffer(data, np.uint8).astype(np.float64) - 128.0) / 128.0
    elif tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(data, "<i2") / 32768.0
    elif tag == _WAVE_FORMAT_PCM and bits == 24:
        b = np.frombuffer(data, np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v / float(1 << 23)
    elif tag == _WAVE_FORMAT_PCM and bits == 32:
        x = np.frombuffer(data, "<i4") / float(1 << 31)
    elif tag == _WAVE_FORMAT_FLOAT and bits in (32, 64):
        x = np.frombuffer(data, "<f4" if bits == 32 else "<f8").astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag} with {bits} bits")

    x = x.reshape(nframes, channels).mean(axis=1)
    return AudioClip(x, rate)


def store_wav(clip: AudioClip, path) -> int:
    """Write 16-bit PCM; returns the number of samples saturated at ±1."""
    if len(clip) == 0:
        raise ValueError("cannot store an empty clip")
    x = clip.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        log.warning("store_wav: %d samples clipped to [-1, 1] in %s", clipped, path)
    pcm = np.clip(np.round(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(clip.sample_rate))
            w.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return clipped


# ----------------------------------------------------------------- resampling

def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Polyphase windowed-sinc resampling; output length is round(n * target / source)."""
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if target_hz == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_hz), int(clip.sample_rate))
    y = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    n = int(round(len(clip) * target_hz / clip.sample_rate))
    if len(y) < n:
        y = np.pad(y, (0, n - len(y)))
    return AudioClip(y[:n], int(target_hz))


# ----------------------------------------------------------------- STFT

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def is_cola(window: np.ndarray, hop: int, tol: float = 1e-10) -> bool:
    n = len(window)
    if hop <= 0 or hop > n:
        return False
    acc = np.zeros(hop)
    for start in range(0, n, hop):
        seg = window[start:start + hop]
        acc[: len(seg)] += seg
    return bool(np.ptp(acc) <= tol * max(acc.max(), 1.0)) and acc.min() > 0


@dataclass
class Spectrogram:
    """One-sided STFT frames (T, frame_len // 2 + 1).

    Frame ``t`` is centred on sample ``t * hop``; ``length`` remembers the
    original signal length so the inverse can trim.
    """

    frames: np.ndarray
    frame_len: int
    hop: int
    length: int
    sample_rate: int
    window: str = "hann"

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.frames)

    def energy(self) -> float:
        """Signal-domain energy estimate; matches sum(x**2) for COLA configs."""
        p = np.abs(self.frames) ** 2
        weights = np.full(p.shape[1], 2.0)
        weights[0] = 1.0
        if self.frame_len % 2 == 0:
            weights[-1] = 1.0
        w = hann(self.frame_len)
        return float((p * weights).sum() / (self.frame_len * np.sum(w * w) / self.hop))

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        return Spectrogram(frames, self.frame_len, self.hop, self.length, self.sample_rate, self.window)


def stft(clip: AudioClip, frame_len: int = 1024, hop: int = 256) -> Spectrogram:
    if frame_len <= 0 or frame_len & (frame_len - 1):
        raise ValueError(f"frame_len must be a power of two, got {frame_len}")
    if hop <= 0 or frame_len % hop:
        raise ValueError(f"hop {hop} must divide frame_len {frame_len}")
    n = len(clip)
    if n < frame_len:
        raise ClipTooShort(f"clip has {n} samples, STFT needs at least {frame_len}")
    half = frame_len // 2
    # the last sample must sit at least a hop inside the last window; this only
    # adds frames when hop > frame_len / 4
    n_frames = max(math.ceil(n / hop), math.ceil((n - 1 - half + hop) / hop) + 1)
    padded = np.zeros(n_frames * hop + frame_len)
    padded[half:half + n] = clip.samples
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = np.fft.rfft(padded[idx] * hann(frame_len), axis=1)
    return Spectrogram(frames, frame_len, hop, n, clip.sample_rate)


def istft(spec: Spectrogram) -> AudioClip:
    """Weighted overlap-add inverse with window-square normalization."""
    w = hann(spec.frame_len)
    if not is_cola(w, spec.hop):
        raise NonColaConfig(f"hann window with frame {spec.frame_len} / hop {spec.hop} is not COLA")
    n_frames = spec.frames.shape[0]
    seg = np.fft.irfft(spec.frames, n=spec.frame_len, axis=1) * w
    total = n_frames * spec.hop + spec.frame_len
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(n_frames):
        s = t * spec.hop
        out[s:s + spec.frame_len] += seg[t]
        norm[s:s + spec.frame_len] += w2
    half = spec.frame_len // 2
    out = out[half:half + spec.length]
    norm = norm[half:half + spec.length]
    safe = norm > 1e-10
    out[safe] /= norm[safe]
    out[~safe] = 0.0
    return AudioClip(out, spec.sample_rate)
