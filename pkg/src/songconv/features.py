"""Simplified analysis/synthesis vocoder at a 5 ms frame rate.

Analysis yields, per frame: F0 (0 for unvoiced), 24 mel-cepstral
coefficients c1..c24 of the spectral envelope, the log level c0 (kept as
the ``energy`` track), and aperiodicity in four bands.  Synthesis drives a
minimum-phase envelope filter with fractional-position pulses mixed with
white noise, overlap-added with a Hann window of two hops.

Level convention: the envelope is the square root of the power spectral
density per sample, so a unit-variance white noise has a flat envelope of
1 and a pulse train of amplitude ``a`` and period ``P`` samples has level
``a / sqrt(P)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct
from scipy.interpolate import CubicSpline

from .audio_io import AudioClip
from .errors import ClipTooShort, DataError

SAMPLE_RATE = 16000
HOP = 80  # 5 ms
NFFT = 1024
NBINS = NFFT // 2 + 1
N_MCEP = 24
ALPHA = 0.42
F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3
ENVELOPE_FLOOR = 1e-10
UNVOICED_F0 = 300.0  # analysis window reference for unvoiced frames
AP_BAND_EDGES = (0.0, 1000.0, 2000.0, 4000.0, 8000.0)
N_BANDS = len(AP_BAND_EDGES) - 1

_NCCF_WIN = 400  # 25 ms correlation window
_CHUNK = 1024


class WrongSampleRate(DataError):
    pass


class InsufficientVoicedFrames(DataError):
    pass


class InsufficientVariance(DataError):
    pass


@dataclass(frozen=True)
class F0Stats:
    mu: float
    sigma: float


@dataclass
class VoiceFeatures:
    """Frame-synchronous vocoder parameters (T frames at 5 ms)."""

    f0: np.ndarray      # (T,) Hz, 0 = unvoiced
    mcep: np.ndarray    # (T, 24) c1..c24
    energy: np.ndarray  # (T,) c0, natural-log envelope level
    ap: np.ndarray      # (T, 4) band aperiodicity in [0, 1]
    alpha: float = ALPHA

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.mcep = np.asarray(self.mcep, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.ap = np.asarray(self.ap, dtype=np.float64)
        n = len(self.f0)
        if self.mcep.shape != (n, N_MCEP) or self.energy.shape != (n,) or self.ap.shape != (n, N_BANDS):
            raise DataError(
                f"inconsistent feature shapes: f0 {self.f0.shape}, mcep {self.mcep.shape}, "
                f"energy {self.energy.shape}, ap {self.ap.shape}"
            )

    def __len__(self) -> int:
        return len(self.f0)

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0


def _check_rate(clip: AudioClip) -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise WrongSampleRate(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz")


def n_frames_for(n_samples: int) -> int:
    return n_samples // HOP + 1


# ----------------------------------------------------------------- F0

def estimate_f0(clip: AudioClip) -> np.ndarray:
    """Normalized cross-correlation pitch tracker, one value per 5 ms frame.

    Frames whose best correlation in the 50-600 Hz lag range is below 0.3
    are unvoiced (0.0).  The chosen lag is the shortest local maximum within
    90 % of the global maximum, refined by parabolic interpolation.
    """
    _check_rate(clip)
    x = clip.samples
    T = n_frames_for(len(x))
    lag_min = int(math.ceil(SAMPLE_RATE / F0_MAX))
    lag_max = int(math.floor(SAMPLE_RATE / F0_MIN))
    N = _NCCF_WIN
    span = N + lag_max + 1
    pad_left = N // 2
    padded = np.zeros(pad_left + len(x) + span + HOP)
    padded[pad_left:pad_left + len(x)] = x
    nfft = 1 << int(math.ceil(math.log2(span + N)))
    f0 = np.zeros(T)
    offs = np.arange(span)
    lags = np.arange(lag_min, lag_max + 1)
    for start in range(0, T, _CHUNK):
        stop = min(T, start + _CHUNK)
        idx = (np.arange(start, stop) * HOP)[:, None] + offs[None, :]
        seg = padded[idx]
        x0 = seg[:, :N]
        r = np.fft.irfft(np.conj(np.fft.rfft(x0, nfft, axis=1)) * np.fft.rfft(seg, nfft, axis=1),
                         nfft, axis=1)[:, : lag_max + 2]
        sq = np.concatenate([np.zeros((stop - start, 1)), np.cumsum(seg * seg, axis=1)], axis=1)
        e0 = sq[:, N]
        el = sq[:, np.arange(lag_max + 2) + N] - sq[:, np.arange(lag_max + 2)]
        denom = np.sqrt(np.maximum(e0[:, None] * el, 0.0))
        quiet = e0 < 1e-10 * N
        with np.errstate(invalid="ignore", divide="ignore"):
            nccf = np.where(denom > 0, r / np.where(denom > 0, denom, 1.0), 0.0)
        f0[start:stop] = _pick_lags(nccf, lags, quiet)
    return f0


def _pick_lags(nccf: np.ndarray, lags: np.ndarray, quiet: np.ndarray) -> np.ndarray:
    out = np.zeros(len(nccf))
    cand = nccf[:, lags]
    best = cand.max(axis=1)
    for i in np.flatnonzero((best >= VOICING_THRESHOLD) & ~quiet):
        c = cand[i]
        row = nccf[i]
        ok = c >= 0.9 * best[i]
        j = int(np.argmax(ok))
        # climb to the local maximum
        while j + 1 < len(c) and c[j + 1] > c[j]:
            j += 1
        lag = lags[j]
        a, b, d = row[lag - 1], row[lag], row[lag + 1]
        den = a - 2 * b + d
        shift = 0.5 * (a - d) / den if den < 0 else 0.0
        freq = SAMPLE_RATE / (lag + float(np.clip(shift, -0.5, 0.5)))
        if F0_MIN <= freq <= F0_MAX:
            out[i] = freq
    return out


def f0_stats(track: np.ndarray) -> F0Stats:
    """Mean and std of log F0 over voiced frames."""
    track = np.asarray(track, dtype=np.float64)
    voiced = track[track > 0]
    if len(voiced) < 10:
        raise InsufficientVoicedFrames(f"need at least 10 voiced frames, got {len(voiced)}")
    lf = np.log(voiced)
    sigma = float(lf.std())
    if sigma < 1e-6:
        raise InsufficientVariance(f"log-F0 std {sigma:.3g} too small for a Gaussian transform")
    return F0Stats(float(lf.mean()), sigma)


def f0_convert(track: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    """Log-Gaussian normalized F0 transform; unvoiced frames stay 0."""
    track = np.asarray(track, dtype=np.float64)
    out = np.zeros_like(track)
    v = track > 0
    out[v] = np.exp(tgt.mu + (tgt.sigma / src.sigma) * (np.log(track[v]) - src.mu))
    return out


# ----------------------------------------------------------------- mel cepstrum

def warp_frequency(omega: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Bilinear (all-pass) frequency warping of normalized angular frequency."""
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


@lru_cache(maxsize=8)
def _mcep_matrices(alpha: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(0.0, np.pi, NBINS)
    # encode: sample log-envelope at unwarped positions of a uniform warped grid
    lin_pos = warp_frequency(grid, -alpha)
    interp = CubicSpline(grid, np.eye(NBINS), axis=0)(lin_pos)  # (NBINS, NBINS)
    cosines = dct(np.eye(NBINS), type=1, axis=0)[: order + 1] / (2.0 * (NBINS - 1))
    encode = cosines @ interp  # (order+1, NBINS)
    m = np.arange(order + 1)
    basis = np.cos(warp_frequency(grid, alpha)[:, None] * m[None, :])
    basis[:, 1:] *= 2.0
    return encode, basis


def mcep_encode(envelope: np.ndarray, alpha: float = ALPHA, order: int = N_MCEP):
    """Mel-cepstrum of a magnitude envelope.

    ``envelope`` is (..., 513).  Returns ``(coeffs, c0)`` where ``coeffs``
    holds c1..c_order and ``c0`` is the mean log level on the warped axis.
    """
    env = np.maximum(np.asarray(envelope, dtype=np.float64), ENVELOPE_FLOOR)
    if env.shape[-1] != NBINS:
        raise DataError(f"envelope must have {NBINS} bins, got {env.shape[-1]}")
    enc, _ = _mcep_matrices(alpha, order)
    c = np.log(env) @ enc.T
    return c[..., 1:], c[..., 0]


def mcep_decode(coeffs: np.ndarray, c0, alpha: float = ALPHA) -> np.ndarray:
    """Magnitude envelope (..., 513) from c1..c24 and c0."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    order = coeffs.shape[-1]
    _, basis = _mcep_matrices(alpha, order)
    full = np.concatenate([np.asarray(c0, dtype=np.float64)[..., None], coeffs], axis=-1)
    return np.exp(full @ basis.T)


def mel_cepstral_distortion(a: np.ndarray, b: np.ndarray) -> float:
    """Frame-averaged MCD in dB over c1..c24."""
    diff = np.asarray(a) - np.asarray(b)
    return float(np.mean(10.0 / np.log(10.0) * np.sqrt(2.0 * np.sum(diff * diff, axis=-1))))


# ----------------------------------------------------------------- analysis

def _frame_windows(f0_chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pitch-adaptive Hann windows (3 periods) on a centred NFFT grid."""
    ref = np.where(f0_chunk > 0, f0_chunk, UNVOICED_F0)
    length = 3.0 * SAMPLE_RATE / ref
    n = np.arange(NFFT) - NFFT // 2
    inside = np.abs(n)[None, :] < length[:, None] / 2
    w = np.where(inside, 0.5 + 0.5 * np.cos(2 * np.pi * n[None, :] / length[:, None]), 0.0)
    return w, ref, n


def _smooth_power(power: np.ndarray, width_bins: np.ndarray) -> np.ndarray:
    """Rectangular smoothing of each row over ``width_bins`` (fractional) bins."""
    T, F = power.shape
    ext =np.concatenate([power[:, 1:F - 1][:, ::-1], power, power[:, F - 2:0:-1]], axis=1)
    offset = F - 2
    csum = np.concatenate([np.zeros((T, 1)), np.cumsum(ext, axis=1)], axis=1)
    half = width_bins[:, None] / 2.0
    k = np.arange(F)[None, :] + offset + 0.5
    lo = k - half
    hi = k + half

    def at(pos):
        pos = np.clip(pos, 0, csum.shape[1] - 1.000001)
        i = np.floor(pos).astype(np.int64)
        frac = pos - i
        a = np.take_along_axis(csum, i, axis=1)
        b = np.take_along_axis(csum, i + 1, axis=1)
        return a + frac * (b - a)

    return (at(hi) - at(lo)) / width_bins[:, None]


def _lifter(log_power: np.ndarray, cutoff: np.ndarray) -> np.ndarray:
    cep = np.fft.irfft(log_power, NFFT, axis=1)
    q = np.minimum(np.arange(NFFT), NFFT - np.arange(NFFT))
    cep *= q[None, :] < cutoff[:, None]
    return np.fft.rfft(cep, axis=1).real


def _band_masks() -> np.ndarray:
    freqs = np.arange(NBINS) * SAMPLE_RATE / NFFT
    masks = np.zeros((N_BANDS, NBINS))
    for b in range(N_BANDS):
        lo, hi = AP_BAND_EDGES[b], AP_BAND_EDGES[b + 1]
        masks[b] = (freqs >= lo) & ((freqs < hi) if b < N_BANDS - 1 else (freqs <= hi))
    return masks


def spectral_envelope(clip: AudioClip, f0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Envelope magnitude (T, 513) and band aperiodicity (T, 4)."""
    x = clip.samples
    T = len(f0)
    pad = NFFT
    lag_pad = int(math.ceil(SAMPLE_RATE / F0_MIN)) + 2
    padded = np.zeros(len(x) + 2 * pad + lag_pad)
    padded[pad + lag_pad: pad + lag_pad + len(x)] = x
    env = np.empty((T, NBINS))
    ap = np.ones((T, N_BANDS))
    masks = _band_masks()
    omega = 2 * np.pi * np.arange(NBINS) / NFFT
    for start in range(0, T, _CHUNK // 2):
        stop = min(T, start + _CHUNK // 2)
        fc = f0[start:stop]
        w, ref, n = _frame_windows(fc)
        centers = np.arange(start, stop) * HOP + pad + lag_pad
        seg = padded[centers[:, None] + n[None, :]]
        wsum = np.sum(w * w, axis=1)
        spec = np.fft.rfft(seg * w, axis=1)
        power = (spec.real ** 2 + spec.imag ** 2) / wsum[:, None]
        smooth = _smooth_power(power, ref * NFFT / SAMPLE_RATE)
        logp = np.log(np.maximum(smooth, ENVELOPE_FLOOR ** 2))
        logp = _lifter(logp, SAMPLE_RATE / ref)
        env[start:stop] = np.exp(0.5 * logp)

        voiced = fc > 0
        if np.any(voiced):
            period = SAMPLE_RATE / fc[voiced]
            pint = np.floor(period).astype(np.int64)
            frac = period - pint
            lagged = padded[(centers[voiced] - pint)[:, None] + n[None, :]]
            lspec = np.fft.rfft(lagged * w[voiced], axis=1) * np.exp(-1j * omega[None, :] * frac[:, None])
            xs = spec[voiced]
            cross = (np.conj(lspec) * xs).real @ masks.T
            lpow = (np.abs(lspec) ** 2) @ masks.T
            xpow = (np.abs(xs) ** 2) @ masks.T
            gain = np.where(lpow > 0, cross / np.maximum(lpow, 1e-30), 0.0)
            resid = xpow - 2 * gain * cross + gain * gain * lpow
            ratio = np.clip(np.where(xpow > 0, resid / np.maximum(xpow, 1e-30), 1.0), 0.0, 1.0)
            # pitch prediction leaves q(2-q) of a noise fraction q; invert that
            ap[start:stop][voiced] = 1.0 - np.sqrt(1.0 - ratio)
    return env, ap


def analyze(clip: AudioClip) -> VoiceFeatures:
    """F0, mel-cepstrum, energy and aperiodicity at a 5 ms hop."""
    _check_rate(clip)
    if len(clip) < SAMPLE_RATE // 10:
        raise ClipTooShort(f"analysis needs at least 100 ms, got {clip.duration * 1000:.1f} ms")
    f0 = estimate_f0(clip)
    env, ap = spectral_envelope(clip, f0)
    coeffs, c0 = mcep_encode(env)
    return VoiceFeatures(f0=f0, mcep=coeffs, energy=c0, ap=ap)


# ----------------------------------------------------------------- synthesis

def _min_phase(log_mag: np.ndarray) -> np.ndarray:
    cep = np.fft.irfft(log_mag, NFFT, axis=-1)
    fold = np.zeros_like(cep)
    fold[..., 0] = cep[..., 0]
    fold[..., 1:NFFT // 2] = 2.0 * cep[..., 1:NFFT // 2]
    fold[..., NFFT // 2] = cep[..., NFFT // 2]
    return np.exp(np.fft.rfft(fold, axis=-1))


def _pulse_times(f0: np.ndarray, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Fractional glottal pulse positions and the local period at each."""
    centers = np.arange(len(f0)) * HOP
    t = np.arange(n_samples)
    inst = np.interp(t, centers, f0)
    voiced_at = np.interp(t, centers, (f0 > 0).astype(float)) > 0.999
    inst = np.where(voiced_at, inst, 0.0)
    phase = np.cumsum(inst / SAMPLE_RATE)
    times, periods = [], []
    k_prev = np.floor(phase)
    crossings = np.flatnonzero((k_prev[1:] > k_prev[:-1]) & voiced_at[1:] & voiced_at[:-1]) + 1
    for i in crossings:
        target = k_prev[i]
        frac = (target - phase[i - 1]) / (phase[i] - phase[i - 1])
        times.append(i - 1 + frac)
        periods.append(SAMPLE_RATE / inst[i])
    return np.asarray(times), np.asarray(periods)


def synthesize(features: VoiceFeatures, seed: int = 0, n_samples: int | None = None) -> AudioClip:
    """Pulse-plus-noise excitation through the decoded envelope, overlap-added.

    ``n_samples`` defaults to the span of the frame centres; pass the
    original clip length to get a length-exact resynthesis.
    """
    T = len(features)
    span = (T - 1) * HOP + 1 if T else 0
    n_samples = span if n_samples is None else int(n_samples)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(2 * HOP) / (2 * HOP))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(span + 2 * HOP)
    out = np.zeros(span + 2 * HOP + NFFT)
    times, periods = _pulse_times(features.f0, span)
    masks = _band_masks()
    omega = 2 * np.pi * np.arange(NBINS) / NFFT
    order = np.argsort(times)
    times, periods = times[order], periods[order]

    for start in range(0, T, _CHUNK // 2):
        stop = min(T, start + _CHUNK // 2)
        env = mcep_decode(features.mcep[start:stop], features.energy[start:stop], features.alpha)
        H = _min_phase(np.log(np.maximum(env, ENVELOPE_FLOOR)))
        ap = features.ap[start:stop]
        voiced = features.f0[start:stop] > 0
        per_w = np.where(voiced[:, None], np.sqrt(np.clip(1.0 - ap, 0, 1)), 0.0) @ masks
        noi_w = np.where(voiced[:, None], np.sqrt(np.clip(ap, 0, 1)), 1.0) @ masks
        for j, t in enumerate(range(start, stop)):
            s0 = t * HOP - HOP  # segment start in signal coordinates
            nseg = noise[s0 + HOP: s0 + 3 * HOP] * win
            spec = np.fft.rfft(nseg, NFFT) * noi_w[j]
            if voiced[j]:
                lo = np.searchsorted(times, s0)
                hi = np.searchsorted(times, s0 + 2 * HOP)
                if hi > lo:
                    rel = times[lo:hi] - s0
                    amp = np.sqrt(periods[lo:hi]) * np.interp(rel, np.arange(2 * HOP), win)
                    pulses = (amp[:, None] * np.exp(-1j * omega[None, :] * rel[:, None])).sum(axis=0)
                    spec = spec + pulses * per_w[j]
            seg = np.fft.irfft(spec * H[j], NFFT)
            out[s0 + HOP: s0 + HOP + NFFT] += seg
    y = out[HOP: HOP + span]
    y = np.pad(y, (0, max(0, n_samples - span)))[:n_samples]
    return AudioClip(y, SAMPLE_RATE)


# ----------------------------------------------------------------- CSV dumps

def feature_csv_header() -> list[str]:
    return (["f0", "energy"] + [f"c{i}" for i in range(1, N_MCEP + 1)]
            + [f"ap{i}" for i in range(1, N_BANDS + 1)])


def write_features_csv(features: VoiceFeatures, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(feature_csv_header())
        for t in range(len(features)):
            row = [features.f0[t], features.energy[t], *features.mcep[t], *features.ap[t]]
            w.writerow([repr(float(v)) for v in row])


def read_features_csv(path) -> VoiceFeatures:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != feature_csv_header():
        raise DataError(f"{path}: unexpected feature CSV header")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    except ValueError as exc:
        raise DataError(f"{path}: malformed feature row ({exc})") from None
    return VoiceFeatures(
        f0=data[:, 0], energy=data[:, 1], mcep=data[:, 2:2 + N_MCEP], ap=data[:, 2 + N_MCEP:]
    )
