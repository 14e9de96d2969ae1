"""Split, convert and merge a song, with onset-based timing QA.

The merge is a plain sample-aligned sum: separation and conversion both
preserve timing, so the onset detector is used to verify alignment rather
than to re-segment.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d

from .audio_io import AudioClip, istft, load_wav, resample, stft, store_wav
from .cyclegan import CycleGAN, McepNorm, convert_features, convert_mcep
from .errors import DataError, SongConvError
from .features import HOP, SAMPLE_RATE, F0Stats, VoiceFeatures, analyze, f0_convert, mcep_decode, synthesize
from .separation import SeparatorModel, separate
from .transfer import architecture_hash, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SOFT_KNEE = 0.95
ONSET_TOLERANCE_S = 0.05


# ----------------------------------------------------------------- merge

def soft_clip(x: np.ndarray, knee: float = SOFT_KNEE) -> tuple[np.ndarray, int]:
    """Identity below ``knee``, tanh saturation towards ±1 above it.

    Returns the limited signal and the number of samples that exceeded the knee.
    """
    x = np.asarray(x, dtype=np.float64)
    over = np.abs(x) > knee
    n = int(np.count_nonzero(over))
    if not n:
        return x.copy(), 0
    y = x.copy()
    head = 1.0 - knee
    y[over] = np.sign(x[over]) * (knee + head * np.tanh((np.abs(x[over]) - knee) / head))
    return y, n


def overlay(vocals: AudioClip, accompaniment: AudioClip, offset_samples: int = 0) -> tuple[AudioClip, int]:
    """Sum ``vocals`` delayed by ``offset_samples`` with ``accompaniment``.

    The result spans both inputs (zero padded) and is soft clipped; the clip
    count is returned alongside.
    """
    if vocals.sample_rate != accompaniment.sample_rate:
        raise DataError(f"sample rates differ: {vocals.sample_rate} vs {accompaniment.sample_rate}")
    off = int(offset_samples)
    if off < 0:
        return overlay(accompaniment, vocals, -off)
    n = max(len(vocals) + off, len(accompaniment))
    out = np.zeros(n)
    out[off:off + len(vocals)] += vocals.samples
    out[:len(accompaniment)] += accompaniment.samples
    y, clipped = soft_clip(out)
    if clipped:
        log.info("overlay: %d samples above the soft-clip knee", clipped)
    return AudioClip(y, vocals.sample_rate), clipped


# ----------------------------------------------------------------- onsets

COARSE = (512, 160)   # frame, hop at 16 kHz: 32 ms / 10 ms
FINE = (128, 40)      # 8 ms / 2.5 ms
MIN_GAP_S = 0.05
FLUX_FLOOR = 2.0
FLUX_GAIN = 1000.0
FLUX_SPREAD = 3  # bins


def _flux(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Rectified log-magnitude spectral flux; entry t compares frame t with t-1.

    Frame t covers samples [t*hop - frame, t*hop), so a jump in flux at t
    places the onset just before t*hop.
    """
    n_frames = len(x) // hop + 1
    padded = np.concatenate([np.zeros(frame), x, np.zeros(hop)])
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame)[None, :]
    w = np.hanning(frame + 2)[1:-1]
    mag = np.log1p(FLUX_GAIN * np.abs(np.fft.rfft(padded[idx] * w, axis=1)))
    # compare against a frequency-max-filtered previous frame so vibrato
    # moving partials by a bin or two does not register as new energy
    prev = maximum_filter1d(mag, size=2 * FLUX_SPREAD + 1, axis=1)
    d = mag - np.concatenate([mag[:1], prev[:-1]], axis=0)
    return np.maximum(d, 0.0).sum(axis=1) / mag.shape[1]


def _median_filter(v: np.ndarray, half: int) -> np.ndarray:
    padded = np.pad(v, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1)
    return np.median(windows, axis=1)


def detect_onsets(clip: AudioClip, threshold: float = 1.5, floor: float = FLUX_FLOOR / 100.0) -> list[float]:
    """Onset times in seconds.

    A coarse spectral-flux pass (10 ms hop) picks peaks above an adaptive
    median threshold and an absolute floor, at least 50 ms apart; each is
    then refined to the strongest fine-scale (2.5 ms hop) flux peak within
    ±20 ms.
    """
    x = clip.samples
    sr = clip.sample_rate
    scale = sr / SAMPLE_RATE
    cf, ch = int(COARSE[0] * scale), max(1, int(COARSE[1] * scale))
    ff, fh = int(FINE[0] * scale), max(1, int(FINE[1] * scale))
    flux = _flux(x, cf, ch)
    thr = np.maximum(threshold * _median_filter(flux, 10), floor)
    cand = []
    for t in range(len(flux)):
        lo, hi = max(0, t - 3), min(len(flux), t + 4)
        if flux[t] > thr[t] and flux[t] == flux[lo:hi].max():
            cand.append(t)
    onsets: list[float] = []
    last_t = -np.inf
    fine = _flux(x, ff, fh)
    for t in cand:
        tc = t * ch / sr
        # refine within ±20 ms around the coarse estimate (which lags by up to one frame)
        lo = max(0, int((tc - cf / sr - 0.02) * sr / fh))
        hi = min(len(fine), int((tc + 0.02) * sr / fh) + 1)
        if hi <= lo:
            continue
        j = lo + int(np.argmax(fine[lo:hi]))
        t_on = max(0.0, (j * fh - ff / 2) / sr)
        if t_on - last_t >= MIN_GAP_S:
            onsets.append(t_on)
            last_t = t_on
    return onsets


def alignment_score(converted_vocals: AudioClip, original_vocals: AudioClip,
                    tolerance_s: float = ONSET_TOLERANCE_S) -> float:
    """Fraction of converted-vocal onsets within ``tolerance_s`` of an original-vocal onset.

    With no onsets in either clip the score is 1.0.
    """
    if converted_vocals.sample_rate != original_vocals.sample_rate:
        raise DataError("alignment_score needs clips at the same sample rate")
    conv = detect_onsets(converted_vocals)
    orig = np.asarray(detect_onsets(original_vocals))
    if not conv:
        return 1.0 if len(orig) == 0 else 0.0
    if len(orig) == 0:
        return 0.0
    hits = sum(1 for t in conv if np.min(np.abs(orig - t)) <= tolerance_s)
    return hits / len(conv)


# ----------------------------------------------------------------- model files

def save_separator(model: SeparatorModel, path, meta: dict | None = None) -> None:
    arch = model.architecture()
    save_checkpoint({"sep": model}, {"arch": arch, "arch_hash": architecture_hash(arch), **(meta or {})}, path)


def load_separator(path) -> SeparatorModel:
    ckpt = load_checkpoint(path)
    arch = ckpt.meta.get("arch")
    if not arch or arch.get("kind") != "separator":
        raise DataError(f"{path} is not a separator checkpoint")
    model = SeparatorModel.from_architecture(arch)
    model.load_state_dict(ckpt.group("sep"))
    return model


def save_converter(model: CycleGAN, path, meta: dict | None = None) -> None:
    arch = model.architecture()
    full = {"arch": arch, "arch_hash": architecture_hash(arch)}
    if model.norm_x is not None:
        full["norm_x"] = model.norm_x.to_json()
    if model.norm_y is not None:
        full["norm_y"] = model.norm_y.to_json()
    full.update(meta or {})
    save_checkpoint(model.models(), full, path)


def load_converter(path) -> tuple[CycleGAN, dict]:
    ckpt = load_checkpoint(path)
    arch = ckpt.meta.get("arch")
    if not arch or arch.get("kind") != "cyclegan":
        raise DataError(f"{path} is not a converter checkpoint")
    model = CycleGAN.from_architecture(arch)
    for name, module in model.models().items():
        module.load_state_dict(ckpt.group(name))
    if "norm_x" in ckpt.meta:
        model.norm_x = McepNorm.from_json(ckpt.meta["norm_x"])
    if "norm_y" in ckpt.meta:
        model.norm_y = McepNorm.from_json(ckpt.meta["norm_y"])
    return model, ckpt.meta


def stats_from_meta(meta: dict, key: str) -> F0Stats | None:
    d = meta.get(key)
    return F0Stats(float(d["mu"]), float(d["sigma"])) if d else None


# ----------------------------------------------------------------- conversion

@dataclass
class ConversionJob:
    input_path: str
    output_path: str
    separator_checkpoint: str | None = None
    converter_checkpoint: str | None = None
    src_stats: F0Stats | None = None
    tgt_stats: F0Stats | None = None
    skip_separation: bool = False
    vocoder_bypass: bool = False
    report_path: str | None = None
    seed: int = 0


@dataclass
class JobReport:
    input_path: str | None = None
    output_path: str | None = None
    mode: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    clip_counts: dict = field(default_factory=dict)
    alignment_score: float | None = None
    onsets: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    input_duration_s: float = 0.0
    output_duration_s: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


class StageError(SongConvError):
    """Wraps a failure with the pipeline stage that raised it."""


@contextmanager
def _stage(name: str, report: JobReport):
    t0 = time.perf_counter()
    try:
        yield
    except SongConvError as exc:
        exc.stage = name
        exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise
    finally:
        report.timings[name] = round(time.perf_counter() - t0, 6)


def envelope_filter(vocals: AudioClip, before: VoiceFeatures, after: VoiceFeatures,
                    frame_len: int = 1024, hop: int = 256) -> AudioClip:
    """Apply the converted/original envelope ratio to the vocal STFT.

    This skips resynthesis: pitch and excitation stay those of the input, only
    the spectral envelope (timbre and level) follows the conversion.
    """
    log_ratio = (np.log(mcep_decode(after.mcep, after.energy, after.alpha))
                 - np.log(mcep_decode(before.mcep, before.energy, before.alpha)))
    spec = stft(vocals, frame_len, hop)
    feat_t = np.arange(len(before)) * HOP
    stft_t = np.arange(spec.frames.shape[0]) * hop
    bins = np.arange(log_ratio.shape[1])
    if spec.frames.shape[1] != len(bins):
        # envelope grid is fixed at 513 bins; map onto the STFT grid
        src = np.linspace(0, 1, len(bins))
        dst = np.linspace(0, 1, spec.frames.shape[1])
        log_ratio = np.stack([np.interp(dst, src, row) for row in log_ratio])
    gain = np.empty(spec.frames.shape)
    for k in range(spec.frames.shape[1]):
        gain[:, k] = np.exp(np.interp(stft_t, feat_t, log_ratio[:, k]))
    return istft(spec.with_frames(spec.frames * gain))


def convert_vocals(vocals: AudioClip, converter: CycleGAN | None, src_stats: F0Stats | None,
                   tgt_stats: F0Stats | None, vocoder_bypass: bool = False, seed: int = 0,
                   report: JobReport | None = None) -> AudioClip:
    """Analyze, convert (MCEPs + F0) and resynthesize a vocal track.

    ``converter=None`` keeps the MCEPs; missing stats keep the F0.
    """
    report = report or JobReport()
    with _stage("analyze", report):
        feats = analyze(vocals)
    with _stage("convert", report):
        if converter is not None and src_stats is not None and tgt_stats is not None:
            new = convert_features(feats, converter, src_stats, tgt_stats)
        else:
            f0 = f0_convert(feats.f0, src_stats, tgt_stats) if src_stats and tgt_stats else feats.f0.copy()
            mcep = feats.mcep.copy()
            if converter is not None:
                mcep = convert_mcep(converter, feats.mcep)
            new = VoiceFeatures(f0, mcep, feats.energy.copy(), feats.ap.copy(), feats.alpha)
    with _stage("synthesize", report):
        if vocoder_bypass:
            return envelope_filter(vocals, feats, new)
        return synthesize(new, seed=seed, n_samples=len(vocals))


def run_conversion(mix: AudioClip, separator: SeparatorModel | None, converter: CycleGAN | None,
                   src_stats: F0Stats | None = None, tgt_stats: F0Stats | None = None,
                   skip_separation: bool = False, vocoder_bypass: bool = False, seed: int = 0,
                   report: JobReport | None = None) -> tuple[AudioClip, JobReport]:
    """In-memory split → convert → merge."""
    report = report or JobReport()
    report.mode = {"skip_separation": skip_separation, "vocoder_bypass": vocoder_bypass,
                   "identity_converter": converter is None}
    report.input_duration_s = mix.duration
    if mix.sample_rate != SAMPLE_RATE:
        with _stage("resample", report):
            mix = resample(mix, SAMPLE_RATE)
    with _stage("separate", report):
        if skip_separation:
            vocals, accomp = mix, AudioClip(np.zeros(len(mix)), mix.sample_rate)
        else:
            if separator is None:
                raise DataError("a separator model is required unless separation is skipped")
            res = separate(separator, mix)
            vocals, accomp = res.vocals, res.accompaniment
    converted = convert_vocals(vocals, converter, src_stats, tgt_stats, vocoder_bypass, seed, report)
    with _stage("merge", report):
        out, clipped = overlay(converted, accomp, 0)
        report.clip_counts["soft_clip"] = clipped
    with _stage("qa", report):
        report.alignment_score = alignment_score(converted, vocals)
        report.onsets = {"converted": len(detect_onsets(converted)), "original": len(detect_onsets(vocals))}
    report.output_duration_s = out.duration
    return out, report


def _sha256(path) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def convert_song(job: ConversionJob) -> tuple[AudioClip, JobReport]:
    """File-level conversion: load models and audio, run, write WAV and report."""
    report = JobReport(input_path=str(job.input_path), output_path=str(job.output_path))
    with _stage("load", report):
        for p in (job.input_path, job.separator_checkpoint, job.converter_checkpoint):
            if p is not None and not Path(p).exists():
                raise DataError(f"missing file {p}")
        mix = load_wav(job.input_path)
        separator = load_separator(job.separator_checkpoint) if job.separator_checkpoint and not job.skip_separation else None
        converter, src, tgt = None, job.src_stats, job.tgt_stats
        if job.converter_checkpoint:
            converter, meta = load_converter(job.converter_checkpoint)
            src = src or stats_from_meta(meta, "f0_x")
            tgt = tgt or stats_from_meta(meta, "f0_y")
    out, report = run_conversion(mix, separator, converter, src, tgt, job.skip_separation,
                                 job.vocoder_bypass, job.seed, report)
    with _stage("store", report):
        report.clip_counts["wav"] = store_wav(out, job.output_path)
    report.hashes = {"input": _sha256(job.input_path), "output": _sha256(job.output_path),
                     "separator": _sha256(job.separator_checkpoint) if separator is not None else None,
                     "converter": _sha256(job.converter_checkpoint)}
    if job.report_path:
        Path(job.report_path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return out, report


def _run_job(job: ConversionJob) -> dict:
    return convert_song(job)[1].to_json()


def run_jobs(jobs: list[ConversionJob], n_jobs: int = 1) -> list[dict]:
    """Independent jobs, optionally across worker processes; reports in input order."""
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, jobs))
