"""Synthetic singers, melodies and accompaniment.

Everything is generated from a seed so training sets, test sets and whole
demo runs are reproducible without any recorded audio.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio_io import AudioClip, store_wav
from .cyclegan import CycleGAN, LossWeights, TrainConfig, convert_mcep, train, write_epoch_csv
from .eval_metrics import MetricsReport, export_metrics_csv, global_variance, modulation_spectrum, rmse_summary
from .features import HOP, SAMPLE_RATE, analyze, f0_stats, n_frames_for
from .pipeline import ConversionJob, convert_song, run_conversion, save_converter, save_separator
from .separation import SeparatorModel, SeparatorTrainConfig, separate, si_snr, train_separator
from .transfer import flatten_models, transfer_init

# relative formant scalings (F1, F2, F3) for five vowel colours
VOWELS = np.array([
    [1.00, 1.00, 1.00],
    [0.55, 1.85, 1.15],
    [0.75, 1.45, 1.05],
    [0.65, 0.70, 0.95],
    [0.50, 0.60, 0.90],
])

ATTACK_S = 0.02
RELEASE_S = 0.04
GLIDE_S = 0.03
TARGET_RMS = 0.1


@dataclass(frozen=True)
class SyntheticSinger:
    """Source-filter voice: harmonic excitation through three formants."""

    name: str
    f0_center: float
    f0_range: float = 7.0          # melody span in semitones
    formants: tuple = ((700.0, 80.0), (1200.0, 90.0), (2600.0, 120.0))
    tilt_db: float = -6.0          # per octave above 100 Hz
    vibrato_rate: float = 5.5      # Hz
    vibrato_depth: float = 0.3     # semitones
    aspiration: float = 0.02       # noise level relative to voicing
    vowel_spread: float = 1.0      # how far vowels move the formants

    def __post_init__(self):
        if not 80.0 <= self.f0_center <= 400.0:
            raise ValueError(f"f0_center {self.f0_center} outside [80, 400] Hz")
        freqs = [f for f, _ in self.formants]
        if len(freqs) != 3 or any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError(f"formants must be three ascending frequencies, got {freqs}")
        if any(bw <= 0 for _, bw in self.formants):
            raise ValueError("formant bandwidths must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["formants"] = [list(f) for f in self.formants]
        return d


# source (A) and target (B) singers, plus a pair of "speakers" for the donor model
SINGER_A = SyntheticSinger("A", 140.0, formants=((650.0, 80.0), (1100.0, 90.0), (2500.0, 120.0)), tilt_db=-4.0,
                           vowel_spread=0.6)
SINGER_B = SyntheticSinger("B", 230.0, formants=((820.0, 100.0), (1450.0, 110.0), (3000.0, 150.0)), tilt_db=-8.0,
                           vibrato_rate=6.0, vibrato_depth=0.4, vowel_spread=1.1)
SPEAKER_X = SyntheticSinger("X", 120.0, f0_range=5.0, formants=((600.0, 90.0), (1050.0, 100.0), (2400.0, 130.0)),
                            tilt_db=-5.0, vibrato_depth=0.0, aspiration=0.04, vowel_spread=0.7)
SPEAKER_Y = SyntheticSinger("Y", 210.0, f0_range=5.0, formants=((780.0, 110.0), (1400.0, 120.0), (2900.0, 160.0)),
                            tilt_db=-9.0, vibrato_depth=0.0, aspiration=0.04, vowel_spread=1.0)


@dataclass(frozen=True)
class Note:
    semitones: float   # offset from the singer's f0_center
    duration: float    # seconds of voicing
    vowel: int = 0
    rest: float = 0.0  # silence after the note, seconds


def random_melody(seed: int, total_s: float, span: float = 7.0, note_s=(0.25, 0.6),
                  rest_s=(0.04, 0.15), n_vowels: int = len(VOWELS)) -> list[Note]:
    """Notes drawn until ``total_s`` seconds are filled."""
    rng = np.random.default_rng(seed)
    out: list[Note] = []
    t = 0.0
    while t < total_s:
        dur = float(rng.uniform(*note_s))
        rest = float(rng.uniform(*rest_s))
        out.append(Note(float(rng.integers(-int(span // 2), int(span - span // 2) + 1)), dur,
                        int(rng.integers(n_vowels)), rest))
        t += dur + rest
    return out


def melody_duration(melody) -> float:
    return float(sum(n.duration + n.rest for n in melody))


def _tracks(singer: SyntheticSinger, melody, seed: int, n: int):
    """Per-sample F0 (0 in rests), amplitude envelope and formant scale rows."""
    rng = np.random.default_rng(seed)
    f0 = np.zeros(n)
    amp = np.zeros(n)
    vowel = np.zeros(n, dtype=int)
    vib_phase = rng.uniform(0, 2 * np.pi)
    pos = 0
    prev_semi = None
    for note in melody:
        m = int(round(note.duration * SAMPLE_RATE))
        r = int(round(note.rest * SAMPLE_RATE))
        stop = min(n, pos + m)
        k = stop - pos
        if k > 0:
            t = np.arange(k) / SAMPLE_RATE
            semi = np.full(k, note.semitones)
            if prev_semi is not None and note.rest < 0.06:
                g = min(k, int(GLIDE_S * SAMPLE_RATE))
                semi[:g] = prev_semi + (note.semitones - prev_semi) * np.linspace(0, 1, g)
            vib = singer.vibrato_depth * np.sin(2 * np.pi * singer.vibrato_rate * t + vib_phase)
            vib *= np.clip(t / 0.15, 0, 1)  # vibrato sets in after the attack
            f0[pos:stop] = singer.f0_center * 2.0 ** ((semi + vib) / 12.0)
            a = np.ones(k)
            na, nr = int(ATTACK_S * SAMPLE_RATE), int(RELEASE_S * SAMPLE_RATE)
            a[:min(na, k)] = np.linspace(0, 1, na)[:min(na, k)]
            if k > nr:
                a[-nr:] *= np.linspace(1, 0, nr)
            amp[pos:stop] = a
            vowel[pos:stop] = note.vowel % len(VOWELS)
        prev_semi = note.semitones
        pos += m + r
        if pos >= n:
            break
    return f0, amp, vowel


def envelope_gain(singer: SyntheticSinger, freqs: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Formant-cascade magnitude response, unity at DC, with spectral tilt.

    ``scales`` (..., 3) multiplies the formant centre frequencies.
    """
    g = np.ones(np.broadcast_shapes(freqs.shape, scales.shape[:-1]))
    for i, (fc, bw) in enumerate(singer.formants):
        fi = fc * scales[..., i]
        hb = bw / 2.0
        g = g * (fi ** 2 + hb ** 2) / (np.sqrt((freqs - fi) ** 2 + hb ** 2) * np.sqrt((freqs + fi) ** 2 + hb ** 2))
    octaves = np.log2(np.maximum(freqs, 100.0) / 100.0)
    return g * 10.0 ** (singer.tilt_db * octaves / 20.0)


def _resonator_noise(singer: SyntheticSinger, noise: np.ndarray) -> np.ndarray:
    y = noise
    for fc, bw in singer.formants:
        r = math.exp(-math.pi * bw / SAMPLE_RATE)
        c = 2 * r * math.cos(2 * math.pi * fc / SAMPLE_RATE)
        y = lfilter([1 - c + r * r], [1.0, -c, r * r], y)
    return y


def synth_vocal(singer: SyntheticSinger, melody, seed: int = 0, duration: float | None = None) -> AudioClip:
    """Render ``melody`` for ``singer``; deterministic given the seed.

    Harmonics up to 7.5 kHz are summed with amplitudes read from the formant
    envelope at the current vowel; breath noise shaped by the same formants
    follows the note envelope.  The result is scaled to an RMS of 0.1.
    """
    if not melody:
        raise ValueError("melody must contain at least one note")
    total = duration if duration is not None else melody_duration(melody)
    n = int(round(total * SAMPLE_RATE))
    f0, amp, vowel = _tracks(singer, melody, seed, n)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    scales = 1.0 + singer.vowel_spread * (VOWELS[vowel] - 1.0)
    x = np.zeros(n)
    voiced = f0 > 0
    # formant gains change slowly: evaluate every hop and interpolate
    ctrl = np.arange(0, n, HOP)
    f0c = np.where(f0[ctrl] > 0, f0[ctrl], singer.f0_center)
    n_harm = int(7500.0 // (singer.f0_center * 2.0 ** (-singer.f0_range / 24.0 - 1.0 / 12.0)))
    for k in range(1, n_harm + 1):
        fk = k * f0c
        gk = np.where(fk < 7500.0, envelope_gain(singer, fk, scales[ctrl]), 0.0)
        gain = np.interp(np.arange(n), ctrl, gk)
        x += gain * np.cos(k * phase)
    x *= amp * voiced
    rng = np.random.default_rng(seed + 7919)
    breath = _resonator_noise(singer, rng.standard_normal(n)) * amp
    x += singer.aspiration * breath * (np.sqrt(np.mean(x * x)) / max(np.sqrt(np.mean(breath * breath)), 1e-12))
    rms = np.sqrt(np.mean(x * x))
    if rms > 0:
        x *= TARGET_RMS / rms
    return AudioClip(x, SAMPLE_RATE)


def reference_f0(singer: SyntheticSinger, melody, seed: int = 0, duration: float | None = None) -> np.ndarray:
    """Ground-truth F0 at the analysis frame rate (0 where the voice is silent)."""
    total = duration if duration is not None else melody_duration(melody)
    n = int(round(total * SAMPLE_RATE))
    f0, amp, _ = _tracks(singer, melody, seed, n)
    idx = np.minimum(np.arange(n_frames_for(n)) * HOP, n - 1)
    return np.where(amp[idx] > 0.5, f0[idx], 0.0)


# ----------------------------------------------------------------- accompaniment

def _chord_pad(n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    chord_len = int(rng.uniform(1.0, 2.0) * SAMPLE_RATE)
    roots = [0, 5, 7, 9, 3]
    base = float(rng.uniform(100.0, 160.0))
    for start in range(0, n, chord_len):
        stop = min(n, start + chord_len)
        root = roots[int(rng.integers(len(roots)))]
        seg = np.zeros(stop - start)
        tt = t[start:stop]
        for interval in (0, 4, 7):
            f = base * 2.0 ** ((root + interval) / 12.0)
            for h in range(1, 6):
                seg += np.sin(2 * np.pi * f * h * tt + rng.uniform(0, 2 * np.pi)) / h ** 1.5
        fade = min(len(seg) // 2, int(0.05 * SAMPLE_RATE))
        if fade:
            seg[:fade] *= np.linspace(0, 1, fade)
            seg[-fade:] *= np.linspace(1, 0, fade)
        out[start:stop] = seg
    return out


def _drum_loop(n: int, rng: np.random.Generator) -> np.ndarray:
    bpm = float(rng.uniform(90.0, 130.0))
    beat = int(60.0 / bpm * SAMPLE_RATE)
    out = np.zeros(n)
    k_len = int(0.15 * SAMPLE_RATE)
    tk = np.arange(k_len) / SAMPLE_RATE
    kick = np.sin(2 * np.pi * (50.0 * tk + 60.0 * (1 - np.exp(-tk / 0.03)) * 0.03)) * np.exp(-tk / 0.05)
    h_len = int(0.05 * SAMPLE_RATE)
    hat = lfilter([1.0, -1.0], [1.0, -0.3], rng.standard_normal(h_len)) * np.exp(-np.arange(h_len) / (0.01 * SAMPLE_RATE))
    for start in range(0, n, beat):
        seg = kick[: n - start]
        out[start:start + len(seg)] += seg
        off = start + beat // 2
        if off < n:
            seg = hat[: n - off] * 0.4
            out[off:off + len(seg)] += seg
    return out


ACCOMPANIMENT_KINDS = ("pad", "drums", "both")


def synth_mixture(vocal: AudioClip, accompaniment_kind: str = "both", snr_db: float = 0.0, seed: int = 0):
    """Accompaniment scaled so that 10*log10(E_vocal / E_acc) equals ``snr_db``.

    Returns (mix, vocal_ref, acc_ref) with mix = vocal_ref + acc_ref.
    """
    if accompaniment_kind not in ACCOMPANIMENT_KINDS:
        raise ValueError(f"accompaniment_kind must be one of {ACCOMPANIMENT_KINDS}")
    if not -10.0 <= snr_db <= 30.0:
        raise ValueError(f"snr_db {snr_db} outside [-10, 30]")
    rng = np.random.default_rng(seed)
    n = len(vocal)
    acc = np.zeros(n)
    if accompaniment_kind in ("pad", "both"):
        acc += _chord_pad(n, rng)
    if accompaniment_kind in ("drums", "both"):
        acc += _drum_loop(n, rng)
    ev = float(np.sum(vocal.samples ** 2))
    ea = float(np.sum(acc ** 2))
    if ea > 0 and ev > 0:
        acc *= math.sqrt(ev / (ea * 10.0 ** (snr_db / 10.0)))
    voc = vocal.samples.copy()
    return AudioClip(voc + acc, vocal.sample_rate), AudioClip(voc, vocal.sample_rate), AudioClip(acc, vocal.sample_rate)


# ----------------------------------------------------------------- demo experiment

@dataclass
class DemoConfig:
    """Sizes and budgets for :func:`demo_experiment`.

    Defaults keep the dataset counts of the reference experiment (228 training
    segments of 3 s, 15 test segments of 10 s per singer) at toy model sizes.
    """

    n_train: int = 228
    train_s: float = 3.0
    n_test: int = 15
    test_s: float = 10.0
    n_donor: int = 228
    sep_mixtures: int = 100
    sep_epochs: int = 8
    donor_epochs: int = 60
    vc_epochs: int = 6
    steps_per_epoch: int = 8
    batch_size: int = 8
    segment_frames: int = 128
    lr_g: float = 1e-3
    lr_d: float = 5e-4
    run_seeds: tuple = (0, 1, 2, 3, 4)
    write_audio: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        self.run_seeds = tuple(int(s) for s in self.run_seeds)
        if min(self.n_train, self.n_test, self.n_donor, self.sep_mixtures) < 1 or not self.run_seeds:
            raise ValueError("demo needs at least one item of every kind and one run seed")


@dataclass(frozen=True)
class _Item:
    singer: SyntheticSinger
    split: str
    index: int
    seed: int
    duration: float
    note_s: tuple = (0.25, 0.6)

    @property
    def stem(self) -> str:
        return f"{self.singer.name}_{self.split}_{self.index:03d}"


def _render(item: _Item):
    melody = random_melody(item.seed, item.duration, item.singer.f0_range, note_s=item.note_s)
    clip = synth_vocal(item.singer, melody, item.seed, duration=item.duration)
    return clip, analyze(clip)


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items, chunksize=8))


def _median(v) -> float:
    return float(np.median(np.asarray(v, dtype=np.float64)))


def demo_experiment(out_dir, seed: int = 0, config: DemoConfig | None = None, progress=None) -> dict:
    """Run the whole synthetic study and return (and write) its summary.

    Steps: render and analyze singers A/B (and donor speakers X/Y); train a
    separator on synthetic mixtures; train a donor converter on X→Y; for each
    run seed train A→B converters from scratch and from the donor; compare
    GV/MS of converted test features against the target singer; push one
    test song through the full split-convert-merge pipeline.

    ``summary.json`` contains no timings, so a fixed seed reproduces it
    byte for byte; timings go to ``timings.json``.
    """
    cfg = config or DemoConfig()
    out = Path(out_dir)
    for sub in ("audio", "models", "logs", "metrics", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: None)
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = round(now - clock, 3)
        clock = now

    base = int(seed) * 1_000_003
    speech_notes = (0.1, 0.3)
    groups = {
        "A_train": [_Item(SINGER_A, "train", i, base + i, cfg.train_s) for i in range(cfg.n_train)],
        "B_train": [_Item(SINGER_B, "train", i, base + 10_000 + i, cfg.train_s) for i in range(cfg.n_train)],
        # test melodies are shared between the singers so pairs are parallel
        "A_test": [_Item(SINGER_A, "test", i, base + 20_000 + i, cfg.test_s) for i in range(cfg.n_test)],
        "B_test": [_Item(SINGER_B, "test", i, base + 20_000 + i, cfg.test_s) for i in range(cfg.n_test)],
        "X_donor": [_Item(SPEAKER_X, "donor", i, base + 30_000 + i, cfg.train_s, speech_notes) for i in range(cfg.n_donor)],
        "Y_donor": [_Item(SPEAKER_Y, "donor", i, base + 40_000 + i, cfg.train_s, speech_notes) for i in range(cfg.n_donor)],
    }
    say("rendering synthetic singers")
    clips, feats, manifest = {}, {}, []
    for name, items in groups.items():
        results = _map(_render, items, cfg.n_jobs)
        clips[name] = [c for c, _ in results]
        feats[name] = [f for _, f in results]
        for item, clip in zip(items, clips[name]):
            path = None
            if cfg.write_audio:
                path = f"audio/{item.stem}.wav"
                store_wav(clip, out / path)
            manifest.append({"path": path, "singer_id": item.singer.name, "split": item.split,
                             "duration_s": item.duration, "seed": item.seed})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    lap("render")

    stats = {k: f0_stats(np.concatenate([f.f0 for f in feats[f"{k}_train"]])) for k in ("A", "B")}

    # separator on synthetic mixtures of both singers
    say("training separator")
    kinds = ACCOMPANIMENT_KINDS
    srng = np.random.default_rng(base + 50_000)
    pool = [c for pair in zip(clips["A_train"], clips["B_train"]) for c in pair][: cfg.sep_mixtures]
    mixtures = [synth_mixture(c, kinds[i % 3], float(srng.uniform(-5, 5)), base + 60_000 + i)
                for i, c in enumerate(pool)]
    separator = SeparatorModel(seed=base % 2**31)
    sep_log = train_separator(separator, mixtures, SeparatorTrainConfig(epochs=cfg.sep_epochs, seed=seed))
    save_separator(separator, out / "models" / "separator.ckpt", {"seed": seed, "created": "demo"})
    _write_rows(out / "logs" / "separator.csv", sep_log.FIELDS, sep_log.rows())
    test_mix, test_voc, _ = synth_mixture(clips["A_test"][0], "both", 0.0, base + 70_000)
    sep = separate(separator, test_mix)
    separation = {"mix_si_snr_db": si_snr(test_mix, test_voc), "separated_si_snr_db": si_snr(sep.vocals, test_voc),
                  "first_val_l1": sep_log.epochs[0]["val_l1"], "last_val_l1": sep_log.epochs[-1]["val_l1"]}
    lap("separator")

    def tcfg(epochs, run_seed):
        return TrainConfig(epochs=epochs, batch_size=cfg.batch_size, segment_frames=cfg.segment_frames,
                           lr_g=cfg.lr_g, lr_d=cfg.lr_d, seed=run_seed, steps_per_epoch=cfg.steps_per_epoch)

    def weights(epochs):
        return LossWeights(id_decay_epoch=max(1, int(0.2 * epochs)))

    say("training donor converter")
    donor = CycleGAN(seed=(base + 999) % 2**31)
    donor_log = train(donor, [f.mcep for f in feats["X_donor"]], [f.mcep for f in feats["Y_donor"]],
                      tcfg(cfg.donor_epochs, base + 999), weights(cfg.donor_epochs))
    write_epoch_csv(donor_log, out / "logs" / "donor.csv")
    save_converter(donor, out / "models" / "donor.ckpt", {"seed": seed, "created": "demo"})
    donor_tensors = flatten_models(donor.models())
    lap("donor")

    data_a = [f.mcep for f in feats["A_train"]]
    data_b = [f.mcep for f in feats["B_train"]]
    runs = []
    models = {}
    for rs in cfg.run_seeds:
        say(f"training A→B converters, run seed {rs}")
        scratch = CycleGAN(seed=rs)
        log_s = train(scratch, data_a, data_b, tcfg(cfg.vc_epochs, rs), weights(cfg.vc_epochs))
        transfer = CycleGAN(seed=rs)
        report = transfer_init(transfer.models(), donor_tensors)
        log_t = train(transfer, data_a, data_b, tcfg(cfg.vc_epochs, rs), weights(cfg.vc_epochs))
        write_epoch_csv(log_s, out / "logs" / f"scratch_seed{rs}.csv")
        write_epoch_csv(log_t, out / "logs" / f"transfer_seed{rs}.csv")
        runs.append({"seed": rs, "scratch_epoch1_cyc": log_s[0].cyc, "transfer_epoch1_cyc": log_t[0].cyc,
                     "jump_start_ratio": log_t[0].cyc / log_s[0].cyc,
                     "scratch_final_cyc": log_s[-1].cyc, "transfer_final_cyc": log_t[-1].cyc,
                     "transferred": len(report.transferred)})
        if not models:
            models = {"scratch": (scratch, log_s), "transfer": (transfer, log_t)}
    meta = {"f0_x": {"mu": stats["A"].mu, "sigma": stats["A"].sigma},
            "f0_y": {"mu": stats["B"].mu, "sigma": stats["B"].sigma}, "seed": seed, "created": "demo"}
    save_converter(models["transfer"][0], out / "models" / "converter_transfer.ckpt", meta)
    save_converter(models["scratch"][0], out / "models" / "converter_scratch.ckpt", meta)
    lap("converters")

    say("evaluating GV / MS")
    src = [f.mcep for f in feats["A_test"]]
    tgt = [f.mcep for f in feats["B_test"]]
    series = {"source": src, "target": tgt}
    for name, (model, _) in models.items():
        series[f"converted_{name}"] = [convert_mcep(model, m, cfg.segment_frames) for m in src]
    gv = {k: [global_variance(m) for m in v] for k, v in series.items()}
    ms = {k: [modulation_spectrum(m) for m in v] for k, v in series.items()}
    objective = {}
    for k in series:
        if k == "target":
            continue
        objective[k] = {"gv_rmse": rmse_summary(gv[k], gv["target"]).__dict__,
                        "gv_rmse_log": rmse_summary(gv[k], gv["target"], log=True).__dict__,
                        "ms_rmse": rmse_summary(ms[k], ms["target"]).__dict__}
    export_metrics_csv(MetricsReport(gv={k: np.mean(v, axis=0) for k, v in gv.items()},
                                     ms={k: np.mean(v, axis=0) for k, v in ms.items()},
                                     losses=models["transfer"][1]), out / "metrics")
    lap("evaluation")

    say("converting a test song end to end")
    song = out / "audio" / "demo_song.wav"
    store_wav(test_mix, song)
    job = ConversionJob(str(song), str(out / "audio" / "demo_song_converted.wav"),
                        str(out / "models" / "separator.ckpt"), str(out / "models" / "converter_transfer.ckpt"),
                        report_path=str(out / "reports" / "demo_song.json"), seed=seed)
    _, job_report = convert_song(job)
    clean, _ = run_conversion(clips["A_test"][0], None, models["transfer"][0], stats["A"], stats["B"],
                              skip_separation=True, seed=seed)
    conv_f0 = analyze(clean).f0
    median_f0 = float(np.median(conv_f0[conv_f0 > 0])) if np.any(conv_f0 > 0) else 0.0
    lap("pipeline")

    ratios = [r["jump_start_ratio"] for r in runs]
    summary = {
        "seed": seed,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()
                   if k not in ("n_jobs", "write_audio")},
        "dataset": {k: len(v) for k, v in groups.items()},
        "singers": {s.name: s.to_json() for s in (SINGER_A, SINGER_B, SPEAKER_X, SPEAKER_Y)},
        "f0_stats": {k: {"mu": v.mu, "sigma": v.sigma} for k, v in stats.items()},
        "separator": separation,
        "donor": {"final_cyc": donor_log[-1].cyc},
        "runs": runs,
        "jump_start": {
            "median_ratio": _median(ratios),
            "median_scratch_final_cyc": _median([r["scratch_final_cyc"] for r in runs]),
            "median_transfer_final_cyc": _median([r["transfer_final_cyc"] for r in runs]),
        },
        "objective": objective,
        "pipeline": {"alignment_score": job_report.alignment_score, "clip_counts": job_report.clip_counts,
                     "input_duration_s": job_report.input_duration_s,
                     "output_duration_s": job_report.output_duration_s,
                     "converted_median_f0": median_f0, "target_f0_center": SINGER_B.f0_center},
    }
    js = summary["jump_start"]
    js["ratio_ok"] = js["median_ratio"] <= 0.7
    js["final_ok"] = js["median_transfer_final_cyc"] <= js["median_scratch_final_cyc"]
    conv = objective["converted_transfer"]
    summary["efficacy_ok"] = (conv["gv_rmse"]["mean"] < objective["source"]["gv_rmse"]["mean"]
                              and conv["ms_rmse"]["mean"] < objective["source"]["ms_rmse"]["mean"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    timings["total"] = round(sum(timings.values()), 3)
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    return summary


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
