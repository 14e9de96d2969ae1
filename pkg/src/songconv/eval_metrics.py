"""Objective metrics on MCEP trajectories (GV, MS, RMSE) and MOS arithmetic.

MCEP sequences are (T, D) arrays at a 5 ms frame rate (200 frames/s).
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import hann
from .errors import DataError, IoFailure, ShapeMismatch

FRAME_RATE = 200.0
MS_SEGMENT = 64
MS_NFFT = 128
MS_FLOOR = 1e-12
MOS_MAX = 5


class TooFewFrames(DataError):
    pass


class EmptyTable(DataError):
    pass


class OutOfRangeScore(DataError, ValueError):
    pass


def _as_seq(mcep) -> np.ndarray:
    m = np.asarray(mcep, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a (T, D) trajectory, got shape {m.shape}")
    return m


# ----------------------------------------------------------------- GV / MS

def global_variance(mcep) -> np.ndarray:
    """Per-dimension population variance over time."""
    m = _as_seq(mcep)
    if m.shape[0] < 2:
        raise TooFewFrames(f"global variance needs at least 2 frames, got {m.shape[0]}")
    centred = m - m.mean(axis=0)
    return np.mean(centred * centred, axis=0)


def ms_frequencies(nfft: int = MS_NFFT, frame_rate: float = FRAME_RATE) -> np.ndarray:
    return np.arange(nfft // 2 + 1) * frame_rate / nfft


def _segments(x: np.ndarray, seg: int) -> np.ndarray:
    hop = seg // 2
    starts = np.arange(0, len(x) - seg + 1, hop)
    return x[starts[:, None] + np.arange(seg)[None, :]]


def modulation_spectrum(mcep, dim: int | None = None, segment: int = MS_SEGMENT, nfft: int = MS_NFFT) -> np.ndarray:
    """Log10 averaged periodogram of a coefficient trajectory.

    Half-overlapping Hann segments, zero padded to ``nfft``.  Each segment is
    split into its mean and the remainder; the remainder is windowed and the
    mean contributes only to the 0 Hz bin (with the window's DC gain), so a
    constant offset never leaks into the other bins.

    With ``dim=None`` every dimension is returned as a (D, nfft//2+1) array.
    """
    m = _as_seq(mcep)
    if m.shape[0] < segment:
        raise TooFewFrames(f"modulation spectrum needs at least {segment} frames, got {m.shape[0]}")
    if dim is None:
        return np.stack([modulation_spectrum(m, d, segment, nfft) for d in range(m.shape[1])])
    w = hann(segment)
    segs = _segments(m[:, dim], segment)
    means = segs.mean(axis=1, keepdims=True)
    spec = np.fft.rfft((segs - means) * w, n=nfft, axis=1)
    spec[:, 0] += means[:, 0] * w.sum()
    power = np.mean(np.abs(spec) ** 2, axis=0) / np.sum(w * w)
    return np.log10(np.maximum(power, MS_FLOOR))


# ----------------------------------------------------------------- RMSE

@dataclass
class RmseSummary:
    mean: float
    std: float
    per_pair: list[float]

    def __str__(self):
        return f"{self.mean:.3f} ± {self.std:.3f}"


def rmse_summary(converted, target, log: bool = False) -> RmseSummary:
    """RMSE per pair, then mean and population std across pairs.

    ``log=True`` compares log10 values (floored at 1e-12), useful for GV.
    """
    converted, target = list(converted), list(target)
    if len(converted) != len(target):
        raise ShapeMismatch(f"{len(converted)} converted vs {len(target)} target items")
    if not converted:
        raise ShapeMismatch("rmse_summary needs at least one pair")
    errs = []
    for a, b in zip(converted, target):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatch(f"pair shapes differ: {a.shape} vs {b.shape}")
        if log:
            a, b = np.log10(np.maximum(a, MS_FLOOR)), np.log10(np.maximum(b, MS_FLOOR))
        errs.append(float(np.sqrt(np.mean((a - b) ** 2))))
    e = np.asarray(errs)
    return RmseSummary(float(e.mean()), float(e.std()), errs)


def percent_improvement(before: float, after: float) -> float:
    """Relative reduction in percent: 100 * (1 - after / before)."""
    return 100.0 * (1.0 - after / before)


def relative_change(value: float, reference: float) -> float:
    """Relative change of ``value`` against ``reference`` in percent."""
    return 100.0 * (value - reference) / reference


# ----------------------------------------------------------------- MOS

MOS_FIELDS = ("clip_id", "rater_id", "method", "naturalness", "similarity")


@dataclass
class MosRating:
    clip_id: str
    rater_id: str
    method: str
    naturalness: int
    similarity: int


@dataclass
class MosTable:
    ratings: list[MosRating] = field(default_factory=list)

    def __post_init__(self):
        for r in self.ratings:
            for axis in ("naturalness", "similarity"):
                v = getattr(r, axis)
                if isinstance(v, bool) or int(v) != v or not 1 <= v <= MOS_MAX:
                    raise OutOfRangeScore(f"{axis} score {v!r} for clip {r.clip_id} is not an integer in 1..5")


def read_mos_csv(path) -> MosTable:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out = []
    for i, row in enumerate(rows):
        missing = [f for f in MOS_FIELDS if f not in row]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        try:
            nat, sim = int(row["naturalness"]), int(row["similarity"])
        except ValueError:
            raise OutOfRangeScore(f"{path} row {i + 2}: scores must be integers") from None
        out.append(MosRating(row["clip_id"], row["rater_id"], row["method"], nat, sim))
    return MosTable(out)


@dataclass
class MosResult:
    method: str
    n: int
    naturalness: float
    similarity: float

    @property
    def naturalness_pct(self) -> float:
        return 100.0 * self.naturalness / MOS_MAX

    @property
    def similarity_pct(self) -> float:
        return 100.0 * self.similarity / MOS_MAX

    def to_json(self) -> dict:
        return {"method": self.method, "n": self.n, "naturalness": self.naturalness,
                "similarity": self.similarity, "naturalness_pct": self.naturalness_pct,
                "similarity_pct": self.similarity_pct}


def mos_aggregate(table: MosTable) -> dict[str, MosResult]:
    if not table.ratings:
        raise EmptyTable("MOS table has no ratings")
    groups = defaultdict(list)
    for r in table.ratings:
        groups[r.method].append(r)
    out = {}
    for method, rs in groups.items():
        out[method] = MosResult(method, len(rs), float(np.mean([r.naturalness for r in rs])),
                                float(np.mean([r.similarity for r in rs])))
    return out


# ----------------------------------------------------------------- CSV export

@dataclass
class MetricsReport:
    """Data behind the GV, MS and training-loss plots.

    gv: series name -> (D,) vector; ms: series name -> (D, bins) array;
    losses: EpochLog rows (anything with ``FIELDS`` and ``row()``).
    """

    gv: dict = field(default_factory=dict)
    ms: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)


def _fmt(v) -> str:
    return repr(float(v))


def write_gv_csv(gv: dict, path) -> None:
    dims = {len(np.asarray(v)) for v in gv.values()} or {24}
    if len(dims) != 1:
        raise ShapeMismatch(f"GV series have different lengths {sorted(dims)}")
    (d,) = dims
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series"] + [f"gv{i + 1}" for i in range(d)])
        for name, vec in gv.items():
            w.writerow([name] + [_fmt(v) for v in np.asarray(vec)])


def read_gv_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: np.array([float(v) for v in r[1:]]) for r in rows[1:]}


def write_ms_csv(ms: dict, path, segment: int = MS_SEGMENT, nfft: int = MS_NFFT) -> None:
    freqs = ms_frequencies(nfft)
    with open(path, "w", newline="") as fh:
        fh.write(f"# segment={segment} hop={segment // 2} window=hann nfft={nfft} "
                 f"frame_rate={FRAME_RATE:g} floor={MS_FLOOR:g} unit=log10_power\n")
        w = csv.writer(fh)
        w.writerow(["series", "dim"] + [f"{f:g}Hz" for f in freqs])
        for name, curves in ms.items():
            curves = np.atleast_2d(np.asarray(curves))
            if curves.shape[1] != len(freqs):
                raise ShapeMismatch(f"MS series '{name}' has {curves.shape[1]} bins, expected {len(freqs)}")
            for d, row in enumerate(curves):
                w.writerow([name, d + 1] + [_fmt(v) for v in row])


def read_ms_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    out: dict[str, list] = defaultdict(list)
    for r in rows[1:]:
        out[r[0]].append([float(v) for v in r[2:]])
    return {k: np.array(v) for k, v in out.items()}


def write_losses_csv(losses: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if losses:
            w.writerow(losses[0].FIELDS)
        for entry in losses:
            row = entry.row()
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def export_metrics_csv(report: MetricsReport, path) -> dict[str, Path]:
    """Write gv.csv, ms.csv and losses.csv into directory ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {"gv": out / "gv.csv", "ms": out / "ms.csv", "losses": out / "losses.csv"}
        write_gv_csv(report.gv, files["gv"])
        write_ms_csv(report.ms, files["ms"])
        write_losses_csv(report.losses, files["losses"])
    except OSError as exc:
        raise IoFailure(f"cannot write metrics to {path}: {exc}") from exc
    return files
