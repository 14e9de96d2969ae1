import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from songconv.cyclegan import EpochLog
from songconv.errors import IoFailure, ShapeMismatch
from songconv.eval_metrics import (MOS_FIELDS, EmptyTable, MetricsReport, MosRating, MosTable, OutOfRangeScore,
                                   TooFewFrames, export_metrics_csv, global_variance, modulation_spectrum,
                                   mos_aggregate, ms_frequencies, percent_improvement, read_gv_csv, read_mos_csv,
                                   read_ms_csv, relative_change, rmse_summary)

finite = st.floats(-50, 50, allow_nan=False)


# ----------------------------------------------------------------- GV

def test_gv_examples():
    assert np.all(global_variance(np.full((10, 24), 3.0)) == 0)
    a = 0.75
    seq = np.zeros((40, 24))
    seq[:, 5] = a * (-1.0) ** np.arange(40)
    gv = global_variance(seq)
    assert gv[5] == a * a and gv.shape == (24,)
    with pytest.raises(TooFewFrames):
        global_variance(np.zeros((1, 24)))


def test_gv_two_pass_oracle(rng):
    for _ in range(5):
        seq = rng.standard_normal((int(rng.integers(2, 500)), 24)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        T = seq.shape[0]
        for d in range(24):
            mean = 0.0
            for t in range(T):
                mean += seq[t, d]
            mean /= T
            var = 0.0
            for t in range(T):
                var += (seq[t, d] - mean) ** 2
            var /= T
            assert abs(global_variance(seq)[d] - var) <= 1e-10 * var


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 6)), elements=finite),
       st.floats(-100, 100), st.floats(-4, 4))
def test_gv_shift_and_scale(seq, c, k):
    gv = global_variance(seq)
    scale = max(1.0, float(np.max(np.abs(seq))) + abs(c)) ** 2
    np.testing.assert_allclose(global_variance(seq + c), gv, atol=1e-9 * scale)
    np.testing.assert_allclose(global_variance(k * seq), k * k * gv, atol=1e-9 * scale * max(1, k * k))
    assert np.all(gv >= 0)


# ----------------------------------------------------------------- MS

def test_ms_constant_trajectory():
    ms = modulation_spectrum(np.full((128, 24), 2.0), 0)
    assert ms.shape == (65,)
    assert ms[0] > 0 and np.all(ms[1:] == math.log10(1e-12))


def test_ms_sinusoid_peak_bin():
    t = np.arange(400) / 200.0
    seq = np.zeros((400, 24))
    seq[:, 3] = np.sin(2 * np.pi * 12.5 * t)
    ms = modulation_spectrum(seq, 3)
    assert len(ms) == 65 and int(np.argmax(ms)) == 8
    assert ms_frequencies()[8] == 12.5


def _ms_oracle(x, seg=64, nfft=128):
    n = np.arange(seg)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / seg)
    acc = np.zeros(nfft // 2 + 1)
    count = 0
    for s in range(0, len(x) - seg + 1, seg // 2):
        chunk = x[s:s + seg]
        mu = sum(chunk) / seg
        for k in range(nfft // 2 + 1):
            re = im = 0.0
            for i in range(seg):
                v = (chunk[i] - mu) * w[i]
                re += v * math.cos(2 * math.pi * k * i / nfft)
                im -= v * math.sin(2 * math.pi * k * i / nfft)
            if k == 0:
                re += mu * w.sum()
            acc[k] += re * re + im * im
        count += 1
    return np.log10(np.maximum(acc / count / np.sum(w * w), 1e-12))


def test_ms_direct_dft_oracle(rng):
    for T in (64, 100, 257):
        x = np.cumsum(rng.standard_normal(T)) * 0.3
        seq = np.stack([x, -x], axis=1)
        np.testing.assert_allclose(modulation_spectrum(seq, 0), _ms_oracle(x), rtol=0, atol=1e-8)
        assert modulation_spectrum(seq).shape == (2, 65)


def test_ms_needs_64_frames():
    with pytest.raises(TooFewFrames):
        modulation_spectrum(np.zeros((63, 24)), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(64, 300), st.floats(-20, 20))
def test_ms_shift_only_moves_dc(seed, T, c):
    x = np.random.default_rng(seed).standard_normal((T, 1))
    a, b = modulation_spectrum(x, 0), modulation_spectrum(x + c, 0)
    np.testing.assert_allclose(a[1:], b[1:], atol=1e-9)


# ----------------------------------------------------------------- RMSE

def test_rmse_examples(rng):
    v = [rng.uniform(0, 1, 24) for _ in range(3)]
    s = rmse_summary(v, v)
    assert s.mean == 0 and s.std == 0
    s = rmse_summary([v[0] + 0.25], [v[0]])
    assert s.mean == pytest.approx(0.25, abs=1e-15)
    s = rmse_summary([np.ones(4) * 2, np.ones(4) * 4], [np.zeros(4), np.zeros(4)])
    assert (s.mean, s.std) == (3.0, 1.0)
    assert str(s) == "3.000 ± 1.000"
    with pytest.raises(ShapeMismatch):
        rmse_summary([np.ones(3)], [np.ones(4)])
    with pytest.raises(ShapeMismatch):
        rmse_summary([], [])


def test_rmse_log_domain():
    s = rmse_summary([np.full(5, 100.0)], [np.full(5, 1.0)], log=True)
    assert s.mean == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 10)), elements=st.integers(-400, 400)),
       arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 10)), elements=st.integers(-400, 400)))
def test_rmse_symmetric_and_zero_iff_equal(a, b):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    ab, ba = rmse_summary(list(a), list(b)), rmse_summary(list(b), list(a))
    assert ab.mean == ba.mean and ab.std == ba.std
    assert (ab.mean == 0) == bool(np.array_equal(a, b))


# ----------------------------------------------------------------- MOS

def test_improvement_percentages():
    gv, ms = percent_improvement(2.696, 1.735), percent_improvement(7.922, 6.833)
    assert round(gv, 1) == 35.6 and math.floor(gv) == 35
    assert round(ms, 1) == 13.7 and math.floor(ms) == 13


def _table(method_scores):
    rows = []
    for method, pairs in method_scores.items():
        for i, (nat, sim) in enumerate(pairs):
            rows.append(MosRating(f"c{i % 5}", f"r{i}", method, nat, sim))
    return MosTable(rows)


def test_mos_examples():
    # 50 ratings with similarity mean 3.46 and naturalness mean 2.68
    sims = [4] * 23 + [3] * 27
    nats = [3] * 34 + [2] * 16
    base = [(2, 1)] * 11 + [(1, 1)] * 9   # naturalness mean 1.55
    res = mos_aggregate(_table({"ours": list(zip(nats, sims)), "base": base}))
    assert res["ours"].similarity == pytest.approx(3.46)
    assert round(res["ours"].similarity_pct) == 69
    assert res["ours"].naturalness == pytest.approx(2.68)
    assert res["base"].naturalness == pytest.approx(1.55)
    assert relative_change(res["ours"].naturalness, res["base"].naturalness) == pytest.approx(72.903, abs=1e-3)
    full = mos_aggregate(_table({"m": [(5, 5)] * 7}))["m"]
    assert (full.naturalness, full.similarity_pct) == (5.0, 100.0)


def test_mos_errors():
    with pytest.raises(EmptyTable):
        mos_aggregate(MosTable([]))
    for bad in (0, 6, 2.5, True):
        with pytest.raises(OutOfRangeScore):
            MosTable([MosRating("c", "r", "m", bad, 3)])


def test_mos_csv(tmp_path):
    p = tmp_path / "mos.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MOS_FIELDS)
        w.writerows([["c1", "r1", "a", 4, 5], ["c1", "r2", "a", 2, 3], ["c2", "r1", "b", 1, 1]])
    res = mos_aggregate(read_mos_csv(p))
    assert res["a"].naturalness == 3.0 and res["a"].similarity == 4.0 and res["b"].n == 1
    p.write_text("clip_id,rater_id,method,naturalness,similarity\nc,r,m,x,1\n")
    with pytest.raises(OutOfRangeScore):
        read_mos_csv(p)
    with pytest.raises(IoFailure):
        read_mos_csv(tmp_path / "missing.csv")


# ----------------------------------------------------------------- CSV export

def test_export_round_trip(tmp_path, rng):
    gv = {"source": rng.uniform(0, 1, 24), "converted": rng.uniform(0, 1, 24) * 1e-7}
    ms = {"source": rng.standard_normal((24, 65)), "target": rng.standard_normal((2, 65))}
    losses = [EpochLog(e, *rng.uniform(0, 3, len(EpochLog.FIELDS) - 1)) for e in range(1, 8)]
    files = export_metrics_csv(MetricsReport(gv, ms, losses), tmp_path / "m")
    header = files["gv"].read_text().splitlines()[0].split(",")
    assert len(header) == 25 and header[0] == "series"
    back = read_gv_csv(files["gv"])
    for k in gv:
        assert np.array_equal(back[k], gv[k])
    back_ms = read_ms_csv(files["ms"])
    for k in ms:
        assert np.array_equal(back_ms[k], ms[k])
    assert files["ms"].read_text().startswith("# segment=64")
    rows = list(csv.reader(files["losses"].open()))
    assert rows[0] == list(EpochLog.FIELDS) and len(rows) - 1 == len(losses)


def test_export_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        export_metrics_csv(MetricsReport(), blocker / "sub")
