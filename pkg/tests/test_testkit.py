import json

import numpy as np
import pytest

from songconv.audio_io import load_wav
from songconv.eval_metrics import global_variance
from songconv.features import analyze
from songconv.testkit import (ACCOMPANIMENT_KINDS, SINGER_A, SINGER_B, DemoConfig, Note, SyntheticSinger,
                              demo_experiment, melody_duration, random_melody, reference_f0, synth_mixture,
                              synth_vocal)

TINY = DemoConfig(n_train=8, n_test=2, test_s=3, n_donor=8, sep_mixtures=4, sep_epochs=1, donor_epochs=2,
                  vc_epochs=2, steps_per_epoch=2, run_seeds=(0, 1))


def test_singer_invariants():
    with pytest.raises(ValueError):
        SyntheticSinger("x", 50.0)
    with pytest.raises(ValueError):
        SyntheticSinger("x", 150.0, formants=((900.0, 80.0), (700.0, 80.0), (2500.0, 100.0)))
    assert SINGER_A.to_json()["formants"][0] == [650.0, 80.0]


@pytest.mark.parametrize("singer", [SINGER_A, SINGER_B])
def test_reanalyzed_f0_tracks_melody(singer):
    melody = random_melody(11, 3.0)
    clip = synth_vocal(singer, melody, 11)
    est = analyze(clip).f0
    ref = reference_f0(singer, melody, 11)
    n = min(len(est), len(ref))
    voiced = (ref[:n] > 0) & (est[:n] > 0)
    assert voiced.sum() > 0.5 * np.sum(ref[:n] > 0)
    assert np.mean(np.abs(est[:n][voiced] - ref[:n][voiced]) <= 3.0) >= 0.9


def test_vocal_deterministic_and_length():
    melody = [Note(0.0, 0.4, 1, 0.1), Note(2.0, 0.3, 2, 0.0)]
    a, b = synth_vocal(SINGER_A, melody, 5), synth_vocal(SINGER_A, melody, 5)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert len(a) == int(round(melody_duration(melody) * a.sample_rate))
    assert not np.array_equal(a.samples, synth_vocal(SINGER_A, melody, 6).samples)


def test_singers_have_distinct_gv():
    melody = random_melody(2, 4.0)
    gv_a = global_variance(analyze(synth_vocal(SINGER_A, melody, 2)).mcep)
    gv_b = global_variance(analyze(synth_vocal(SINGER_B, melody, 2)).mcep)
    assert np.linalg.norm(gv_a - gv_b) > 0.1


@pytest.mark.parametrize("kind", ACCOMPANIMENT_KINDS)
@pytest.mark.parametrize("snr", [-10.0, -3.0, 0.0, 7.5, 30.0])
def test_mixture_snr_and_sum(kind, snr):
    vocal = synth_vocal(SINGER_B, random_melody(4, 2.0), 4)
    mix, voc, acc = synth_mixture(vocal, kind, snr, 4)
    measured = 10 * np.log10(np.sum(voc.samples ** 2) / np.sum(acc.samples ** 2))
    assert abs(measured - snr) <= 0.1
    assert np.array_equal(mix.samples, voc.samples + acc.samples)
    if snr == 30.0:
        resid = np.sum((mix.samples - vocal.samples) ** 2) / np.sum(vocal.samples ** 2)
        assert 10 * np.log10(resid) <= -30.0 + 1e-9


def test_mixture_validation():
    vocal = synth_vocal(SINGER_A, random_melody(1, 1.0), 1)
    with pytest.raises(ValueError):
        synth_mixture(vocal, "strings")
    with pytest.raises(ValueError):
        synth_mixture(vocal, "pad", 31.0)


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    return [demo_experiment(tmp_path_factory.mktemp(f"demo{i}"), seed=0, config=TINY) for i in range(2)]


def test_demo_summary_deterministic(tiny_runs):
    a, b = tiny_runs
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_demo_outputs(tiny_runs, tmp_path_factory):
    out = tmp_path_factory.getbasetemp() / "demo00"
    summary = json.loads((out / "summary.json").read_text())
    assert summary == json.loads(json.dumps(tiny_runs[0]))
    manifest = json.loads((out / "manifest.json").read_text())
    assert {tuple(sorted(e)) for e in manifest} == {("duration_s", "path", "seed", "singer_id", "split")}
    splits = {}
    for e in manifest:
        splits.setdefault((e["singer_id"], e["split"]), []).append(e)
    assert len(splits[("A", "train")]) == TINY.n_train and len(splits[("B", "test")]) == TINY.n_test
    first = manifest[0]
    assert abs(load_wav(out / first["path"]).duration - first["duration_s"]) < 1e-3
    for name in ("gv.csv", "ms.csv", "losses.csv"):
        assert (out / "metrics" / name).exists()
    assert set(summary["jump_start"]) >= {"median_ratio", "ratio_ok", "final_ok"}
    assert len(summary["runs"]) == len(TINY.run_seeds)
