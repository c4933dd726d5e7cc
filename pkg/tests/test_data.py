import dataclasses
import json

import numpy as np
import pytest

from laml_tts.data import (
    AcousticFeatures,
    FeatureCache,
    FeatureConfig,
    IngestionError,
    ShapeError,
    UtteranceRecord,
    cap_manifest,
    extract_features,
    load_manifest,
    load_wav,
    mel_filterbank,
    phoneme_average,
    select_minutes_budget,
    wav_duration,
    write_wav,
)

from oracles import phoneme_average_loop

CFG = FeatureConfig()


def tone(freq, seconds=1.0, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def test_frame_count_centered():
    assert CFG.n_frames(16000) == 63
    feats = extract_features(np.zeros(16000, dtype=np.float32))
    assert feats.mel.shape == (63, 80)


def test_silence():
    feats = extract_features(np.zeros(16000, dtype=np.float32))
    assert np.allclose(feats.frame_energy, 0.0)
    assert (feats.frame_pitch == 0).all()
    assert np.allclose(feats.mel, np.log(1e-5))


def test_tone_pitch():
    feats = extract_features(tone(220.0))
    voiced = feats.frame_pitch[feats.frame_pitch > 0]
    assert voiced.size > 50
    assert np.all(np.abs(voiced - 220.0) <= 5.0)


def test_tone_energy_and_mel_peak():
    feats = extract_features(tone(1000.0))
    assert (feats.frame_energy[2:-2] > 1.0).all()
    fb = mel_filterbank(CFG)
    peak_bin = int(np.argmax(feats.mel[30]))
    centre = np.argmax(fb[peak_bin]) * CFG.sample_rate / CFG.n_fft
    assert abs(centre - 1000.0) < 120


def test_mel_filterbank_shape_and_coverage():
    fb = mel_filterbank(CFG)
    assert fb.shape == (80, CFG.n_fft // 2 + 1)
    assert (fb >= 0).all() and (fb.sum(axis=1) > 0).all()


def test_rejects_non_mono():
    with pytest.raises(IngestionError):
        extract_features(np.zeros((2, 100), dtype=np.float32))


def test_phoneme_average_examples():
    assert phoneme_average([2, 2, 4, 4], [2, 2]).tolist() == [2, 4]
    assert phoneme_average([0, 100, 0, 0], [2, 2], exclude_zeros=True).tolist() == [100, 0]
    assert phoneme_average([1, 1, 1, 1], [0, 4]).tolist() == [0, 1]
    with pytest.raises(ShapeError):
        phoneme_average([1, 2, 3], [1, 1])


def test_phoneme_average_matches_loop_oracle(rng):
    for _ in range(500):
        L = int(rng.integers(1, 8))
        durations = rng.integers(0, 6, size=L)
        if durations.sum() == 0:
            durations[0] = 1
        T = int(durations.sum())
        frames = rng.uniform(50, 300, size=T) * (rng.random(T) < 0.6)
        for exclude in (False, True):
            got = phoneme_average(frames, durations, exclude_zeros=exclude)
            np.testing.assert_allclose(got, phoneme_average_loop(frames, durations, exclude), rtol=1e-12, atol=0)


def test_energy_mass_preserved(rng):
    for _ in range(500):
        durations = rng.integers(0, 9, size=int(rng.integers(1, 12)))
        durations[rng.integers(durations.size)] += 1
        energy = rng.gamma(2.0, 3.0, size=int(durations.sum()))
        avg = phoneme_average(energy, durations)
        assert abs((avg * durations).sum() - energy.sum()) <= 1e-6 * energy.sum()


def test_acoustic_features_invariants():
    frames = extract_features(tone(150.0, 0.5))
    feats = AcousticFeatures.from_frames(frames)
    T = feats.n_frames
    durations = [T // 3, 0, T - T // 3]
    aligned = feats.with_durations(durations)
    assert aligned.unit_pitch.shape == aligned.unit_energy.shape == (3,)
    assert (aligned.unit_energy >= 0).all()
    assert aligned.normalized_unit_energy()[1] == 0.0
    with pytest.raises(ShapeError):
        feats.with_durations([T, 1])


def test_wav_round_trip(tmp_path):
    path = tmp_path / "x.wav"
    write_wav(path, tone(300.0, 0.25))
    back = load_wav(path)
    assert back.shape == (4000,)
    assert np.max(np.abs(back - tone(300.0, 0.25))) < 1e-4
    assert wav_duration(path) == pytest.approx(0.25)


def test_load_wav_resamples(tmp_path):
    path = tmp_path / "x.wav"
    write_wav(path, tone(300.0, 0.5, sr=8000), sample_rate=8000)
    assert load_wav(path).shape == (8000,)


def test_load_wav_errors(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not audio")
    with pytest.raises(IngestionError):
        load_wav(bad)


# -- manifests ----------------------------------------------------------------


def _manifest(tmp_path, per_language):
    wav = tmp_path / "a.wav"
    write_wav(wav, tone(200.0, 1.0))
    lines = []
    for lang, n in per_language.items():
        for i in range(n):
            lines.append(json.dumps({"audio_path": "a.wav", "transcript": f"t{i}", "language_id": lang, "speaker_id": "s"}))
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_manifest_relative_paths(tmp_path):
    m = load_manifest(_manifest(tmp_path, {0: 2}))
    assert all(r.audio_path == str(tmp_path / "a.wav") for r in m.records)


def test_manifest_bad_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"audio_path": "a.wav"}\n', encoding="utf-8")
    with pytest.raises(IngestionError):
        load_manifest(path)


def test_cap(tmp_path):
    m = load_manifest(_manifest(tmp_path, {0: 30, 1: 5}))
    capped = cap_manifest(m, cap=10, seed=3)
    counts = {k: len(v) for k, v in capped.by_language().items()}
    assert counts == {0: 10, 1: 5}
    assert cap_manifest(m, cap=10, seed=3).records == capped.records


def test_minutes_budget():
    records = [UtteranceRecord(f"{i}.wav", "x", 0, "s") for i in range(50)]
    durations = [7.5] * 50
    chosen = select_minutes_budget(records, 60.0, seed=0, durations=durations)
    assert len(chosen) == 8
    assert len(select_minutes_budget(records, 5.0, durations=durations)) == 0


def test_record_validation(tmp_path):
    with pytest.raises(IngestionError):
        UtteranceRecord(str(tmp_path / "missing.wav"), "hi", 0, "s").validate()
    write_wav(tmp_path / "a.wav", tone(200.0, 0.1))
    with pytest.raises(IngestionError):
        UtteranceRecord(str(tmp_path / "a.wav"), "  ", 0, "s").validate()


# -- cache --------------------------------------------------------------------


def _cached_setup(tmp_path):
    wav = tmp_path / "a.wav"
    write_wav(wav, tone(180.0, 1.0))
    record = UtteranceRecord(str(wav), "hello", 0, "s")
    feats = AcousticFeatures.from_frames(extract_features(load_wav(wav)), speaker_embedding=np.ones(4, np.float32))
    return record, feats


def test_cache_round_trip(tmp_path):
    record, feats = _cached_setup(tmp_path)
    cache = FeatureCache(tmp_path / "cache")
    assert cache.read(record) is None
    aligned = feats.with_durations([30, 33])
    cache.write(record, aligned)
    back = cache.read(record)
    for name in ("mel", "frame_pitch", "frame_energy", "durations", "unit_pitch", "unit_energy", "speaker_embedding"):
        np.testing.assert_array_equal(getattr(back, name), getattr(aligned, name))
    assert not list((tmp_path / "cache").rglob("*.tmp"))


def test_cache_key_includes_config_and_transcript(tmp_path):
    record, feats = _cached_setup(tmp_path)
    FeatureCache(tmp_path / "cache").write(record, feats)
    other = FeatureCache(tmp_path / "cache", dataclasses.replace(CFG, hop_length=128))
    assert other.read(record) is None
    assert FeatureCache(tmp_path / "cache").read(dataclasses.replace(record, transcript="bye")) is None


def test_cache_ignores_foreign_files(tmp_path):
    record, feats = _cached_setup(tmp_path)
    cache = FeatureCache(tmp_path / "cache")
    path = cache.write(record, feats)
    path.write_bytes(b"garbage\n")
    assert cache.read(record) is None
