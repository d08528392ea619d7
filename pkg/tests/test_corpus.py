import filecmp

import numpy as np
import pytest

from leakylstm.corpus import (DatasetManifest, ManifestError, ManifestRow, db_to_gain,
                              ingest_wav_corpus, load_manifest, make_speaker, mix_utterances,
                              synth_speaker_corpus, synth_utterance, write_manifest)
from leakylstm.signal import SignalError, Waveform, analyze, write_wav


def wave(n, seed=0, sr=8000):
    return Waveform(np.random.default_rng(seed).uniform(-0.4, 0.4, n), sr)


def test_zero_gain_equal_lengths_is_plain_sum():
    u1, u2 = wave(800, 1), wave(800, 2)
    m = mix_utterances(u1, u2, (0.0, 0.0))
    assert np.array_equal(m.mixture.samples, u1.samples + u2.samples)


def test_mixture_truncated_to_shorter_utterance():
    m = mix_utterances(wave(8000), wave(12000, 1), (1.0, 2.0))
    assert len(m.mixture) == 8000
    assert all(len(s) == 8000 for s in m.sources)
    assert np.array_equal(m.mixture.samples, m.sources[0].samples + m.sources[1].samples)


def test_gain_602_db_doubles_amplitude():
    u1, u2 = wave(500, 3), wave(500, 4)
    m = mix_utterances(u1, u2, (0.0, 6.02))
    ratio = m.sources[1].samples / u2.samples
    assert np.all(np.abs(ratio - 2.0) < 1e-3)
    assert db_to_gain(6.02) == pytest.approx(10 ** (6.02 / 20), rel=1e-15)
    assert abs(db_to_gain(20 * np.log10(2)) - 2.0) < 1e-6


def test_random_gains_in_range_and_rate_mismatch():
    for seed in range(20):
        g = mix_utterances(wave(300), wave(300, 1), seed=seed).gains_db
        assert np.all((0 <= g) & (g <= 5))
    with pytest.raises(SignalError):
        mix_utterances(wave(300), wave(300, 1, sr=16000))


def band_energy(w, lo, hi):
    spec = analyze(w)
    freqs = np.arange(spec.bins.shape[1]) * 8000 / 256
    band = (freqs >= lo) & (freqs <= hi)
    return float(np.sum(np.abs(spec.bins[:, band]) ** 2))


def test_disjoint_pitch_speakers_separable_by_pitch_gate():
    rng = np.random.default_rng(0)
    low = make_speaker("low", rng, f0_range=(100, 140))
    high = make_speaker("high", rng, f0_range=(200, 260))
    for k in range(3):
        wl = synth_utterance(low, np.random.default_rng(10 + k), duration=1.5)
        wh = synth_utterance(high, np.random.default_rng(20 + k), duration=1.5)
        # a gate at the low F0 band keeps the low voice and rejects the high one,
        # whose energy sits at and above its own F0 band
        assert band_energy(wl, 90, 150) > 10 * band_energy(wh, 90, 150)
        assert band_energy(wh, 190, 270) > 10 * band_energy(wh, 90, 180)


def ltas(w):
    return np.log10(np.mean(np.abs(analyze(w).bins) ** 2, axis=0) + 1e-12)


def test_within_speaker_ltas_closer_than_across():
    speakers = [make_speaker(f"s{i}", np.random.default_rng(i)) for i in range(5)]
    spectra = {i: [ltas(synth_utterance(p, np.random.default_rng(100 * i + k), duration=1.5))
                   for k in range(2)] for i, p in enumerate(speakers)}
    within = np.mean([np.linalg.norm(a - b) for a, b in spectra.values()])
    across = np.mean([np.linalg.norm(spectra[i][0] - spectra[j][1])
                      for i in spectra for j in spectra if i != j])
    assert within < across


def test_synthetic_utterance_properties():
    p = make_speaker("x", np.random.default_rng(1))
    w = synth_utterance(p, np.random.default_rng(2))
    assert 8000 <= len(w) <= 24000
    assert w.sample_rate == 8000
    assert np.max(np.abs(w.samples)) < 0.26


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    m = synth_speaker_corpus(root / "a", num_speakers=6, utts_per_speaker=2, seed=5,
                             n_train=4, n_valid=2, n_test=2, held_out=2)
    return root, m


def test_corpus_is_deterministic(small_corpus):
    root, m = small_corpus
    synth_speaker_corpus(root / "b", num_speakers=6, utts_per_speaker=2, seed=5,
                         n_train=4, n_valid=2, n_test=2, held_out=2)
    files = sorted(p.relative_to(root / "a") for p in (root / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert filecmp.cmp(root / "a" / f, root / "b" / f, shallow=False), f


def test_corpus_manifest_round_trip_and_disjointness(small_corpus, tmp_path):
    root, m = small_corpus
    loaded = load_manifest(root / "a" / "manifest.csv")
    assert loaded.rows == m.rows
    assert not loaded.speakers("test") & loaded.speakers("train")
    write_manifest(tmp_path / "copy.csv", loaded)
    assert (tmp_path / "copy.csv").read_bytes() == (root / "a" / "manifest.csv").read_bytes()


def test_manifest_rejects_test_speaker_in_train():
    m = DatasetManifest([
        ManifestRow("m1", "train", ("a", "b"), ("x.wav", "y.wav"), (0.0, 0.0)),
        ManifestRow("m2", "test", ("b", "c"), ("y.wav", "z.wav"), (0.0, 0.0)),
    ])
    with pytest.raises(ManifestError, match="b"):
        m.validate()


def test_malformed_manifest_rejected(tmp_path):
    (tmp_path / "m.csv").write_text("mixture_id,split\nx,train\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.csv")


def test_empty_directory_gives_empty_manifest(tmp_path, caplog):
    m = ingest_wav_corpus(tmp_path)
    assert len(m) == 0
    assert "empty" in caplog.text


def test_ingest_wav_corpus(tmp_path):
    for s in range(5):
        (tmp_path / f"spk{s}").mkdir()
        for u in range(2):
            write_wav(tmp_path / f"spk{s}" / f"u{u}.wav", wave(2000, 10 * s + u))
    m = ingest_wav_corpus(tmp_path, held_out=2, mixtures_per_split=(3, 1, 2))
    assert [len(m.split(s)) for s in ("train", "validation", "test")] == [3, 1, 2]
    assert m.speakers("test") <= {"spk3", "spk4"}
    write_wav(tmp_path / "spk0" / "bad.wav", wave(100, sr=16000))
    with pytest.raises(SignalError):
        ingest_wav_corpus(tmp_path)
