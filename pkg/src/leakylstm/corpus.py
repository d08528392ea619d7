"""Two-speaker mixtures, a synthetic speaker corpus and dataset manifests.

Synthetic speakers are additive source-filter voices: a harmonic source with
a speaker-specific F0 range is shaped by formant resonances that move between
phone targets drawn from the speaker's own inventory. Utterances are strings of
50-200 ms phone-like segments (voiced, fricative or pause).
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import SAMPLE_RATE, SignalError, Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

PAPER_SPLIT = {"train": 20000, "validation": 5000, "test": 3000, "held_out_speakers": 16}
MANIFEST_COLUMNS = ["mixture_id", "split", "speaker_1", "speaker_2", "source_1", "source_2",
                    "gain_1_db", "gain_2_db", "mixture"]
SPLITS = ("train", "validation", "test")


class ManifestError(ValueError):
    pass


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: list            # gained, truncated source Waveforms
    gains_db: np.ndarray
    speaker_ids: list

    def __post_init__(self):
        n = len(self.mixture)
        if any(len(s) != n for s in self.sources):
            raise ValueError("sources and mixture must have equal length")


@dataclass
class ManifestRow:
    mixture_id: str
    split: str
    speaker_ids: tuple
    sources: tuple           # paths, relative to the manifest directory
    gains_db: tuple
    mixture: str = ""


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]

    def speakers(self, split: str) -> set:
        return {s for r in self.split(split) for s in r.speaker_ids}

    def validate(self) -> None:
        seen = set()
        for r in self.rows:
            if r.split not in SPLITS:
                raise ManifestError(f"{r.mixture_id}: unknown split {r.split!r}")
            if r.mixture_id in seen:
                raise ManifestError(f"duplicate mixture id {r.mixture_id}")
            seen.add(r.mixture_id)
        overlap = self.speakers("test") & (self.speakers("train") | self.speakers("validation"))
        if overlap:
            raise ManifestError(f"test speakers also used for training: {sorted(overlap)}")

    def __len__(self):
        return len(self.rows)


def db_to_gain(db: float) -> float:
    return 10.0 ** (db / 20.0)


def mix_utterances(u1: Waveform, u2: Waveform, gains_db=None, seed: int = 0,
                   speaker_ids=("s1", "s2")) -> MixtureSample:
    """Scale each utterance by its gain, truncate to the shorter one and sum.

    Without explicit gains each utterance gets an independent uniform
    0-5 dB gain drawn from ``seed``.
    """
    if u1.sample_rate != u2.sample_rate:
        raise SignalError(f"sample rate mismatch: {u1.sample_rate} vs {u2.sample_rate}")
    if gains_db is None:
        gains_db = np.random.default_rng(seed).uniform(0.0, 5.0, size=2)
    gains_db = np.asarray(gains_db, dtype=np.float64)
    n = min(len(u1), len(u2))
    sources = [Waveform(u.samples[:n] * db_to_gain(g), u.sample_rate)
               for u, g in zip((u1, u2), gains_db)]
    mixture = Waveform(sources[0].samples + sources[1].samples, u1.sample_rate)
    return MixtureSample(mixture, sources, gains_db, list(speaker_ids))


# -- synthetic voices --------------------------------------------------------

@dataclass
class SpeakerProfile:
    speaker_id: str
    f0_range: tuple            # Hz
    formant_scale: float
    phones: np.ndarray         # [P, 3] formant targets (Hz)
    bandwidths: np.ndarray     # [3]
    tilt: float                # spectral tilt in dB/octave
    breathiness: float


_BASE_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [660, 1720, 2410],
    [570, 840, 2410], [440, 1020, 2240], [300, 870, 2240], [640, 1190, 2390],
    [490, 1350, 1690], [400, 1900, 2600],
], dtype=np.float64)


def make_speaker(speaker_id: str, rng: np.random.Generator, f0_range=None) -> SpeakerProfile:
    if f0_range is None:
        center = float(np.exp(rng.uniform(np.log(95), np.log(240))))
        f0_range = (center * 0.85, center * 1.15)
    scale = float(rng.uniform(0.85, 1.2))
    pick = rng.choice(len(_BASE_VOWELS), size=6, replace=False)
    phones = _BASE_VOWELS[pick] * scale * rng.uniform(0.92, 1.08, size=(6, 3))
    phones = np.minimum(phones, 3800.0)
    return SpeakerProfile(
        speaker_id=speaker_id,
        f0_range=(float(f0_range[0]), float(f0_range[1])),
        formant_scale=scale,
        phones=phones,
        bandwidths=rng.uniform(60, 140, size=3) * np.array([1.0, 1.3, 1.8]),
        tilt=float(rng.uniform(-9, -4)),
        breathiness=float(rng.uniform(0.01, 0.08)),
    )


def _envelope(freqs, formants, bandwidths, tilt_db_oct):
    """Magnitude response of three resonances plus a spectral tilt."""
    env = np.zeros_like(freqs)
    for m in range(3):
        F = formants[..., m]
        env = env + (1.0 / (1.0 + ((freqs - F) / bandwidths[m]) ** 2)) * (0.6 ** m)
    tilt = 10 ** (tilt_db_oct * np.log2(np.maximum(freqs, 50.0) / 100.0) / 20.0)
    return env * tilt


def synth_utterance(profile: SpeakerProfile, rng: np.random.Generator,
                    duration: float | None = None, sr: int = SAMPLE_RATE) -> Waveform:
    duration = rng.uniform(1.0, 3.0) if duration is None else duration
    n = int(round(duration * sr))
    ctrl_hop = 40  # samples between control points (5 ms)
    n_ctrl = n // ctrl_hop + 2
    formants = np.empty((n_ctrl, 3))
    f0 = np.empty(n_ctrl)
    voiced = np.empty(n_ctrl)
    fric = np.empty(n_ctrl)
    lo, hi = profile.f0_range
    f0_level = rng.uniform(lo, hi)
    i = 0
    prev = profile.phones[rng.integers(len(profile.phones))]
    while i < n_ctrl:
        seg = int(rng.uniform(0.05, 0.2) * sr / ctrl_hop)
        kind = rng.choice(3, p=[0.75, 0.12, 0.13])  # voiced, fricative, pause
        target = profile.phones[rng.integers(len(profile.phones))]
        start_f0, f0_level = f0_level, float(np.clip(f0_level * np.exp(rng.normal(0, 0.08)), lo, hi))
        for k in range(seg):
            if i >= n_ctrl:
                break
            r = min(1.0, k / max(1, seg // 3))
            formants[i] = prev + (target - prev) * r
            f0[i] = start_f0 + (f0_level - start_f0) * k / max(1, seg - 1)
            voiced[i] = 1.0 if kind == 0 else 0.0
            fric[i] = 1.0 if kind == 1 else 0.0
            i += 1
        prev = target
    # smooth on/off transitions
    kern = np.hanning(7)
    kern /= kern.sum()
    voiced = np.convolve(voiced, kern, mode="same")
    fric = np.convolve(fric, kern, mode="same")
    t_ctrl = np.arange(n_ctrl) * ctrl_hop
    t = np.arange(n)
    f0_s = np.interp(t, t_ctrl, f0)
    phase = 2 * np.pi * np.cumsum(f0_s) / sr
    nyq = sr / 2
    max_h = int(nyq / lo)
    ctrl_f0 = f0[:, None]
    harm = np.arange(1, max_h + 1)[None, :]
    hfreq = ctrl_f0 * harm
    amp = _envelope(hfreq, formants[:, None, :], profile.bandwidths, profile.tilt)
    amp = np.where(hfreq < nyq * 0.95, amp, 0.0) * voiced[:, None]
    out = np.zeros(n)
    for h in range(max_h):
        a_s = np.interp(t, t_ctrl, amp[:, h])
        if a_s.max() <= 0:
            continue
        out += a_s * np.sin((h + 1) * phase)
    noise = rng.normal(size=n)
    # fricatives: high-passed noise; breathiness: noise gated by voicing
    spec = np.fft.rfft(noise)
    fr = np.fft.rfftfreq(n, 1 / sr)
    hp = np.fft.irfft(spec * (fr > 2000 * profile.formant_scale), n)
    out += np.interp(t, t_ctrl, fric) * hp * 0.5
    out += np.interp(t, t_ctrl, voiced) * noise * profile.breathiness
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.25 / peak
    # recording noise floor; digital silence would hit the log-feature floor
    out += rng.normal(0.0, 3e-4, size=n)
    return Waveform(out, sr)


def _utt_job(args):
    profile, seed, path = args
    wave = synth_utterance(profile, np.random.default_rng(seed))
    write_wav(path, wave)
    return str(path)


def synth_speaker_corpus(out_dir: str | Path, num_speakers: int = 20, utts_per_speaker: int = 10,
                         seed: int = 0, n_train: int = 50, n_valid: int = 10, n_test: int = 10,
                         held_out: int = 4, jobs: int = 1) -> DatasetManifest:
    """Generate speakers, utterance WAVs, mixture WAVs and ``manifest.csv``."""
    out = Path(out_dir)
    (out / "utterances").mkdir(parents=True, exist_ok=True)
    (out / "mixtures").mkdir(parents=True, exist_ok=True)
    if not 0 < held_out < num_speakers - 1:
        raise ValueError("need at least two training speakers and one held-out speaker")
    root_seq = np.random.SeedSequence(seed)
    spk_seq, utt_seq, mix_seq = root_seq.spawn(3)
    speakers = [make_speaker(f"spk{i:03d}", np.random.default_rng(s))
                for i, s in enumerate(spk_seq.spawn(num_speakers))]
    utt_seeds = utt_seq.spawn(num_speakers * utts_per_speaker)
    jobs_args = []
    utts = {}
    for si, prof in enumerate(speakers):
        utts[prof.speaker_id] = []
        for ui in range(utts_per_speaker):
            rel = f"utterances/{prof.speaker_id}_{ui:03d}.wav"
            utts[prof.speaker_id].append(rel)
            jobs_args.append((prof, utt_seeds[si * utts_per_speaker + ui], out / rel))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            list(ex.map(_utt_job, jobs_args))
    else:
        for a in jobs_args:
            _utt_job(a)
    train_spk = [p.speaker_id for p in speakers[:num_speakers - held_out]]
    test_spk = [p.speaker_id for p in speakers[num_speakers - held_out:]]
    rng = np.random.default_rng(mix_seq)
    manifest = DatasetManifest(root=out)
    for split, count, pool in (("train", n_train, train_spk), ("validation", n_valid, train_spk),
                               ("test", n_test, test_spk)):
        for k in range(count):
            s1, s2 = sorted(str(x) for x in rng.choice(pool, size=2, replace=False))
            p1 = utts[s1][rng.integers(utts_per_speaker)]
            p2 = utts[s2][rng.integers(utts_per_speaker)]
            gains = rng.uniform(0.0, 5.0, size=2)
            mid = f"{split}_{k:05d}"
            row = ManifestRow(mid, split, (s1, s2), (p1, p2), tuple(float(g) for g in gains),
                              f"mixtures/{mid}.wav")
            sample = load_mixture(manifest, row)
            write_wav(out / row.mixture, sample.mixture)
            manifest.rows.append(row)
    manifest.validate()
    write_manifest(out / "manifest.csv", manifest)
    return manifest


# -- manifests ---------------------------------------------------------------

def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            w.writerow([r.mixture_id, r.split, r.speaker_ids[0], r.speaker_ids[1],
                        r.sources[0], r.sources[1], repr(r.gains_db[0]), repr(r.gains_db[1]),
                        r.mixture])


def load_manifest(path: str | Path, check_audio: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = DatasetManifest(root=path.parent)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MANIFEST_COLUMNS[:-1]) - set(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain {MANIFEST_COLUMNS}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                row = ManifestRow(
                    rec["mixture_id"], rec["split"],
                    (rec["speaker_1"], rec["speaker_2"]),
                    (rec["source_1"], rec["source_2"]),
                    (float(rec["gain_1_db"]), float(rec["gain_2_db"])),
                    rec.get("mixture") or "",
                )
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not all(row.sources) or not row.mixture_id:
                raise ManifestError(f"{path}:{lineno}: missing fields")
            manifest.rows.append(row)
    manifest.validate()
    if check_audio:
        for r in manifest.rows:
            for s in r.sources:
                p = manifest.root / s
                if not p.exists():
                    raise FileNotFoundError(f"{path}: missing audio file {p}")
                read_wav(p)
    return manifest


def load_mixture(manifest: DatasetManifest, row: ManifestRow) -> MixtureSample:
    u1, u2 = (read_wav(manifest.root / s) for s in row.sources)
    return mix_utterances(u1, u2, row.gains_db, speaker_ids=row.speaker_ids)


def ingest_wav_corpus(directory: str | Path, held_out: int = 4, mixtures_per_split=(50, 10, 10),
                      seed: int = 0) -> DatasetManifest:
    """Build a manifest from ``<dir>/<speaker_id>/*.wav`` (PCM16 mono 8 kHz).

    The last ``held_out`` speakers (sorted by id) form the test split.
    """
    root = Path(directory)
    spk_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []
    utts = {}
    for d in spk_dirs:
        files = sorted(d.glob("*.wav"))
        for f in files:
            read_wav(f)
        if files:
            utts[d.name] = [str(f.relative_to(root)) for f in files]
    manifest = DatasetManifest(root=root)
    if not utts:
        log.warning("no WAV files found under %s; manifest is empty", root)
        return manifest
    speakers = sorted(utts)
    if len(speakers) - held_out < 2 or held_out < 2:
        raise ManifestError("need at least two training and two held-out speakers")
    pools = {"train": speakers[:-held_out], "validation": speakers[:-held_out],
             "test": speakers[-held_out:]}
    rng = np.random.default_rng(seed)
    for split, count in zip(SPLITS, mixtures_per_split):
        for k in range(count):
            s1, s2 = sorted(str(x) for x in rng.choice(pools[split], size=2, replace=False))
            row = ManifestRow(f"{split}_{k:05d}", split, (s1, s2),
                              (utts[s1][rng.integers(len(utts[s1]))],
                               utts[s2][rng.integers(len(utts[s2]))]),
                              tuple(float(g) for g in rng.uniform(0, 5, size=2)))
            manifest.rows.append(row)
    manifest.validate()
    return manifest


def utterance_paths(manifest: DatasetManifest, splits: Sequence[str] = SPLITS) -> dict:
    """Unique source utterance paths per speaker across the given splits."""
    out: dict = {}
    for r in manifest.rows:
        if r.split not in splits:
            continue
        for spk, src in zip(r.speaker_ids, r.sources):
            out.setdefault(spk, set()).add(src)
    return {k: sorted(v) for k, v in out.items()}


def default_jobs() -> int:
    return os.cpu_count() or 1
