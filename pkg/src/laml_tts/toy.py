"""Synthetic pseudo-language corpora with known segmentations.

Each phoneme is rendered from its articulatory features (vowel formants from
height/backness/rounding, frication noise by place, nasal murmur, plosive
bursts), over a speaker-specific f0 and vocal-tract scale. Segment lengths are
whole hops, so gold frame durations per unit are known exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .data import SAMPLE_RATE, FeatureConfig, UtteranceRecord, write_wav
from .frontend import FeatureInventory, LexiconG2P, PhoneSequence, UnitKind, default_inventory, text_to_units

PHONE_SETS = {
    "toy_a": ["p", "t", "k", "m", "n", "s", "l", "a", "i", "u", "e", "o"],
    "toy_b": ["b", "d", "ɡ", "f", "ʃ", "r", "n", "a", "ɛ", "ɔ", "y", "i"],
    "toy_c": ["t", "k", "v", "z", "m", "j", "ə", "a", "u", "ø", "e"],
    "toy_d": ["p", "d", "x", "ŋ", "l", "w", "ɑ", "i", "o", "ɪ"],
}


@dataclass
class SpeakerVoice:
    f0: float
    tract_scale: float
    tilt: float


@dataclass
class ToyUtterance:
    record: UtteranceRecord
    sequence: PhoneSequence
    durations: np.ndarray  # gold frames per unit, 0 for word boundaries


@dataclass
class ToyCorpus:
    root: Path
    manifest_path: Path
    lexicon_paths: dict[int, Path]
    language_names: dict[int, str]
    utterances: list[ToyUtterance] = field(default_factory=list)

    @property
    def records(self) -> list[UtteranceRecord]:
        return [u.record for u in self.utterances]

    def g2p(self) -> LexiconG2P:
        return LexiconG2P.from_files(self.lexicon_paths)


def _formants(feat: dict[str, float], scale: float) -> tuple[float, float]:
    f1 = 500 + 250 * feat["low"] - 200 * feat["high"] + (60 if feat["tense"] < 0 else 0)
    f2 = 1500 - 600 * feat["back"] - 250 * feat["round"]
    return f1 / scale, f2 / scale


def _bandpass(noise: np.ndarray, lo: float, hi: float) -> np.ndarray:
    sos = butter(4, [lo, min(hi, SAMPLE_RATE / 2 - 100)], btype="band", fs=SAMPLE_RATE, output="sos")
    return sosfilt(sos, noise)


_PLACE_BANDS = [
    ("labial", (800, 2500)),
    ("dorsal", (1500, 3500)),
    ("coronal", (3500, 7000)),
]


def render_phoneme(symbol: str, n_samples: int, voice: SpeakerVoice, rng: np.random.Generator,
                   inventory: FeatureInventory | None = None) -> np.ndarray:
    inventory = inventory or default_inventory()
    vec = inventory.featurize(symbol)
    feat = dict(zip(inventory.feature_names, vec))
    t = np.arange(n_samples) / SAMPLE_RATE
    jitter = 1.0 + 0.03 * np.sin(2 * np.pi * 3 * t + rng.uniform(0, 6))
    phase = 2 * np.pi * np.cumsum(voice.f0 * jitter) / SAMPLE_RATE
    out = np.zeros(n_samples)
    if feat["voice"] > 0:
        f1, f2 = _formants(feat, voice.tract_scale)
        source = np.zeros(n_samples)
        for k in range(1, int(4000 / voice.f0)):
            fk = k * voice.f0
            gain = np.exp(-((fk - f1) / 180) ** 2) + 0.6 * np.exp(-((fk - f2) / 250) ** 2) + 0.05
            source += gain * k ** (-voice.tilt) * np.sin(k * phase)
        amp = 0.25 if feat["syllabic"] > 0 else 0.12
        if feat["nasal"] > 0:
            source = sum(np.sin(k * phase) * k ** (-2.0) for k in range(1, 6))
            amp = 0.12
        out += amp * source / max(np.abs(source).max(), 1e-9)
        # aspiration noise fills the valleys between harmonics, as in real voicing
        breath = lfilter([1.0], [1.0, -0.9], rng.standard_normal(n_samples))
        out += 0.04 * amp * breath / max(breath.std(), 1e-9)
    if feat["continuant"] > 0 and feat["sonorant"] < 0 or feat["delayed_release"] > 0:
        band = next((b for name, b in _PLACE_BANDS if feat.get(name, -1) > 0), (2000, 6000))
        noise = _bandpass(rng.standard_normal(n_samples), *band)
        out += 0.08 * noise / max(np.abs(noise).max(), 1e-9)
    if feat["continuant"] < 0 and feat["sonorant"] < 0:
        # plosive: closure then burst
        burst = np.zeros(n_samples)
        start = n_samples * 2 // 3
        band = next((b for name, b in _PLACE_BANDS if feat.get(name, -1) > 0), (2000, 6000))
        burst[start:] = _bandpass(rng.standard_normal(n_samples - start), *band)
        out = 0.3 * out + 0.15 * burst / max(np.abs(burst).max(), 1e-9)
    ramp = min(64, n_samples // 4)
    if ramp:
        env = np.ones(n_samples)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        out *= env
    return out


def _make_lexicon(phones: list[str], rng: np.random.Generator, n_words: int = 8) -> dict[str, list[str]]:
    vowels = [p for p in phones if default_inventory().featurize(p)[0] > 0]
    cons = [p for p in phones if p not in vowels]
    lex: dict[str, list[str]] = {}
    while len(lex) < n_words:
        syllables = int(rng.integers(1, 3))
        pron: list[str] = []
        for _ in range(syllables):
            pron += [str(rng.choice(cons)), str(rng.choice(vowels))]
            if rng.random() < 0.3:
                pron.append(str(rng.choice(cons)))
        word = "".join("aeiou"[i % 5] if p in vowels else "bdfgklmnprstvz"[sum(map(ord, p)) % 14] for i, p in enumerate(pron))
        word = f"{word}{len(lex)}"
        lex[word] = pron
    return lex


def make_toy_corpus(
    root: str | Path,
    languages: list[str] | None = None,
    speakers_per_language: int = 2,
    utterances_per_language: int = 4,
    seed: int = 0,
    language_offset: int = 0,
    min_frames: int = 70,
    voices: dict[str, SpeakerVoice] | None = None,
) -> ToyCorpus:
    """Write WAVs, per-language lexicons and a JSON-lines manifest under ``root``."""
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    languages = languages or ["toy_a", "toy_b"]
    rng = np.random.default_rng(seed)
    cfg = FeatureConfig()
    hop = cfg.hop_length
    inventory = default_inventory()
    names = {language_offset + i: name for i, name in enumerate(languages)}
    lexicons, lex_paths = {}, {}
    for lid, name in names.items():
        lexicons[lid] = _make_lexicon(PHONE_SETS[name], rng)
        lex_paths[lid] = root / f"lexicon_{name}.tsv"
        with open(lex_paths[lid], "w", encoding="utf-8") as fh:
            for w, p in lexicons[lid].items():
                fh.write(f"{w}\t{' '.join(p)}\n")
    g2p = LexiconG2P(lexicons)

    corpus = ToyCorpus(root, root / "manifest.jsonl", lex_paths, names)
    for lid, name in names.items():
        speaker_ids = [f"{name}_spk{k}" for k in range(speakers_per_language)]
        if voices is None:
            spk_voices = {
                s: SpeakerVoice(f0=float(rng.uniform(95, 230)), tract_scale=float(rng.uniform(0.9, 1.15)),
                                tilt=float(rng.uniform(0.6, 1.4)))
                for s in speaker_ids
            }
        else:
            spk_voices = {s: voices[s] for s in speaker_ids}
        words = list(lexicons[lid])
        for u in range(utterances_per_language):
            spk = speaker_ids[u % len(speaker_ids)]
            voice = spk_voices[spk]
            while True:
                n_words = int(rng.integers(3, 6))
                chosen = [str(rng.choice(words)) for _ in range(n_words)]
                text = chosen[0]
                for w in chosen[1:]:
                    text += (", " if rng.random() < 0.25 else " ") + w
                text += str(rng.choice([".", ".", "?", "!"]))
                seq = text_to_units(text, lid, g2p, inventory=inventory)
                durs = []
                for unit in seq.units:
                    if unit.kind is UnitKind.WORD_BOUNDARY:
                        durs.append(0)
                    elif unit.kind is UnitKind.PHONEME:
                        syll = inventory.featurize(unit.symbol)[0] > 0
                        durs.append(int(rng.integers(7, 12) if syll else rng.integers(4, 7)))
                    else:
                        durs.append(int(rng.integers(5, 9)))
                if sum(durs) >= min_frames:
                    break
            pieces = []
            for unit, d in zip(seq.units, durs):
                n = d * hop
                if unit.kind is UnitKind.PHONEME:
                    pieces.append(render_phoneme(unit.symbol, n, voice, rng, inventory))
                else:
                    pieces.append(np.zeros(n))
            # one sample short of whole hops so centered framing yields exactly sum(durs) frames
            wave = np.concatenate(pieces)[:-1]
            wave = wave + 1e-3 * rng.standard_normal(wave.size)
            path = root / "wavs" / f"{name}_{u:03d}.wav"
            write_wav(path, wave)
            record = UtteranceRecord(str(path), text, lid, spk)
            corpus.utterances.append(ToyUtterance(record, seq, np.asarray(durs, dtype=np.int64)))

    with open(corpus.manifest_path, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            r = u.record
            fh.write(json.dumps({"audio_path": str(Path(r.audio_path).relative_to(root)), "transcript": r.transcript,
                                 "language_id": r.language_id, "speaker_id": r.speaker_id}, ensure_ascii=False) + "\n")
    with open(root / "languages.json", "w", encoding="utf-8") as fh:
        json.dump({str(k): v for k, v in names.items()}, fh)
    return corpus
