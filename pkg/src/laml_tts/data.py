"""Corpus ingestion, acoustic feature extraction and the on-disk feature cache."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CACHE_MAGIC = b"LAMLTTS-FEATS-v1\n"
LOG_FLOOR = 1e-5


class IngestionError(RuntimeError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    f0_min: float = 50.0
    f0_max: float = 600.0
    voicing_threshold: float = 0.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def n_frames(self, n_samples: int) -> int:
        """Frame count under centered framing."""
        return 1 + n_samples // self.hop_length


# ---------------------------------------------------------------------------
# waveform I/O


def load_wav(path: str | Path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a WAV file as mono float32 in [-1, 1], resampled to ``sample_rate``."""
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IngestionError(path, f"cannot decode audio ({exc})") from exc
    if data.size == 0:
        raise IngestionError(path, "empty audio")
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / float(np.iinfo(data.dtype).max)
    data = data.astype(np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sr != sample_rate:
        g = gcd(sr, sample_rate)
        data = resample_poly(data, sample_rate // g, sr // g).astype(np.float32)
    return data


def write_wav(path: str | Path, wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM mono."""
    pcm = np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0)
    wavfile.write(str(path), sample_rate, np.round(pcm * 32767).astype(np.int16))


def wav_duration(path: str | Path) -> float:
    sr, data = wavfile.read(str(path), mmap=True)
    return data.shape[0] / sr


# ---------------------------------------------------------------------------
# spectral analysis


def _frames(wave: np.ndarray, cfg: FeatureConfig, length: int) -> np.ndarray:
    pad = cfg.n_fft // 2
    padded = np.pad(wave, pad, mode="reflect" if wave.size > pad else "constant")
    n = cfg.n_frames(wave.size)
    idx = np.arange(length)[None, :] + cfg.hop_length * np.arange(n)[:, None]
    needed = idx.max() + 1
    if needed > padded.size:
        padded = np.pad(padded, (0, needed - padded.size))
    return padded[idx]


def window(cfg: FeatureConfig) -> np.ndarray:
    win = np.hanning(cfg.win_length + 1)[:-1]  # periodic
    left = (cfg.n_fft - cfg.win_length) // 2
    return np.pad(win, (left, cfg.n_fft - cfg.win_length - left))


def stft(wave: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Centered STFT, returns complex frames x bins."""
    frames = _frames(np.asarray(wave, dtype=np.float64), cfg, cfg.n_fft)
    return np.fft.rfft(frames * window(cfg), axis=1)


def istft(spec: np.ndarray, cfg: FeatureConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    n = spec.shape[0]
    total = cfg.n_fft + cfg.hop_length * (n - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n):
        s = t * cfg.hop_length
        out[s : s + cfg.n_fft] += frames[t]
        norm[s : s + cfg.n_fft] += win**2
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = cfg.n_fft // 2
    out = out[pad:]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Area-normalized triangular filters on the HTK mel scale, mels x bins."""
    freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, freqs.size))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling)) * (2.0 / (hi - lo))
    return fb


def track_pitch(wave: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Autocorrelation f0 per frame in Hz, 0 for unvoiced frames."""
    frames = _frames(np.asarray(wave, dtype=np.float64), cfg, cfg.win_length)
    frames = frames - frames.mean(axis=1, keepdims=True)
    nfft = 2 * cfg.win_length
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, : cfg.win_length]
    r0 = acf[:, 0]
    f0 = np.zeros(frames.shape[0])
    lo = int(np.floor(cfg.sample_rate / cfg.f0_max))
    hi = min(int(np.ceil(cfg.sample_rate / cfg.f0_min)), cfg.win_length - 2)
    rms = np.sqrt(r0 / cfg.win_length)
    for t in np.nonzero(rms > 1e-4)[0]:
        r = acf[t] / r0[t]
        seg = r[lo : hi + 1]
        interior = (seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])
        peaks = np.nonzero(interior)[0] + 1
        if peaks.size == 0:
            continue
        k = peaks[np.argmax(seg[peaks])] + lo
        if r[k] < cfg.voicing_threshold:
            continue
        denom = r[k - 1] - 2 * r[k] + r[k + 1]
        shift = 0.5 * (r[k - 1] - r[k + 1]) / denom if denom != 0 else 0.0
        f0[t] = cfg.sample_rate / (k + shift)
    return f0


@dataclass
class FrameFeatures:
    mel: np.ndarray  # frames x mels, natural-log magnitude
    frame_pitch: np.ndarray
    frame_energy: np.ndarray


def extract_features(wave: np.ndarray, cfg: FeatureConfig = FeatureConfig(), *, source: str = "<array>") -> FrameFeatures:
    wave = np.asarray(wave)
    if wave.ndim != 1 or wave.size == 0:
        raise IngestionError(source, "expected a non-empty mono waveform")
    if not np.isfinite(wave).all():
        raise IngestionError(source, "waveform contains non-finite samples")
    mag = np.abs(stft(wave, cfg))
    mel = np.log(np.maximum(mag @ mel_filterbank(cfg).T, LOG_FLOOR)).astype(np.float32)
    energy = np.sqrt((mag**2).sum(axis=1)).astype(np.float32)
    pitch = track_pitch(wave, cfg).astype(np.float32)
    return FrameFeatures(mel, pitch, energy)


# ---------------------------------------------------------------------------
# phoneme-level prosody


def phoneme_average(frame_values: np.ndarray, durations: Sequence[int], exclude_zeros: bool = False) -> np.ndarray:
    """Mean of each unit's frames; zero-length (and, with ``exclude_zeros``, fully zero) units give 0."""
    values = np.asarray(frame_values, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if (durations < 0).any():
        raise ShapeError("negative duration")
    if durations.sum() != values.shape[0]:
        raise ShapeError(f"durations sum to {durations.sum()} but there are {values.shape[0]} frames")
    owner = np.repeat(np.arange(durations.size), durations)
    if exclude_zeros:
        counted = values != 0
    else:
        counted = np.ones_like(values, dtype=bool)
    sums = np.bincount(owner, weights=np.where(counted, values, 0.0), minlength=durations.size)
    counts = np.bincount(owner, weights=counted.astype(np.float64), minlength=durations.size)
    out = np.zeros(durations.size)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def _voiced_stats(values: np.ndarray, voiced: np.ndarray) -> tuple[float, float]:
    sel = values[voiced] if voiced.any() else values
    if sel.size == 0:
        return 0.0, 1.0
    std = float(sel.std())
    return float(sel.mean()), std if std > 1e-8 else 1.0


@dataclass
class AcousticFeatures:
    mel: np.ndarray
    frame_pitch: np.ndarray
    frame_energy: np.ndarray
    durations: np.ndarray | None = None
    unit_pitch: np.ndarray | None = None
    unit_energy: np.ndarray | None = None
    speaker_embedding: np.ndarray | None = None
    pitch_stats: tuple[float, float] = (0.0, 1.0)
    energy_stats: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        voiced = self.frame_pitch > 0
        self.pitch_stats = _voiced_stats(self.frame_pitch, voiced)
        self.energy_stats = _voiced_stats(self.frame_energy, voiced)
        self.validate()

    @classmethod
    def from_frames(cls, frames: FrameFeatures, **kw) -> "AcousticFeatures":
        return cls(frames.mel, frames.frame_pitch, frames.frame_energy, **kw)

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    def validate(self) -> None:
        T = self.n_frames
        if self.frame_pitch.shape != (T,) or self.frame_energy.shape != (T,):
            raise ShapeError("mel, pitch and energy frame counts differ")
        if self.durations is None:
            return
        L = self.durations.shape[0]
        if int(self.durations.sum()) != T:
            raise ShapeError(f"durations sum to {int(self.durations.sum())}, mel has {T} frames")
        if self.unit_pitch is None or self.unit_energy is None:
            raise ShapeError("unit averages missing")
        if self.unit_pitch.shape != (L,) or self.unit_energy.shape != (L,):
            raise ShapeError("unit averages do not match the unit count")
        if (self.unit_energy < 0).any():
            raise ShapeError("negative unit energy")

    def with_durations(self, durations: Sequence[int]) -> "AcousticFeatures":
        durations = np.asarray(durations, dtype=np.int64)
        return dataclasses.replace(
            self,
            durations=durations,
            unit_pitch=phoneme_average(self.frame_pitch, durations, exclude_zeros=True).astype(np.float32),
            unit_energy=phoneme_average(self.frame_energy, durations).astype(np.float32),
        )

    def normalized_unit_pitch(self) -> np.ndarray:
        # averaging then standardizing equals standardizing the voiced frames first (both affine)
        mean, std = self.pitch_stats
        voiced = self.unit_pitch > 0
        return np.where(voiced, (self.unit_pitch - mean) / std, 0.0).astype(np.float32)

    def normalized_unit_energy(self) -> np.ndarray:
        mean, std = self.energy_stats
        return np.where(self.durations > 0, (self.unit_energy - mean) / std, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class UtteranceRecord:
    audio_path: str
    transcript: str
    language_id: int
    speaker_id: str

    def validate(self) -> None:
        if not self.transcript.strip():
            raise IngestionError(self.audio_path, "empty transcript")
        if not Path(self.audio_path).is_file():
            raise IngestionError(self.audio_path, "audio file does not exist")


@dataclass
class CorpusManifest:
    records: list[UtteranceRecord]
    cap: int | None = None
    seed: int | None = None

    def by_language(self) -> dict[int, list[UtteranceRecord]]:
        groups: dict[int, list[UtteranceRecord]] = {}
        for r in self.records:
            groups.setdefault(r.language_id, []).append(r)
        return dict(sorted(groups.items()))

    def language_ids(self) -> list[int]:
        return sorted({r.language_id for r in self.records})


def load_manifest(path: str | Path) -> CorpusManifest:
    """JSON-lines manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                audio = Path(obj["audio_path"])
                if not audio.is_absolute():
                    audio = path.parent / audio
                records.append(
                    UtteranceRecord(str(audio), str(obj["transcript"]), int(obj["language_id"]), str(obj["speaker_id"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestionError(path, f"line {lineno}: {exc}") from exc
    return CorpusManifest(records)


def save_manifest(manifest: CorpusManifest | Iterable[UtteranceRecord], path: str | Path) -> None:
    records = manifest.records if isinstance(manifest, CorpusManifest) else list(manifest)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(dataclasses.asdict(r), ensure_ascii=False) + "\n")


def cap_manifest(manifest: CorpusManifest, cap: int = 20_000, seed: int = 0) -> CorpusManifest:
    """Keep at most ``cap`` randomly chosen records per corpus (language)."""
    rng = np.random.default_rng(seed)
    kept: list[UtteranceRecord] = []
    for _, recs in manifest.by_language().items():
        if len(recs) > cap:
            pick = np.sort(rng.choice(len(recs), size=cap, replace=False))
            recs = [recs[i] for i in pick]
        kept.extend(recs)
    return CorpusManifest(kept, cap=cap, seed=seed)


def select_minutes_budget(
    records: Sequence[UtteranceRecord],
    budget_seconds: float,
    seed: int = 0,
    durations: Sequence[float] | None = None,
) -> list[UtteranceRecord]:
    """Random whole utterances, stopping before the one that would exceed the budget."""
    if durations is None:
        durations = [wav_duration(r.audio_path) for r in records]
    order = np.random.default_rng(seed).permutation(len(records))
    chosen, total = [], 0.0
    for i in order:
        if total + durations[i] > budget_seconds:
            break
        chosen.append(records[i])
        total += durations[i]
    return chosen


# ---------------------------------------------------------------------------
# feature cache

_ARRAY_FIELDS = ("mel", "frame_pitch", "frame_energy", "durations", "unit_pitch", "unit_energy", "speaker_embedding")


class FeatureCache:
    """One file per utterance, keyed by a hash of audio bytes, transcript and config.

    File layout: magic line, one JSON header line, then an ``.npz`` payload.
    Writes go to a temporary file that is renamed into place, so concurrent
    writers never expose partial files.
    """

    def __init__(self, root: str | Path, config: FeatureConfig = FeatureConfig(), extra_key: str = ""):
        self.root = Path(root)
        self.config = config
        self.extra_key = extra_key
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256((self.config.digest() + self.extra_key).encode()).hexdigest()[:16]

    def key(self, record: UtteranceRecord) -> str:
        h = hashlib.sha256()
        h.update(Path(record.audio_path).read_bytes())
        h.update(b"\0" + record.transcript.encode("utf-8") + b"\0")
        h.update(self.config_hash.encode())
        return h.hexdigest()

    def path(self, record: UtteranceRecord) -> Path:
        k = self.key(record)
        return self.root / k[:2] / f"{k}.feats"

    def write(self, record: UtteranceRecord, features: AcousticFeatures) -> Path:
        features.validate()
        target = self.path(record)
        target.parent.mkdir(parents=True, exist_ok=True)
        arrays = {name: getattr(features, name) for name in _ARRAY_FIELDS if getattr(features, name) is not None}
        payload = io.BytesIO()
        np.savez(payload, **arrays)
        header = {"config_hash": self.config_hash, "arrays": sorted(arrays)}
        fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(CACHE_MAGIC)
                fh.write(json.dumps(header).encode() + b"\n")
                fh.write(payload.getvalue())
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return target

    def read(self, record: UtteranceRecord) -> AcousticFeatures | None:
        """Cached features, or ``None`` on a miss (absent, stale or unreadable entry)."""
        target = self.path(record)
        if not target.is_file():
            return None
        with open(target, "rb") as fh:
            if fh.readline() != CACHE_MAGIC:
                log.warning("ignoring cache file with unknown format: %s", target)
                return None
            header = json.loads(fh.readline())
            if header.get("config_hash") != self.config_hash:
                return None
            with np.load(io.BytesIO(fh.read())) as npz:
                arrays = {name: npz[name] for name in npz.files}
        return AcousticFeatures(**arrays)
