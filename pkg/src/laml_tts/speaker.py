"""Speaker embeddings: a pluggable embedder registry and cosine similarity.

Production embedders (ECAPA-TDNN, x-vector) are external models behind the
adapter contract ``waveform @ sample_rate -> vector``. The toy embedder
returns spectral statistics so tests stay hermetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import SAMPLE_RATE, FeatureConfig, stft, track_pitch


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    source: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise EmbeddingError("speaker embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class Embedder(Protocol):
    name: str
    dim: int
    sample_rate: int

    def __call__(self, wave: np.ndarray) -> np.ndarray: ...


def embed(wave: np.ndarray, embedder: "Embedder", min_seconds: float = 1.0) -> SpeakerEmbedding:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size < min_seconds * embedder.sample_rate:
        raise EmbeddingError(
            f"need at least {min_seconds:g} s of mono audio, got {wave.size / embedder.sample_rate:.3f} s"
        )
    vec = np.asarray(embedder(wave), dtype=np.float64)
    if vec.shape != (embedder.dim,):
        raise EmbeddingError(f"embedder {embedder.name!r} returned shape {vec.shape}, declared ({embedder.dim},)")
    return SpeakerEmbedding(vec, embedder.name)


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    if a.dim != b.dim or a.source != b.source:
        raise EmbeddingError(f"cannot compare {a.source}[{a.dim}] with {b.source}[{b.dim}]")
    na, nb = np.linalg.norm(a.vector), np.linalg.norm(b.vector)
    if na == 0 or nb == 0:
        raise EmbeddingError("zero-norm embedding")
    return float(np.clip(np.dot(a.vector, b.vector) / (na * nb), -1.0, 1.0))


class ToyEmbedder:
    """Deterministic spectral statistics: log band energies, mean and spread of log f0.

    Band energies are taken from the utterance-average power spectrum and
    mean-removed, so the vector ignores loudness and time shifts.
    """

    name = "toy"
    sample_rate = SAMPLE_RATE

    def __init__(self, dim: int = 32, config: FeatureConfig = FeatureConfig()):
        if dim < 4:
            raise ValueError("toy embedder needs dim >= 4")
        self.dim = dim
        self.config = config
        n_bands = dim - 3
        freqs = np.linspace(0, config.sample_rate / 2, config.n_fft // 2 + 1)
        edges = np.geomspace(60.0, config.sample_rate / 2, n_bands + 1)
        self._bands = [(freqs >= lo) & (freqs < hi) for lo, hi in zip(edges[:-1], edges[1:])]

    def __call__(self, wave: np.ndarray) -> np.ndarray:
        power = (np.abs(stft(wave, self.config)) ** 2).mean(axis=0)
        bands = np.log(np.array([power[m].sum() if m.any() else 0.0 for m in self._bands]) + 1e-8)
        bands = (bands - bands.mean()) / 10.0
        f0 = track_pitch(wave, self.config)
        voiced = f0[f0 > 0]
        if voiced.size:
            logf0 = np.log2(voiced / 100.0)
            stats = [logf0.mean(), logf0.std(), voiced.size / f0.size]
        else:
            stats = [0.0, 0.0, 0.0]
        return np.concatenate([bands, stats])


class EnsembleEmbedder:
    """Concatenates member embeddings in the declared order."""

    def __init__(self, members: Sequence[Embedder]):
        if not members:
            raise ValueError("ensemble needs at least one member")
        rates = {m.sample_rate for m in members}
        if len(rates) != 1:
            raise ValueError(f"members disagree on sample rate: {rates}")
        self.members = list(members)
        self.name = "+".join(m.name for m in members)
        self.dim = sum(m.dim for m in members)
        self.sample_rate = rates.pop()

    def __call__(self, wave: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(m(wave), dtype=np.float64) for m in self.members])


class ConstantEmbedder:
    """Returns the same vector for every input; used for harness self-tests."""

    sample_rate = SAMPLE_RATE

    def __init__(self, dim: int = 32, name: str = "constant"):
        self.dim = dim
        self.name = name
        self._vec = np.ones(dim)

    def __call__(self, wave: np.ndarray) -> np.ndarray:
        return self._vec.copy()


class SpeechBrainEmbedder:
    """Adapter for a pretrained SpeechBrain speaker-verification model (optional dependency)."""

    sample_rate = SAMPLE_RATE

    def __init__(self, source: str, dim: int, name: str):
        try:
            from speechbrain.inference.speaker import EncoderClassifier
        except ImportError as exc:
            raise EmbeddingError(f"embedder {name!r} needs the optional 'speechbrain' package") from exc
        self.model = EncoderClassifier.from_hparams(source=source)  # pragma: no cover
        self.dim = dim  # pragma: no cover
        self.name = name  # pragma: no cover

    def __call__(self, wave: np.ndarray) -> np.ndarray:  # pragma: no cover - needs pretrained weights
        import torch

        with torch.no_grad():
            out = self.model.encode_batch(torch.as_tensor(wave, dtype=torch.float32)[None])
        return out.squeeze().numpy()


_REGISTRY: dict[str, Callable[..., Embedder]] = {
    "toy": ToyEmbedder,
    "constant": ConstantEmbedder,
    "ecapa": lambda dim=192: SpeechBrainEmbedder("speechbrain/spkrec-ecapa-voxceleb", dim, "ecapa"),
    "xvector": lambda dim=512: SpeechBrainEmbedder("speechbrain/spkrec-xvect-voxceleb", dim, "xvector"),
}


def register_embedder(name: str, factory: Callable[..., Embedder]) -> None:
    _REGISTRY[name] = factory


def build_embedder(spec: str | Sequence[str]) -> Embedder:
    """``"toy"`` or ``"ecapa+xvector"`` or a list of registered names."""
    names = spec.split("+") if isinstance(spec, str) else list(spec)
    try:
        members = [_REGISTRY[n]() for n in names]
    except KeyError as exc:
        raise EmbeddingError(f"unknown embedder {exc.args[0]!r}; registered: {sorted(_REGISTRY)}") from None
    return members[0] if len(members) == 1 else EnsembleEmbedder(members)
